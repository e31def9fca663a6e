#pragma once

// Meta-path instance mining as a Markov decision process.
//
// State (e_t, his_t); actions are the neighbors of e_t (the self-loop makes
// e_t itself a candidate). Each candidate is scored by
//
//     z_j = tau * cos(P h_t, h_j),      tau = exp(log_temperature)
//
// and the action distribution is softmax(z) over all candidates, pruned to the
// k most probable and renormalized. With P = I and tau = 1 this is the plain
// softmax-of-cosine score. P and log_temperature are trained with REINFORCE
// against a terminal reward of 1 for reaching the target within max_steps.

#include "tmer/checkpoint.hpp"
#include "tmer/embedding.hpp"

#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>

namespace tmer {

struct PolicyModel {
  Matrix projection;            // dim x dim, applied to the current node's vector
  double log_temperature = 0;
  int max_steps = 6;
  std::size_t k_actions = 20;
  double baseline = 0;          // running average reward
  double baseline_decay = 0.99;

  static PolicyModel identity(int dim, int max_steps = 6, std::size_t k_actions = 20) {
    PolicyModel m;
    m.projection = Matrix::Identity(dim, dim);
    m.max_steps = max_steps;
    m.k_actions = k_actions;
    m.validate();
    return m;
  }

  double temperature() const { return std::exp(log_temperature); }

  void validate() const {
    if (projection.rows() != projection.cols() || projection.rows() == 0) {
      throw ConfigError("policy projection must be a non-empty square matrix");
    }
    if (!projection.allFinite() || !std::isfinite(log_temperature)) {
      throw NumericError("policy parameters are not finite");
    }
    if (max_steps < 1) throw ConfigError("max_steps must be >= 1");
    if (k_actions < 1) throw ConfigError("k_actions must be >= 1");
  }

  void write(std::ostream& os) const {
    checkpoint::Writer w(os);
    w.put("projection", projection);
    w.put("log_temperature", log_temperature);
    w.put("max_steps", static_cast<double>(max_steps));
    w.put("k_actions", static_cast<double>(k_actions));
    w.put("baseline", baseline);
    w.put("baseline_decay", baseline_decay);
  }

  static PolicyModel read(std::istream& is) {
    checkpoint::Reader r(is);
    PolicyModel m;
    m.projection = r.matrix("projection");
    m.log_temperature = r.scalar("log_temperature");
    m.max_steps = static_cast<int>(r.scalar("max_steps"));
    m.k_actions = static_cast<std::size_t>(r.scalar("k_actions"));
    m.baseline = r.scalar("baseline");
    m.baseline_decay = r.scalar("baseline_decay");
    m.validate();
    return m;
  }
};

struct PolicyState {
  NodeRef current;
  std::vector<NodeRef> history;  // includes current
  int step = 0;

  static PolicyState start(NodeRef source) { return {source, {source}, 0}; }
};

struct Action {
  NodeRef node;
  Relation relation = Relation::SelfLoop;
  double probability = 0;
};

struct PathInstance {
  std::vector<NodeRef> nodes;
  std::vector<Relation> relations;  // relations[t] links nodes[t] -> nodes[t+1]
  std::vector<double> step_scores;  // probability of each chosen step; empty when loaded from file
  double score = 0;                 // mean of step_scores

  std::size_t length() const { return relations.size(); }

  friend bool operator==(const PathInstance& a, const PathInstance& b) {
    return a.nodes == b.nodes && a.relations == b.relations;
  }
};

// Mean of the per-step scores, so the path length does not bias the ranking.
inline double path_score(std::span<const double> step_scores) {
  if (step_scores.empty()) return 0;
  double s = 0;
  for (double v : step_scores) s += v;
  return s / static_cast<double>(step_scores.size());
}

namespace detail {

// Kept actions sorted by probability (descending, adjacency order on ties).
// `unit_query` is tau * P h_t / |P h_t|; unit(j) returns h_j / |h_j|.
template <class UnitFn>
std::vector<Action> score_actions(std::span<const Neighbor> candidates, const Vector& unit_query,
                                  std::size_t k_actions, UnitFn&& unit) {
  const auto n = candidates.size();
  std::vector<double> logits(n);
  for (std::size_t j = 0; j < n; ++j) logits[j] = unit_query.dot(unit(candidates[j].node));
  const double top = *std::max_element(logits.begin(), logits.end());
  std::vector<std::size_t> order(n);
  for (std::size_t j = 0; j < n; ++j) order[j] = j;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return logits[a] > logits[b]; });
  order.resize(std::min(n, k_actions));
  double z = 0;
  for (std::size_t j : order) z += std::exp(logits[j] - top);
  std::vector<Action> out;
  out.reserve(order.size());
  for (std::size_t j : order) {
    out.push_back({candidates[j].node, candidates[j].relation, std::exp(logits[j] - top) / z});
  }
  return out;
}

inline Vector unit_or_throw(const Vector& v, NodeRef node, const char* what) {
  const double norm = v.norm();
  if (!(norm > 0) || !std::isfinite(norm)) {
    throw NumericError(std::string("zero-norm ") + what + " for node " + to_string(node) +
                       " (embedding degenerate)");
  }
  return v / norm;
}

}  // namespace detail

// Action distribution at `state`, pruned to the top k and renormalized.
inline std::vector<Action> action_scores(const TypedGraph& g, const PolicyState& state,
                                         const PolicyModel& model, const EmbeddingTable& table) {
  auto candidates = g.neighbors(state.current);
  if (candidates.empty()) throw DataError("node " + to_string(state.current) + " has no actions");
  Vector query = model.projection * table[state.current];
  Vector unit_query =
      model.temperature() * detail::unit_or_throw(query, state.current, "projected vector");
  return detail::score_actions(candidates, unit_query, model.k_actions, [&](NodeRef n) {
    return detail::unit_or_throw(table[n], n, "embedding");
  });
}

// Precomputes unit embeddings and scaled unit queries for every node so that
// scoring an action set costs one dot product per candidate. Immutable after
// construction (apart from an internally synchronized cache) and safe to
// share across threads.
class PolicyScorer {
 public:
  PolicyScorer(const TypedGraph& g, const EmbeddingTable& table, const PolicyModel& model)
      : graph_(&g), k_actions_(model.k_actions), max_steps_(model.max_steps) {
    if (table.counts().total() < g.node_count()) {
      throw DataError("embedding table does not cover the graph");
    }
    const auto n = static_cast<Eigen::Index>(g.node_count());
    const Matrix& h = table.matrix();
    units_ = h.leftCols(n);
    valid_unit_.assign(n, true);
    for (Eigen::Index j = 0; j < n; ++j) {
      const double norm = units_.col(j).norm();
      if (norm > 0 && std::isfinite(norm)) {
        units_.col(j) /= norm;
      } else {
        valid_unit_[j] = false;
      }
    }
    cache_ = std::make_shared<Cache>(g.node_count());
    queries_ = model.projection * h.leftCols(n);
    valid_query_.assign(n, true);
    const double tau = model.temperature();
    for (Eigen::Index j = 0; j < n; ++j) {
      const double norm = queries_.col(j).norm();
      if (norm > 0 && std::isfinite(norm)) {
        queries_.col(j) *= tau / norm;
      } else {
        valid_query_[j] = false;
      }
    }
  }

  // Action sets are computed once per node and cached; the policy is frozen
  // for the scorer's lifetime.
  const std::vector<Action>& actions(NodeRef current) const {
    const auto i = graph_->index(current);
    std::call_once(cache_->once[i], [&] { cache_->actions[i] = compute(current, i); });
    return cache_->actions[i];
  }

  const TypedGraph& graph() const { return *graph_; }
  int max_steps() const { return max_steps_; }

 private:
  const TypedGraph* graph_;
  std::size_t k_actions_;
  int max_steps_;
  Matrix units_;
  Matrix queries_;
  std::vector<bool> valid_unit_;
  std::vector<bool> valid_query_;

  struct Cache {
    explicit Cache(std::size_t n) : once(new std::once_flag[n]), actions(n) {}
    std::unique_ptr<std::once_flag[]> once;
    std::vector<std::vector<Action>> actions;
  };
  std::shared_ptr<Cache> cache_;

  std::vector<Action> compute(NodeRef current, std::size_t i) const {
    if (!valid_query_[i]) {
      throw NumericError("zero-norm projected vector for node " + to_string(current) +
                         " (embedding degenerate)");
    }
    const Vector q = queries_.col(static_cast<Eigen::Index>(i));
    return detail::score_actions(graph_->neighbors(current), q, k_actions_,
                                 [&](NodeRef n) -> Vector {
                                   auto j = graph_->index(n);
                                   if (!valid_unit_[j]) {
                                     throw NumericError("zero-norm embedding for node " +
                                                        to_string(n));
                                   }
                                   return units_.col(static_cast<Eigen::Index>(j));
                                 });
  }
};

// Deterministic transition: the chosen action becomes the current node.
inline PolicyState step(const PolicyState& state, std::span<const Action> actions, NodeRef chosen,
                        int max_steps) {
  if (state.step >= max_steps) {
    throw Error("episode is terminal at step " + std::to_string(state.step) + "; step rejected");
  }
  bool allowed = std::any_of(actions.begin(), actions.end(),
                             [&](const Action& a) { return a.node == chosen; });
  if (!allowed) throw Error("node " + to_string(chosen) + " is not in the action set");
  PolicyState next = state;
  next.current = chosen;
  next.history.push_back(chosen);
  next.step = state.step + 1;
  return next;
}

inline int reward(const PolicyState& state, NodeRef target, int max_steps) {
  return state.current == target && state.step <= max_steps ? 1 : 0;
}

struct StepRecord {
  PolicyState state;  // state the action was taken from
  Action action;
};

struct Episode {
  NodeRef source;
  NodeRef target;
  std::vector<StepRecord> steps;
  int reward = 0;
  std::optional<PathInstance> path;
};

inline PathInstance make_path(NodeRef source, std::span<const StepRecord> steps) {
  PathInstance p;
  p.nodes.push_back(source);
  for (const auto& s : steps) {
    p.nodes.push_back(s.action.node);
    p.relations.push_back(s.action.relation);
    p.step_scores.push_back(s.action.probability);
  }
  p.score = path_score(p.step_scores);
  return p;
}

inline std::size_t sample_action(std::span<const Action> actions, Rng& rng) {
  double u = uniform01(rng);
  for (std::size_t j = 0; j < actions.size(); ++j) {
    u -= actions[j].probability;
    if (u < 0) return j;
  }
  return actions.size() - 1;
}

// Stepping onto `avoid` ends the episode with reward 0.
inline Episode run_episode(const PolicyScorer& scorer, NodeRef source, NodeRef target, Rng& rng,
                           std::optional<NodeRef> avoid = std::nullopt) {
  Episode ep{source, target, {}, 0, std::nullopt};
  PolicyState state = PolicyState::start(source);
  while (state.current != target && state.step < scorer.max_steps()) {
    const auto& actions = scorer.actions(state.current);
    const Action& chosen = actions[sample_action(actions, rng)];
    ep.steps.push_back({state, chosen});
    state = step(state, actions, chosen.node, scorer.max_steps());
    if (avoid && state.current == *avoid) return ep;
  }
  ep.reward = reward(state, target, scorer.max_steps());
  if (ep.reward == 1 && !ep.steps.empty()) ep.path = make_path(source, ep.steps);
  return ep;
}

inline Episode run_episode(const TypedGraph& g, const EmbeddingTable& table,
                           const PolicyModel& model, NodeRef source, NodeRef target, Rng& rng) {
  return run_episode(PolicyScorer(g, table, model), source, target, rng);
}

// ---------------------------------------------------------------------------
// Policy gradient.

struct PolicyGradient {
  Matrix projection;
  double log_temperature = 0;

  static PolicyGradient zeros(int dim) { return {Matrix::Zero(dim, dim), 0}; }
  PolicyGradient& operator+=(const PolicyGradient& o) {
    projection += o.projection;
    log_temperature += o.log_temperature;
    return *this;
  }
};

// log pi(a | s) under `model`, recomputing the pruned action set. Returns
// -inf when the action falls outside the kept set.
inline double step_log_prob(const TypedGraph& g, const EmbeddingTable& table,
                            const PolicyModel& model, const StepRecord& s) {
  auto actions = action_scores(g, s.state, model, table);
  for (const Action& a : actions) {
    if (a.node == s.action.node) return std::log(a.probability);
  }
  return -std::numeric_limits<double>::infinity();
}

inline double trajectory_log_prob(const TypedGraph& g, const EmbeddingTable& table,
                                  const PolicyModel& model, std::span<const StepRecord> steps) {
  double total = 0;
  for (const auto& s : steps) total += step_log_prob(g, table, model, s);
  return total;
}

// Analytic gradient of sum_t log pi(a_t | s_t) with respect to the projection
// and the log-temperature.
inline PolicyGradient log_prob_gradient(const TypedGraph& g, const EmbeddingTable& table,
                                        const PolicyModel& model,
                                        std::span<const StepRecord> steps) {
  auto grad = PolicyGradient::zeros(table.dim());
  const double tau = model.temperature();
  for (const auto& s : steps) {
    auto kept = action_scores(g, s.state, model, table);
    const Vector hc = table[s.state.current];
    const Vector q = model.projection * hc;
    const double qn = q.norm();
    Vector dq = Vector::Zero(q.size());
    bool found = false;
    for (const Action& a : kept) {
      const Vector hj = table[a.node];
      const Vector unit = hj / hj.norm();
      const double cos = q.dot(unit) / qn;
      const double coeff = (a.node == s.action.node ? 1.0 : 0.0) - a.probability;
      found = found || a.node == s.action.node;
      dq += coeff * tau * (unit / qn - cos * q / (qn * qn));
      grad.log_temperature += coeff * tau * cos;
    }
    if (!found) throw Error("logged action is outside the pruned action set");
    grad.projection += dq * hc.transpose();
  }
  return grad;
}

struct UpdateStats {
  double mean_reward = 0;
  double baseline_before = 0;
  std::size_t episodes = 0;
};

// theta += lr * sum_e (R_e - b) * grad log pi(trajectory_e); then the baseline
// moves toward the batch mean reward.
inline UpdateStats reinforce_update(const TypedGraph& g, const EmbeddingTable& table,
                                    PolicyModel& model, std::span<const Episode> batch,
                                    double lr) {
  if (batch.empty()) throw Error("reinforce_update needs a nonempty batch");
  UpdateStats stats{0, model.baseline, batch.size()};
  auto total = PolicyGradient::zeros(table.dim());
  for (const Episode& ep : batch) {
    stats.mean_reward += ep.reward;
    const double advantage = ep.reward - model.baseline;
    if (advantage == 0 || ep.steps.empty()) continue;
    auto grad = log_prob_gradient(g, table, model, ep.steps);
    total.projection += advantage * grad.projection;
    total.log_temperature += advantage * grad.log_temperature;
  }
  stats.mean_reward /= static_cast<double>(batch.size());
  if (!total.projection.allFinite() || !std::isfinite(total.log_temperature)) {
    throw NumericError("non-finite policy gradient (baseline " +
                       format_double(model.baseline) + ", batch size " +
                       std::to_string(batch.size()) + ")");
  }
  model.projection += lr * total.projection;
  model.log_temperature += lr * total.log_temperature;
  model.baseline = model.baseline_decay * model.baseline +
                   (1 - model.baseline_decay) * stats.mean_reward;
  return stats;
}

// A node pair to connect, optionally with a node the paths must not touch.
// For a user's own transition that node is the user: its purchase edges
// link every pair of its items, in training but not at test time.
struct PathQuery {
  NodeRef source;
  NodeRef target;
  std::optional<NodeRef> avoid;

  friend auto operator<=>(const PathQuery&, const PathQuery&) = default;
};

using NodePair = std::pair<NodeRef, NodeRef>;

inline std::vector<PathQuery> as_queries(std::span<const NodePair> pairs) {
  std::vector<PathQuery> out;
  for (const auto& [s, t] : pairs) out.push_back({s, t, std::nullopt});
  return out;
}

struct PolicyTrainOptions {
  std::size_t episodes = 2000;
  std::size_t batch_size = 16;
  double lr = 0.01;
  std::uint64_t seed = 1;
};

struct PolicyTrainLog {
  std::vector<double> batch_reward;
};

// Runs `episodes` episodes over the pairs (round-robin over a seeded shuffle),
// updating the policy after every batch.
inline PolicyTrainLog train_policy(const TypedGraph& g, const EmbeddingTable& table,
                                   PolicyModel& model, std::span<const PathQuery> pairs,
                                   const PolicyTrainOptions& opts) {
  PolicyTrainLog log;
  if (pairs.empty() || opts.episodes == 0) return log;
  if (opts.batch_size == 0) throw ConfigError("policy batch size must be >= 1");
  Rng rng(mix_seed(opts.seed, 0x706f6cULL));
  std::vector<std::size_t> order(pairs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::size_t cursor = 0, done = 0;
  while (done < opts.episodes) {
    PolicyScorer scorer(g, table, model);
    std::vector<Episode> batch;
    const auto n = std::min(opts.batch_size, opts.episodes - done);
    for (std::size_t b = 0; b < n; ++b) {
      const auto& q = pairs[order[cursor]];
      if (++cursor == order.size()) {
        cursor = 0;
        std::shuffle(order.begin(), order.end(), rng);
      }
      batch.push_back(run_episode(scorer, q.source, q.target, rng, q.avoid));
    }
    done += n;
    log.batch_reward.push_back(reinforce_update(g, table, model, batch, opts.lr).mean_reward);
  }
  return log;
}

inline PolicyTrainLog train_policy(const TypedGraph& g, const EmbeddingTable& table,
                                   PolicyModel& model, std::span<const NodePair> pairs,
                                   const PolicyTrainOptions& opts) {
  const auto queries = as_queries(pairs);
  return train_policy(g, table, model, queries, opts);
}

// ---------------------------------------------------------------------------
// Mining and ranking.

// True when the path returns to a node it already left. Staying put through a
// self-loop does not count.
inline bool has_revisit(const PathInstance& p) {
  std::set<NodeRef> seen;
  for (std::size_t t = 0; t < p.nodes.size(); ++t) {
    if (t > 0 && p.nodes[t] == p.nodes[t - 1]) continue;
    if (!seen.insert(p.nodes[t]).second) return true;
  }
  return false;
}

// Deduplicates and keeps the best q: paths without revisits first, then by
// score descending, shorter first, then lexicographic node ids.
inline std::vector<PathInstance> rank_paths(std::vector<PathInstance> paths, std::size_t q) {
  if (q < 1) throw ConfigError("top_q must be >= 1");
  auto key_less = [](const PathInstance& a, const PathInstance& b) {
    const bool ra = has_revisit(a), rb = has_revisit(b);
    if (ra != rb) return !ra;
    if (a.score != b.score) return a.score > b.score;
    if (a.nodes.size() != b.nodes.size()) return a.nodes.size() < b.nodes.size();
    if (a.nodes != b.nodes) return a.nodes < b.nodes;
    return a.relations < b.relations;
  };
  std::sort(paths.begin(), paths.end(), key_less);
  paths.erase(std::unique(paths.begin(), paths.end()), paths.end());
  if (paths.size() > q) paths.resize(q);
  return paths;
}

using PathLibrary = std::map<PathQuery, std::vector<PathInstance>>;

struct MineOptions {
  std::size_t episodes_per_pair = 50;
  std::size_t top_q = 5;
  std::uint64_t seed = 1;
  unsigned threads = 1;
};

// Samples episodes per pair with a frozen policy and keeps each pair's top q
// successful paths. Every pair gets its own seeded stream, so the result does
// not depend on thread count or pair order. Pairs that never succeed map to
// an empty list.
inline PathLibrary mine_paths(const PolicyScorer& scorer, std::span<const PathQuery> pairs,
                              const MineOptions& opts) {
  if (opts.top_q < 1) throw ConfigError("top_q must be >= 1");
  std::vector<PathQuery> unique(pairs.begin(), pairs.end());
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  std::vector<std::vector<PathInstance>> found(unique.size());
  const auto& g = scorer.graph();
  parallel_for(unique.size(), opts.threads, [&](std::size_t i) {
    const auto& q = unique[i];
    Rng rng(mix_seed(opts.seed, g.index(q.source), g.index(q.target) + 1));
    std::vector<PathInstance> paths;
    for (std::size_t e = 0; e < opts.episodes_per_pair; ++e) {
      auto ep = run_episode(scorer, q.source, q.target, rng, q.avoid);
      if (ep.path) paths.push_back(std::move(*ep.path));
    }
    found[i] = rank_paths(std::move(paths), opts.top_q);
  });
  PathLibrary lib;
  for (std::size_t i = 0; i < unique.size(); ++i) lib.emplace(unique[i], std::move(found[i]));
  return lib;
}

inline PathLibrary mine_paths(const PolicyScorer& scorer, std::span<const NodePair> pairs,
                              const MineOptions& opts) {
  const auto queries = as_queries(pairs);
  return mine_paths(scorer, queries, opts);
}

inline PathLibrary mine_paths(const TypedGraph& g, const EmbeddingTable& table,
                              const PolicyModel& model, std::span<const NodePair> pairs,
                              const MineOptions& opts) {
  return mine_paths(PolicyScorer(g, table, model), pairs, opts);
}

inline const std::vector<PathInstance>& lookup(const PathLibrary& lib, const PathQuery& q) {
  static const std::vector<PathInstance> none;
  auto it = lib.find(q);
  return it == lib.end() ? none : it->second;
}

// Paths file: `# pair u:3 -> i:17` headers (with ` avoid u:5` when set),
// then one path per line as tab-separated nodes followed by `score=<float>`.
inline void write_paths(std::ostream& os, const PathLibrary& lib) {
  for (const auto& [q, paths] : lib) {
    os << "# pair " << to_string(q.source) << " -> " << to_string(q.target);
    if (q.avoid) os << " avoid " << to_string(*q.avoid);
    os << '\n';
    for (const auto& p : paths) {
      for (NodeRef n : p.nodes) os << to_string(n) << '\t';
      os << "score=" << format_double(p.score) << '\n';
    }
  }
}

// Relations are recovered from the graph; step scores are not stored.
inline PathLibrary read_paths(std::istream& is, const TypedGraph& g) {
  PathLibrary lib;
  std::string line;
  std::size_t line_no = 0;
  std::vector<PathInstance>* current = nullptr;
  PathQuery current_pair;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto where = "paths line " + std::to_string(line_no);
    if (line.rfind("# pair ", 0) == 0) {
      auto body = std::string_view(line).substr(7);
      auto arrow = body.find(" -> ");
      if (arrow == std::string_view::npos) throw DataError(where + ": malformed pair header");
      auto rest = body.substr(arrow + 4);
      std::optional<NodeRef> avoid;
      if (auto a = rest.find(" avoid "); a != std::string_view::npos) {
        avoid = parse_node(rest.substr(a + 7));
        rest = rest.substr(0, a);
      }
      current_pair = {parse_node(body.substr(0, arrow)), parse_node(rest), avoid};
      current = &lib[current_pair];
      continue;
    }
    if (line.front() == '#') continue;
    if (!current) throw DataError(where + ": path before any pair header");
    auto f = split_view(line, '\t');
    if (f.size() < 2 || f.back().rfind("score=", 0) != 0) {
      throw DataError(where + ": expected nodes followed by score=<float>");
    }
    PathInstance p;
    for (std::size_t i = 0; i + 1 < f.size(); ++i) p.nodes.push_back(parse_node(f[i]));
    p.score = parse_double(f.back().substr(6));
    if (p.nodes.front() != current_pair.source || p.nodes.back() != current_pair.target) {
      throw DataError(where + ": path endpoints do not match the pair header");
    }
    if (current_pair.avoid &&
        std::find(p.nodes.begin(), p.nodes.end(), *current_pair.avoid) != p.nodes.end()) {
      throw DataError(where + ": path passes through the avoided node");
    }
    for (std::size_t t = 0; t + 1 < p.nodes.size(); ++t) {
      auto rel = g.relation_between(p.nodes[t], p.nodes[t + 1]);
      if (!rel) {
        throw DataError(where + ": " + to_string(p.nodes[t]) + " and " +
                        to_string(p.nodes[t + 1]) + " are not adjacent");
      }
      p.relations.push_back(*rel);
    }
    current->push_back(std::move(p));
  }
  return lib;
}

}  // namespace tmer
