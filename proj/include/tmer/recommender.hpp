#pragma once

// The full recommendation model: path contexts from self-attention, gated item
// propagation along each user's purchase chain, fusion [h_u; h1; h2], an MLP
// tower with sigmoid output, and implicit-feedback training with sampled
// negatives. Backpropagation is written out by hand through every stage,
// including the embedding table.

#include "tmer/attention.hpp"
#include "tmer/checkpoint.hpp"
#include "tmer/embedding.hpp"

#include <map>
#include <utility>

namespace tmer {

inline constexpr double kProbEpsilon = 1e-7;

struct MlpTower {
  Matrix w1;
  Vector b1;
  Matrix w2;
  Vector b2;
  Matrix w3;  // 1 x width2
  Vector b3;  // size 1

  int input_width() const { return static_cast<int>(w1.cols()); }

  // Widths (in, in/2, in/4, 1).
  static MlpTower init(int input, Rng& rng) {
    const int h1 = input / 2, h2 = input / 4;
    if (h2 < 1) throw ConfigError("MLP input width too small for a halving tower");
    MlpTower t;
    t.w1 = detail::xavier(h1, input, rng);
    t.b1 = Vector::Zero(h1);
    t.w2 = detail::xavier(h2, h1, rng);
    t.b2 = Vector::Zero(h2);
    t.w3 = detail::xavier(1, h2, rng);
    t.b3 = Vector::Zero(1);
    return t;
  }

  std::array<int, 4> widths() const {
    return {static_cast<int>(w1.cols()), static_cast<int>(w1.rows()),
            static_cast<int>(w2.rows()), static_cast<int>(w3.rows())};
  }

  MlpTower zeros_like() const {
    MlpTower z = *this;
    z.visit([](std::string_view, auto& m) { m.setZero(); });
    return z;
  }

  template <class F>
  void visit(F&& f) {
    f(std::string("w1"), w1);
    f(std::string("b1"), b1);
    f(std::string("w2"), w2);
    f(std::string("b2"), b2);
    f(std::string("w3"), w3);
    f(std::string("b3"), b3);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<MlpTower*>(this)->visit(
        [&](std::string_view name, auto& m) { f(name, std::as_const(m)); });
  }
};

struct TowerCache {
  Vector input, z1, a1, z2, a2;
  double logit = 0;
  double probability = 0.5;
};

inline TowerCache tower_forward(const Vector& fused, const MlpTower& t) {
  detail::require_dim(fused.size(), t.input_width(), "fused vector");
  TowerCache c;
  c.input = fused;
  c.z1 = t.w1 * fused + t.b1;
  c.a1 = c.z1.cwiseMax(0.0);
  c.z2 = t.w2 * c.a1 + t.b2;
  c.a2 = c.z2.cwiseMax(0.0);
  c.logit = (t.w3 * c.a2)(0) + t.b3(0);
  c.probability = 1.0 / (1.0 + std::exp(-c.logit));
  if (!std::isfinite(c.logit)) {
    throw NumericError("non-finite MLP activation (|input| = " + format_double(fused.norm()) + ")");
  }
  return c;
}

// Accumulates parameter gradients given dL/dlogit; returns dL/dinput.
inline Vector tower_backward(const TowerCache& c, double d_logit, const MlpTower& t,
                             MlpTower& g) {
  g.w3 += d_logit * c.a2.transpose();
  g.b3(0) += d_logit;
  Vector d_z2 = (d_logit * t.w3.transpose()).cwiseProduct(
      (c.z2.array() > 0).cast<double>().matrix());
  g.w2 += d_z2 * c.a1.transpose();
  g.b2 += d_z2;
  Vector d_z1 = (t.w2.transpose() * d_z2).cwiseProduct((c.z1.array() > 0).cast<double>().matrix());
  g.w1 += d_z1 * c.input.transpose();
  g.b1 += d_z1;
  return t.w1.transpose() * d_z1;
}

// [h_u; h1; h2]. For a sequence's first item the caller passes
// (h_u, user->item context, first-item update), which gives [h_u; h_phi; h_1].
inline Vector fuse(const Vector& user, const Vector& h1, const Vector& h2) {
  if (user.size() != h1.size() || h1.size() != h2.size()) {
    throw ConfigError("fuse: dimension mismatch (" + std::to_string(user.size()) + ", " +
                      std::to_string(h1.size()) + ", " + std::to_string(h2.size()) + ")");
  }
  Vector out(user.size() * 3);
  out << user, h1, h2;
  return out;
}

inline double score(const Vector& fused, const MlpTower& tower) {
  return tower_forward(fused, tower).probability;
}

inline double clip_probability(double r) {
  return std::clamp(r, kProbEpsilon, 1.0 - kProbEpsilon);
}

// -log r_pos - mean_j log(1 - r_neg_j). Without the positive term this is the
// negative-only objective.
inline double loss(double r_pos, std::span<const double> r_negs, bool positive_term = true) {
  if (r_negs.empty()) throw DataError("loss needs at least one negative sample");
  double neg = 0;
  for (double r : r_negs) neg -= std::log(1 - clip_probability(r));
  neg /= static_cast<double>(r_negs.size());
  return (positive_term ? -std::log(clip_probability(r_pos)) : 0.0) + neg;
}

// ---------------------------------------------------------------------------

using PathSet = std::vector<std::vector<NodeRef>>;

struct ModelOptions {
  int heads = 4;
  bool use_user_item_paths = true;
  bool use_item_item_paths = true;
  PrevItemSource prev_source = PrevItemSource::Updated;
};

struct TmerModel {
  EmbeddingTable table;
  SelfAttentionBlock user_item_attention;
  SelfAttentionBlock item_item_attention;
  ItemUpdateBlock item_update;
  MlpTower tower;
  ModelOptions options;

  int dim() const { return table.dim(); }

  static TmerModel init(EmbeddingTable table, const ModelOptions& options, Rng& rng) {
    TmerModel m;
    const int d = table.dim();
    m.user_item_attention = SelfAttentionBlock::init(d, options.heads, rng);
    m.item_item_attention = SelfAttentionBlock::init(d, options.heads, rng);
    m.item_update = ItemUpdateBlock::init(d, rng);
    m.tower = MlpTower::init(3 * d, rng);
    m.table = std::move(table);
    m.options = options;
    return m;
  }

  // Visits every dense parameter except the embedding table.
  template <class F>
  void visit(F&& f) {
    user_item_attention.visit([&](std::string_view n, auto& m) { f("ui." + std::string(n), m); });
    item_item_attention.visit([&](std::string_view n, auto& m) { f("ii." + std::string(n), m); });
    item_update.visit([&](std::string_view n, auto& m) { f("item." + std::string(n), m); });
    tower.visit([&](std::string_view n, auto& m) { f("mlp." + std::string(n), m); });
  }

  void write(std::ostream& os) const {
    checkpoint::Writer w(os);
    w.put("heads", static_cast<double>(options.heads));
    w.put("use_user_item_paths", options.use_user_item_paths ? 1.0 : 0.0);
    w.put("use_item_item_paths", options.use_item_item_paths ? 1.0 : 0.0);
    w.put("prev_source_raw", options.prev_source == PrevItemSource::Raw ? 1.0 : 0.0);
    Eigen::Matrix<double, 4, 1> counts;
    for (NodeKind k : kAllKinds) counts(static_cast<int>(k)) = table.counts()[k];
    w.put("node_counts", counts);
    w.put("embedding", table.matrix());
    const_cast<TmerModel*>(this)->visit([&](const std::string& n, auto& m) { w.put(n, m); });
  }

  static TmerModel read(std::istream& is) {
    checkpoint::Reader r(is);
    ModelOptions opts;
    opts.heads = static_cast<int>(r.scalar("heads"));
    opts.use_user_item_paths = r.scalar("use_user_item_paths") != 0;
    opts.use_item_item_paths = r.scalar("use_item_item_paths") != 0;
    opts.prev_source = r.scalar("prev_source_raw") != 0 ? PrevItemSource::Raw
                                                        : PrevItemSource::Updated;
    Matrix counts_m = r.matrix("node_counts", 4, 1);
    NodeCounts counts;
    for (NodeKind k : kAllKinds) {
      counts[k] = static_cast<std::uint32_t>(counts_m(static_cast<int>(k), 0));
    }
    const Matrix& emb = r.matrix("embedding");
    EmbeddingTable table(counts, static_cast<int>(emb.rows()));
    table.matrix() = r.matrix("embedding", emb.rows(), static_cast<Eigen::Index>(counts.total()));
    Rng rng(0);
    TmerModel m = init(std::move(table), opts, rng);
    m.visit([&](const std::string& n, auto& param) {
      param = r.matrix(n, param.rows(), param.cols());
    });
    return m;
  }
};

// Gradient accumulator mirroring TmerModel; embedding gradients are sparse.
struct ModelGrad {
  SelfAttentionBlock user_item_attention;
  SelfAttentionBlock item_item_attention;
  ItemUpdateBlock item_update;
  MlpTower tower;
  std::map<std::size_t, Vector> embedding;  // global node index -> gradient

  static ModelGrad zeros(const TmerModel& m) {
    return {m.user_item_attention.zeros_like(), m.item_item_attention.zeros_like(),
            m.item_update.zeros_like(), m.tower.zeros_like(), {}};
  }

  template <class F>
  void visit(F&& f) {
    user_item_attention.visit([&](std::string_view n, auto& m) { f("ui." + std::string(n), m); });
    item_item_attention.visit([&](std::string_view n, auto& m) { f("ii." + std::string(n), m); });
    item_update.visit([&](std::string_view n, auto& m) { f("item." + std::string(n), m); });
    tower.visit([&](std::string_view n, auto& m) { f("mlp." + std::string(n), m); });
  }

  void add_embedding(const EmbeddingTable& table, NodeRef n, const Vector& g) {
    auto [it, inserted] = embedding.try_emplace(table.checked_index(n), g);
    if (!inserted) it->second += g;
  }
};

// ---------------------------------------------------------------------------
// Training and scoring inputs.

struct Candidate {
  NodeRef item;
  PathSet paths;  // from the predecessor to this item
};

struct TrainTarget {
  std::size_t position = 0;              // index into UserExample::chain
  std::vector<Candidate> negative_pool;  // negatives for this target
};

struct UserExample {
  NodeRef user;
  std::vector<NodeRef> chain;        // bridge + train items in order
  std::vector<PathSet> chain_paths;  // [0]: user -> chain[0]; [k]: chain[k-1] -> chain[k]
  std::vector<TrainTarget> targets;
};

struct ContextForward {
  bool active = false;  // false: zero context (no paths, or the module is disabled)
  std::vector<std::vector<NodeRef>> paths;
  PathAttentionResult attention;
  Vector context;
};

inline Matrix path_matrix(const PathSet& paths, const EmbeddingTable& table) {
  Matrix x(table.dim(), static_cast<Eigen::Index>(paths.size()));
  for (std::size_t p = 0; p < paths.size(); ++p) {
    x.col(static_cast<Eigen::Index>(p)) = embed_path(paths[p], table);
  }
  return x;
}

inline ContextForward forward_context(const PathSet& paths, const SelfAttentionBlock& block,
                                      const EmbeddingTable& table, bool enabled) {
  ContextForward c;
  if (!enabled || paths.empty()) {
    c.context = Vector::Zero(table.dim());
    return c;
  }
  c.active = true;
  c.paths = paths;
  c.attention = path_set_attention(path_matrix(paths, table), block);
  c.context = c.attention.context;
  return c;
}

inline void backward_context(const ContextForward& c, const Vector& d_context,
                             const SelfAttentionBlock& block, SelfAttentionBlock& grad,
                             const EmbeddingTable& table, ModelGrad* emb_grad) {
  if (!c.active) return;
  Matrix d_paths = backward_path_set_attention(c.attention.cache, d_context, block, grad);
  if (!emb_grad) return;
  for (std::size_t p = 0; p < c.paths.size(); ++p) {
    const auto& nodes = c.paths[p];
    Vector share = d_paths.col(static_cast<Eigen::Index>(p)) / static_cast<double>(nodes.size());
    for (NodeRef n : nodes) emb_grad->add_embedding(table, n, share);
  }
}

// Forward state of one user's purchase chain.
struct UserForward {
  std::vector<ContextForward> contexts;  // parallel to chain_paths
  SequenceForward sequence;
};

inline UserForward forward_user(const TmerModel& m, const UserExample& ex) {
  if (ex.chain.empty()) throw DataError("user " + to_string(ex.user) + " has an empty chain");
  if (ex.chain_paths.size() != ex.chain.size()) {
    throw DataError("user " + to_string(ex.user) + ": need one path set per chain position");
  }
  UserForward f;
  f.contexts.push_back(forward_context(ex.chain_paths[0], m.user_item_attention, m.table,
                                       m.options.use_user_item_paths));
  for (std::size_t k = 1; k < ex.chain.size(); ++k) {
    f.contexts.push_back(forward_context(ex.chain_paths[k], m.item_item_attention, m.table,
                                         m.options.use_item_item_paths));
  }
  std::vector<Vector> items, transitions;
  for (NodeRef n : ex.chain) items.push_back(m.table[n]);
  for (std::size_t k = 1; k < f.contexts.size(); ++k) transitions.push_back(f.contexts[k].context);
  f.sequence = propagate_sequence(items, f.contexts[0].context, transitions, m.item_update,
                                  m.options.prev_source);
  return f;
}

struct CandidateForward {
  ContextForward context;
  ItemUpdate update;
  TowerCache tower;
};

// Scores `item` as the successor of chain position `after`.
inline CandidateForward forward_candidate(const TmerModel& m, const UserForward& uf,
                                          NodeRef user, std::size_t after, NodeRef item,
                                          const PathSet& paths) {
  CandidateForward c;
  c.context = forward_context(paths, m.item_item_attention, m.table, m.options.use_item_item_paths);
  c.update = update_item(uf.sequence.carried(after), m.table[item], c.context.context,
                         m.item_update);
  c.tower = tower_forward(fuse(m.table[user], c.update.h1, c.update.h2), m.tower);
  return c;
}

// Scores candidate successors of a user's last chain item.
class CandidateScorer {
 public:
  CandidateScorer(const TmerModel& m, UserExample ex)
      : model_(&m), example_(std::move(ex)), forward_(forward_user(m, example_)) {}

  double operator()(NodeRef item, const PathSet& paths) const {
    return forward_candidate(*model_, forward_, example_.user, example_.chain.size() - 1, item,
                             paths)
        .tower.probability;
  }

 private:
  const TmerModel* model_;
  UserExample example_;
  UserForward forward_;
};

// Negatives per target chosen for one step; indices into negative_pool.
using NegativeChoice = std::vector<std::vector<std::size_t>>;

namespace detail {

inline double d_neg_log_prob(double r) {  // d/dlogit of -log(clip(r))
  return (r > kProbEpsilon && r < 1 - kProbEpsilon) ? -(1 - r) : 0.0;
}
inline double d_neg_log_one_minus(double r) {  // d/dlogit of -log(1 - clip(r))
  return (r > kProbEpsilon && r < 1 - kProbEpsilon) ? r : 0.0;
}

}  // namespace detail

// Summed loss over the user's targets; accumulates gradients when `grad` is set.
inline double user_loss(const TmerModel& m, const UserExample& ex, const NegativeChoice& negs,
                        bool positive_term, ModelGrad* grad) {
  if (negs.size() != ex.targets.size()) throw ConfigError("one negative choice per target");
  UserForward uf = forward_user(m, ex);
  const auto n = ex.chain.size();
  const auto d = m.dim();
  std::vector<Vector> d_h1(n, Vector::Zero(d)), d_h2(n, Vector::Zero(d)),
      d_carried(n, Vector::Zero(d));
  Vector d_user = Vector::Zero(d);
  double total = 0;

  for (std::size_t t = 0; t < ex.targets.size(); ++t) {
    const auto& target = ex.targets[t];
    const auto k = target.position;
    if (k == 0 || k >= n) throw DataError("target position must follow a chain item");
    if (negs[t].empty()) throw DataError("loss needs at least one negative sample");

    const Vector fused = fuse(m.table[ex.user], uf.sequence.states[k].h1,
                              uf.sequence.states[k].h2);
    const TowerCache pos = tower_forward(fused, m.tower);
    std::vector<CandidateForward> neg_fw;
    std::vector<double> r_negs;
    for (std::size_t j : negs[t]) {
      const auto& cand = target.negative_pool.at(j);
      neg_fw.push_back(forward_candidate(m, uf, ex.user, k - 1, cand.item, cand.paths));
      r_negs.push_back(neg_fw.back().tower.probability);
    }
    total += loss(pos.probability, r_negs, positive_term);
    if (!grad) continue;

    if (positive_term) {
      Vector dx = tower_backward(pos, detail::d_neg_log_prob(pos.probability), m.tower,
                                 grad->tower);
      d_user += dx.head(d);
      d_h1[k] += dx.segment(d, d);
      d_h2[k] += dx.tail(d);
    }
    const double inv = 1.0 / static_cast<double>(negs[t].size());
    for (std::size_t q = 0; q < neg_fw.size(); ++q) {
      const auto& cf = neg_fw[q];
      const auto& cand = target.negative_pool[negs[t][q]];
      Vector dx = tower_backward(cf.tower, inv * detail::d_neg_log_one_minus(cf.tower.probability),
                                 m.tower, grad->tower);
      d_user += dx.head(d);
      auto du = backward_update_item(cf.update, dx.segment(d, d), dx.tail(d), m.item_update,
                                     grad->item_update);
      d_carried[k - 1] += du.d_prev;
      grad->add_embedding(m.table, cand.item, du.d_cur);
      backward_context(cf.context, du.d_context, m.item_item_attention,
                       grad->item_item_attention, m.table, grad);
    }
  }
  if (!grad) return total;

  auto sg = backprop_sequence(uf.sequence, d_h1, d_h2, d_carried, m.item_update,
                              grad->item_update);
  grad->add_embedding(m.table, ex.user, d_user);
  for (std::size_t k = 0; k < n; ++k) grad->add_embedding(m.table, ex.chain[k], sg.d_items[k]);
  backward_context(uf.contexts[0], sg.d_user_context, m.user_item_attention,
                   grad->user_item_attention, m.table, grad);
  for (std::size_t k = 1; k < n; ++k) {
    backward_context(uf.contexts[k], sg.d_transition_contexts[k - 1], m.item_item_attention,
                     grad->item_item_attention, m.table, grad);
  }
  return total;
}

// ---------------------------------------------------------------------------

enum class Optimizer { Sgd, Adam };

struct TrainConfig {
  Optimizer optimizer = Optimizer::Sgd;
  double lr = 1e-4;
  std::size_t epochs = 30;
  std::size_t negatives_per_positive = 4;
  std::uint64_t seed = 1;
  bool fine_tune_embeddings = true;
  bool positive_term = true;

  void validate() const {
    if (!(lr >= 0)) throw ConfigError("learning rate must be non-negative");
    if (epochs < 1) throw ConfigError("epochs must be >= 1");
    if (negatives_per_positive < 1) throw ConfigError("negatives_per_positive must be >= 1");
  }
};

struct TrainLog {
  std::vector<double> epoch_loss;  // mean loss per training target
};

inline void apply_sgd(TmerModel& m, ModelGrad& g, double lr, bool fine_tune) {
  std::vector<double*> params;
  std::vector<Eigen::Index> sizes;
  m.visit([&](const std::string&, auto& p) {
    params.push_back(p.data());
    sizes.push_back(p.size());
  });
  std::size_t i = 0;
  g.visit([&](const std::string&, auto& p) {
    Eigen::Map<Vector>(params[i], sizes[i]) -= lr * Eigen::Map<const Vector>(p.data(), p.size());
    ++i;
  });
  if (fine_tune) {
    for (auto& [idx, v] : g.embedding) {
      m.table.matrix().col(static_cast<Eigen::Index>(idx)) -= lr * v;
    }
  }
}

inline NegativeChoice sample_negatives(const UserExample& ex, std::size_t per_positive, Rng& rng) {
  NegativeChoice choice;
  for (const auto& t : ex.targets) {
    std::vector<std::size_t> idx(t.negative_pool.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    if (idx.size() > per_positive) idx.resize(per_positive);
    std::sort(idx.begin(), idx.end());
    choice.push_back(std::move(idx));
  }
  return choice;
}

// Adam with lazily updated moments for embedding columns (only columns that
// received a gradient move).
struct AdamState {
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::size_t t = 0;
  std::vector<Vector> m, v;
  Matrix emb_m, emb_v;
  std::vector<std::size_t> emb_t;

  void step(TmerModel& model, ModelGrad& g, double lr, bool fine_tune) {
    ++t;
    std::vector<std::pair<double*, Eigen::Index>> params;
    model.visit([&](const std::string&, auto& p) { params.emplace_back(p.data(), p.size()); });
    if (m.empty()) {
      for (auto& [ptr, n] : params) {
        m.push_back(Vector::Zero(n));
        v.push_back(Vector::Zero(n));
      }
    }
    const double c1 = 1 - std::pow(beta1, static_cast<double>(t));
    const double c2 = 1 - std::pow(beta2, static_cast<double>(t));
    std::size_t i = 0;
    g.visit([&](const std::string&, auto& gp) {
      Eigen::Map<const Vector> grad(gp.data(), gp.size());
      m[i] = beta1 * m[i] + (1 - beta1) * grad;
      v[i] = beta2 * v[i] + (1 - beta2) * grad.cwiseProduct(grad);
      Eigen::Map<Vector>(params[i].first, params[i].second) -=
          (lr * (m[i] / c1).array() / ((v[i] / c2).array().sqrt() + eps)).matrix();
      ++i;
    });
    if (!fine_tune) return;
    auto& table = model.table.matrix();
    if (emb_m.size() == 0) {
      emb_m = Matrix::Zero(table.rows(), table.cols());
      emb_v = Matrix::Zero(table.rows(), table.cols());
      emb_t.assign(static_cast<std::size_t>(table.cols()), 0);
    }
    for (auto& [idx, grad] : g.embedding) {
      const auto c = static_cast<Eigen::Index>(idx);
      const double k = static_cast<double>(++emb_t[idx]);
      emb_m.col(c) = beta1 * emb_m.col(c) + (1 - beta1) * grad;
      emb_v.col(c) = beta2 * emb_v.col(c) + (1 - beta2) * grad.cwiseProduct(grad);
      const Vector mh = emb_m.col(c) / (1 - std::pow(beta1, k));
      const Vector vh = emb_v.col(c) / (1 - std::pow(beta2, k));
      table.col(c) -= (lr * mh.array() / (vh.array().sqrt() + eps)).matrix();
    }
  }
};

// One optimizer step per user, users in a seeded shuffled order each epoch.
// On a non-finite epoch loss the model is restored to the last good epoch
// and NumericError is thrown.
inline TrainLog train(TmerModel& m, std::span<const UserExample> data, const TrainConfig& cfg) {
  cfg.validate();
  TrainLog log;
  AdamState adam;
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    Rng rng(mix_seed(cfg.seed, 0x747261696eULL, epoch));
    std::shuffle(order.begin(), order.end(), rng);
    TmerModel last_good = m;
    double total = 0;
    std::size_t targets = 0;
    auto diverged = [&](const std::string& why) {
      m = std::move(last_good);
      return NumericError("training diverged at epoch " + std::to_string(epoch + 1) + " (" +
                          why + "); model restored to the previous epoch");
    };
    try {
      for (std::size_t u : order) {
        const auto& ex = data[u];
        if (ex.targets.empty()) continue;
        auto negs = sample_negatives(ex, cfg.negatives_per_positive, rng);
        auto grad = ModelGrad::zeros(m);
        total += user_loss(m, ex, negs, cfg.positive_term, &grad);
        targets += ex.targets.size();
        if (cfg.optimizer == Optimizer::Adam) {
          adam.step(m, grad, cfg.lr, cfg.fine_tune_embeddings);
        } else {
          apply_sgd(m, grad, cfg.lr, cfg.fine_tune_embeddings);
        }
      }
    } catch (const NumericError& e) {
      throw diverged(e.what());
    }
    const double mean = targets ? total / static_cast<double>(targets) : 0.0;
    if (!std::isfinite(mean) || !m.table.matrix().allFinite()) throw diverged("non-finite loss");
    log.epoch_loss.push_back(mean);
  }
  return log;
}

}  // namespace tmer
