#pragma once

// Sampled-negative ranking evaluation: each test positive is ranked against
// N items the user never interacted with; HR@K and NDCG@K are averaged over
// instances.

#include "tmer/hin.hpp"

#include <cmath>
#include <set>
#include <span>

namespace tmer {

struct EvalConfig {
  std::size_t n_negatives = 500;
  std::vector<std::size_t> ks = {1, 5, 10, 20};
  bool corrected = false;
  std::uint64_t seed = 1;

  void validate() const {
    if (ks.empty()) throw ConfigError("at least one cutoff K is required");
    if (!std::is_sorted(ks.begin(), ks.end()) || ks.front() < 1) {
      throw ConfigError("cutoffs must be ascending and >= 1");
    }
    if (n_negatives < ks.back()) throw ConfigError("n_negatives must be >= max(K)");
  }
};

// 1-based rank of the positive; negatives scoring equal to the positive are
// placed ahead of it.
inline std::size_t rank_of(double positive_score, std::span<const double> negative_scores) {
  std::size_t rank = 1;
  for (double s : negative_scores) rank += s >= positive_score ? 1 : 0;
  return rank;
}

inline double hr_at_k(double rank, std::size_t k) {
  if (rank < 1) throw ConfigError("rank must be >= 1");
  return rank <= static_cast<double>(k) ? 1.0 : 0.0;
}

inline double ndcg_at_k(double rank, std::size_t k) {
  if (rank < 1) throw ConfigError("rank must be >= 1");
  return rank <= static_cast<double>(k) ? 1.0 / std::log2(rank + 1.0) : 0.0;
}

// Scales a rank among n sampled negatives to an estimated rank among the
// M - 1 non-positive items of the full universe.
inline double corrected_rank(std::size_t sampled_rank, std::size_t n_negatives,
                             std::size_t universe) {
  if (n_negatives == 0 || universe < 2) return static_cast<double>(sampled_rank);
  return 1.0 + static_cast<double>(sampled_rank - 1) * static_cast<double>(universe - 1) /
                   static_cast<double>(n_negatives);
}

struct EvalInstance {
  NodeRef user;
  NodeRef positive;
  std::vector<NodeRef> negatives;
  bool cold = false;  // positive item had no purchase edge in the training graph
};

struct InstanceResult {
  NodeRef user;
  NodeRef positive;
  std::size_t rank = 0;  // 0 when skipped
  bool cold = false;
  bool skipped = false;
};

struct EvalReport {
  std::vector<std::size_t> ks;
  std::vector<double> hr, ndcg;  // parallel to ks
  std::size_t instances = 0;     // scored instances
  std::size_t skipped = 0;
  std::size_t cold = 0;
  bool corrected = false;
  std::vector<InstanceResult> details;

  double hr_at(std::size_t k) const { return hr.at(index_of(k)); }
  double ndcg_at(std::size_t k) const { return ndcg.at(index_of(k)); }

 private:
  std::size_t index_of(std::size_t k) const {
    auto it = std::find(ks.begin(), ks.end(), k);
    if (it == ks.end()) throw ConfigError("K=" + std::to_string(k) + " not in report");
    return static_cast<std::size_t>(it - ks.begin());
  }
};

// Average metrics over fixed ranks.
inline EvalReport summarize(std::vector<InstanceResult> results, const EvalConfig& cfg,
                            std::size_t universe) {
  cfg.validate();
  EvalReport r;
  r.ks = cfg.ks;
  r.corrected = cfg.corrected;
  r.hr.assign(cfg.ks.size(), 0.0);
  r.ndcg.assign(cfg.ks.size(), 0.0);
  for (const auto& res : results) {
    r.cold += res.cold;
    if (res.skipped) {
      ++r.skipped;
      continue;
    }
    ++r.instances;
    const double rank = cfg.corrected ? corrected_rank(res.rank, cfg.n_negatives, universe)
                                      : static_cast<double>(res.rank);
    for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
      r.hr[i] += hr_at_k(rank, cfg.ks[i]);
      r.ndcg[i] += ndcg_at_k(rank, cfg.ks[i]);
    }
  }
  if (r.instances > 0) {
    for (std::size_t i = 0; i < cfg.ks.size(); ++i) {
      r.hr[i] /= static_cast<double>(r.instances);
      r.ndcg[i] /= static_cast<double>(r.instances);
    }
  }
  r.details = std::move(results);
  return r;
}

// One instance per test item; negatives drawn uniformly without replacement
// from items the user never interacted with. Deterministic given the seed.
inline std::vector<EvalInstance> sample_eval_instances(const Dataset& data,
                                                       const TypedGraph& train_graph,
                                                       const SplitConfig& split_cfg,
                                                       const EvalConfig& cfg) {
  cfg.validate();
  const auto n_items = data.counts[NodeKind::Item];
  std::vector<EvalInstance> out;
  bool warned = false;
  for (const auto& seq : data.sequences) {
    if (seq.items.size() < std::max(split_cfg.min_items, split_cfg.bridge + split_cfg.train + 1)) {
      continue;
    }
    auto parts = split(seq, split_cfg);
    std::set<std::uint32_t> known;
    for (NodeRef i : seq.items) known.insert(i.local_id);
    std::vector<NodeRef> pool;
    for (std::uint32_t i = 0; i < n_items; ++i) {
      if (!known.count(i)) pool.push_back({NodeKind::Item, i});
    }
    if (pool.size() < cfg.n_negatives && !warned) {
      diag::warn("only " + std::to_string(pool.size()) + " non-interacted items for user " +
                 to_string(seq.user) + "; sampling all of them");
      warned = true;
    }
    for (std::size_t t = 0; t < parts.test.size(); ++t) {
      Rng rng(mix_seed(cfg.seed, seq.user.local_id, t + 1));
      EvalInstance inst{seq.user, parts.test[t], {}, false};
      std::vector<NodeRef> shuffled = pool;
      const auto take = std::min(cfg.n_negatives, shuffled.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(shuffled[i], shuffled[i + uniform_index(rng, shuffled.size() - i)]);
      }
      inst.negatives.assign(shuffled.begin(), shuffled.begin() + static_cast<std::ptrdiff_t>(take));
      inst.cold = std::none_of(train_graph.neighbors(inst.positive).begin(),
                               train_graph.neighbors(inst.positive).end(),
                               [](const Neighbor& n) { return n.relation == Relation::BuyInverse; });
      out.push_back(std::move(inst));
    }
  }
  return out;
}

// Scores items for one user; an empty result marks the user as unscorable.
using BatchScorer = std::function<std::vector<double>(NodeRef user, std::span<const NodeRef> items)>;

inline EvalReport evaluate(std::span<const EvalInstance> instances, const BatchScorer& scorer,
                           const EvalConfig& cfg, std::size_t universe) {
  if (instances.empty()) throw DataError("no test instances to evaluate");
  std::vector<InstanceResult> results;
  results.reserve(instances.size());
  for (const auto& inst : instances) {
    std::vector<NodeRef> items{inst.positive};
    items.insert(items.end(), inst.negatives.begin(), inst.negatives.end());
    auto scores = scorer(inst.user, items);
    InstanceResult res{inst.user, inst.positive, 0, inst.cold, false};
    if (scores.size() != items.size() ||
        std::any_of(scores.begin(), scores.end(), [](double s) { return !std::isfinite(s); })) {
      res.skipped = true;
    } else {
      res.rank = rank_of(scores[0], std::span<const double>(scores).subspan(1));
    }
    results.push_back(res);
  }
  return summarize(std::move(results), cfg, universe);
}

// Purchase counts in the training graph, with a seeded sub-unit jitter so that
// equal counts are ordered randomly rather than pessimistically.
inline std::vector<double> popularity_scores(const TypedGraph& train_graph, std::uint64_t seed) {
  const auto n = train_graph.counts()[NodeKind::Item];
  std::vector<double> s(n, 0.0);
  Rng rng(mix_seed(seed, 0x706f70ULL));
  for (std::uint32_t i = 0; i < n; ++i) {
    for (const Neighbor& nb : train_graph.neighbors({NodeKind::Item, i})) {
      s[i] += nb.relation == Relation::BuyInverse ? 1.0 : 0.0;
    }
    s[i] += 0.5 * uniform01(rng);
  }
  return s;
}

// Text table, one row per metric and one column per model.
inline std::string render_report_table(
    std::span<const std::pair<std::string, EvalReport>> columns) {
  if (columns.empty()) return {};
  std::string out = "Metric  ";
  for (const auto& [name, rep] : columns) {
    std::string cell = name;
    cell.resize(std::max<std::size_t>(cell.size(), 10), ' ');
    out += "  " + cell;
  }
  out += '\n';
  const auto& ks = columns.front().second.ks;
  auto row = [&](const std::string& label, auto&& get) {
    std::string line = label;
    line.resize(8, ' ');
    for (const auto& [name, rep] : columns) {
      std::string cell = format_fixed(get(rep), 4);
      cell.resize(std::max<std::size_t>(name.size(), 10), ' ');
      line += "  " + cell;
    }
    out += line + '\n';
  };
  for (std::size_t i = 0; i < ks.size(); ++i) {
    row("HR@" + std::to_string(ks[i]), [&](const EvalReport& r) { return r.hr[i]; });
  }
  for (std::size_t i = 0; i < ks.size(); ++i) {
    row("NDCG@" + std::to_string(ks[i]), [&](const EvalReport& r) { return r.ndcg[i]; });
  }
  for (const auto& [name, rep] : columns) {
    out += name + ": " + std::to_string(rep.instances) + " instances, " +
           std::to_string(rep.skipped) + " skipped, " + std::to_string(rep.cold) +
           " with cold positives" + (rep.corrected ? ", corrected ranks" : "") + '\n';
  }
  return out;
}

// Per-instance ranks, tab separated.
inline void write_ranks(std::ostream& os, const EvalReport& r) {
  os << "user\tpositive\trank\tcold\tskipped\n";
  for (const auto& d : r.details) {
    os << to_string(d.user) << '\t' << to_string(d.positive) << '\t' << d.rank << '\t'
       << d.cold << '\t' << d.skipped << '\n';
  }
}

}  // namespace tmer
