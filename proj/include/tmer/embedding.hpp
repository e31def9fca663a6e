#pragma once

// Node embeddings: truncated random walks on the user-item bipartite
// subgraph, skip-gram with negative sampling over any corpus of node
// sentences, and mean-pooled path embeddings.

#include "tmer/hin.hpp"

#include <cmath>
#include <span>

namespace tmer {

class EmbeddingTable {
 public:
  EmbeddingTable() = default;
  EmbeddingTable(NodeCounts counts, int dim)
      : counts_(counts), vectors_(Matrix::Zero(dim, static_cast<Eigen::Index>(counts.total()))) {
    if (dim <= 0) throw ConfigError("embedding dim must be positive");
  }

  // Classic skip-gram init: each component uniform in [-0.5/dim, 0.5/dim].
  static EmbeddingTable random(NodeCounts counts, int dim, Rng& rng) {
    EmbeddingTable t(counts, dim);
    for (Eigen::Index j = 0; j < t.vectors_.cols(); ++j) {
      for (Eigen::Index d = 0; d < dim; ++d) t.vectors_(d, j) = (uniform01(rng) - 0.5) / dim;
    }
    return t;
  }

  int dim() const { return static_cast<int>(vectors_.rows()); }
  std::size_t size() const { return static_cast<std::size_t>(vectors_.cols()); }
  const NodeCounts& counts() const { return counts_; }
  bool contains(NodeRef n) const { return counts_.contains(n); }

  auto operator[](NodeRef n) const { return vectors_.col(checked_index(n)); }
  auto operator[](NodeRef n) { return vectors_.col(checked_index(n)); }

  // Columns are nodes in global index order.
  const Matrix& matrix() const { return vectors_; }
  Matrix& matrix() { return vectors_; }

  std::size_t checked_index(NodeRef n) const {
    if (!counts_.contains(n)) throw DataError("no embedding for node " + to_string(n));
    return counts_.index(n);
  }

  Vector norms() const { return vectors_.colwise().norm().transpose(); }

  void write(std::ostream& os) const {
    os << size() << ' ' << dim() << '\n';
    for (std::size_t j = 0; j < size(); ++j) {
      os << to_string(counts_.node_at(j));
      for (int d = 0; d < dim(); ++d) os << ' ' << format_fixed(vectors_(d, j), 6);
      os << '\n';
    }
  }

  static EmbeddingTable parse(std::istream& is) {
    std::size_t count = 0;
    int dim = 0;
    if (!(is >> count >> dim) || dim <= 0) throw DataError("embedding file: bad header");
    std::vector<std::pair<NodeRef, Vector>> rows;
    rows.reserve(count);
    NodeCounts counts;
    for (std::size_t r = 0; r < count; ++r) {
      std::string token;
      if (!(is >> token)) throw DataError("embedding file: truncated at row " + std::to_string(r));
      NodeRef n = parse_node(token);
      Vector v(dim);
      for (int d = 0; d < dim; ++d) {
        if (!(is >> v(d))) throw DataError("embedding file: short vector for " + token);
      }
      counts[n.kind] = std::max(counts[n.kind], n.local_id + 1);
      rows.emplace_back(n, std::move(v));
    }
    if (counts.total() != count) throw DataError("embedding file: node ids are not dense");
    EmbeddingTable t(counts, dim);
    for (auto& [n, v] : rows) t[n] = v;
    return t;
  }

 private:
  NodeCounts counts_;
  Matrix vectors_;
};

// ---------------------------------------------------------------------------

struct WalkOptions {
  std::size_t walks_per_node = 20;
  std::size_t walk_length = 10;
  std::uint64_t seed = 1;
};

struct WalkCorpus {
  std::vector<std::vector<NodeRef>> walks;
  std::size_t walk_length = 0;
  std::size_t walks_per_node = 0;
  std::uint64_t seed = 0;
};

inline bool is_user_item_relation(Relation r) {
  return r == Relation::Buy || r == Relation::BuyInverse;
}

// DeepWalk corpus over users and items, stepping only along purchase edges.
inline WalkCorpus generate_walks(const TypedGraph& g, const WalkOptions& opts = {}) {
  if (g.node_count() == 0) throw DataError("cannot generate walks on an empty graph");
  if (opts.walk_length < 2) throw ConfigError("walk_length must be >= 2");

  std::vector<NodeRef> starts;
  for (NodeKind k : {NodeKind::User, NodeKind::Item}) {
    for (std::uint32_t i = 0; i < g.counts()[k]; ++i) starts.push_back({k, i});
  }
  std::vector<std::vector<NodeRef>> bipartite(g.node_count());
  std::size_t isolated = 0;
  for (NodeRef s : starts) {
    auto& nb = bipartite[g.index(s)];
    for (const Neighbor& n : g.neighbors(s)) {
      if (is_user_item_relation(n.relation)) nb.push_back(n.node);
    }
    isolated += nb.empty();
  }
  if (isolated > 0) {
    diag::warn(std::to_string(isolated) +
               " user/item nodes have no purchase edge; their walks have length 1");
  }

  WalkCorpus corpus{{}, opts.walk_length, opts.walks_per_node, opts.seed};
  corpus.walks.reserve(starts.size() * opts.walks_per_node);
  Rng order_rng(mix_seed(opts.seed, 0x77616c6bULL));
  std::vector<NodeRef> order = starts;
  for (std::size_t round = 0; round < opts.walks_per_node; ++round) {
    std::shuffle(order.begin(), order.end(), order_rng);
    for (NodeRef s : order) {
      Rng rng(mix_seed(opts.seed, g.index(s), round + 1));
      std::vector<NodeRef> walk{s};
      while (walk.size() < opts.walk_length) {
        const auto& nb = bipartite[g.index(walk.back())];
        if (nb.empty()) break;
        walk.push_back(nb[uniform_index(rng, nb.size())]);
      }
      corpus.walks.push_back(std::move(walk));
    }
  }
  return corpus;
}

// ---------------------------------------------------------------------------

struct SkipGramOptions {
  int dim = 100;
  std::size_t window = 5;
  std::size_t negatives = 5;
  std::size_t epochs = 5;
  double lr = 0.025;
  std::uint64_t seed = 1;
};

struct SkipGramResult {
  EmbeddingTable table;
  std::vector<double> epoch_loss;  // mean loss per (center, context) pair
};

namespace detail {

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// -log(sigmoid(x)) without overflow.
inline double neg_log_sigmoid(double x) {
  return x >= 0 ? std::log1p(std::exp(-x)) : -x + std::log1p(std::exp(x));
}

}  // namespace detail

// Skip-gram with negative sampling. Negatives come from the unigram
// distribution raised to 0.75. Learning rate decays linearly over all pairs.
// When `init` is supplied its vectors seed the input embeddings (fine-tuning);
// the returned table holds input vectors only.
inline SkipGramResult train_skipgram(NodeCounts counts,
                                     std::span<const std::vector<NodeRef>> corpus,
                                     const SkipGramOptions& opts,
                                     const EmbeddingTable* init = nullptr) {
  if (opts.dim <= 0) throw ConfigError("skip-gram dim must be positive");
  if (opts.lr <= 0) throw ConfigError("skip-gram learning rate must be positive");
  if (opts.window < 1) throw ConfigError("skip-gram window must be >= 1");
  if (corpus.empty()) throw DataError("skip-gram corpus is empty");

  Rng rng(opts.seed);
  SkipGramResult result;
  if (init) {
    if (init->dim() != opts.dim || !(init->counts() == counts)) {
      throw ConfigError("fine-tuning table does not match requested shape");
    }
    result.table = *init;
  } else {
    result.table = EmbeddingTable::random(counts, opts.dim, rng);
  }
  Matrix& in = result.table.matrix();
  Matrix out = Matrix::Zero(opts.dim, in.cols());

  std::vector<double> freq(counts.total(), 0.0);
  std::size_t total_pairs = 0;
  for (const auto& sentence : corpus) {
    for (NodeRef n : sentence) freq[result.table.checked_index(n)] += 1.0;
    const auto len = sentence.size();
    for (std::size_t c = 0; c < len; ++c) {
      auto lo = c >= opts.window ? c - opts.window : 0;
      auto hi = std::min(len - 1, c + opts.window);
      total_pairs += hi - lo;
    }
  }
  if (total_pairs == 0) {
    diag::warn("skip-gram corpus has no context pairs; returning initial vectors");
    return result;
  }
  for (double& f : freq) f = std::pow(f, 0.75);
  std::discrete_distribution<std::size_t> noise(freq.begin(), freq.end());

  const double total_steps = static_cast<double>(total_pairs * opts.epochs);
  double processed = 0;
  Vector grad_in(opts.dim);
  for (std::size_t epoch = 0; epoch < opts.epochs; ++epoch) {
    double loss = 0;
    for (const auto& sentence : corpus) {
      const auto len = sentence.size();
      for (std::size_t c = 0; c < len; ++c) {
        const auto center = result.table.checked_index(sentence[c]);
        auto lo = c >= opts.window ? c - opts.window : 0;
        auto hi = std::min(len - 1, c + opts.window);
        for (std::size_t o = lo; o <= hi; ++o) {
          if (o == c) continue;
          const auto context = result.table.checked_index(sentence[o]);
          const double lr = opts.lr * std::max(1e-4, 1.0 - processed / total_steps);
          processed += 1;
          grad_in.setZero();
          for (std::size_t s = 0; s <= opts.negatives; ++s) {
            std::size_t target = context;
            double label = 1.0;
            if (s > 0) {
              target = noise(rng);
              if (target == context) continue;
              label = 0.0;
            }
            const double f = in.col(center).dot(out.col(target));
            loss += label > 0 ? detail::neg_log_sigmoid(f) : detail::neg_log_sigmoid(-f);
            const double g = (label - detail::sigmoid(f)) * lr;
            grad_in += g * out.col(target);
            out.col(target) += g * in.col(center);
          }
          in.col(center) += grad_in;
        }
      }
    }
    result.epoch_loss.push_back(loss / static_cast<double>(total_pairs));
  }
  if (!in.allFinite()) throw NumericError("skip-gram produced non-finite embeddings");
  return result;
}

inline SkipGramResult train_skipgram(NodeCounts counts, const WalkCorpus& corpus,
                                     const SkipGramOptions& opts,
                                     const EmbeddingTable* init = nullptr) {
  return train_skipgram(counts, std::span<const std::vector<NodeRef>>(corpus.walks), opts, init);
}

// Brand and category nodes never appear in purchase walks; start each at the
// centroid of the items attached to it.
inline void init_attribute_vectors(EmbeddingTable& table, const TypedGraph& g) {
  for (NodeKind k : {NodeKind::Brand, NodeKind::Category}) {
    for (std::uint32_t i = 0; i < g.counts()[k]; ++i) {
      NodeRef node{k, i};
      Vector sum = Vector::Zero(table.dim());
      std::size_t n = 0;
      for (const Neighbor& nb : g.neighbors(node)) {
        if (nb.node.kind != NodeKind::Item) continue;
        sum += table[nb.node];
        ++n;
      }
      if (n > 0 && sum.norm() > 0) table[node] = sum / static_cast<double>(n);
    }
  }
}

// Mean of the node vectors along a path.
inline Vector embed_path(std::span<const NodeRef> nodes, const EmbeddingTable& table) {
  if (nodes.empty()) throw DataError("cannot embed an empty path");
  Vector sum = Vector::Zero(table.dim());
  for (NodeRef n : nodes) sum += table[n];
  return sum / static_cast<double>(nodes.size());
}

inline double cosine(const Vector& a, const Vector& b) {
  const double na = a.norm(), nb = b.norm();
  if (na == 0 || nb == 0) return 0;
  return a.dot(b) / (na * nb);
}

}  // namespace tmer
