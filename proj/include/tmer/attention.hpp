#pragma once

// Multi-head self-attention over a set of path embeddings, and the ReLU-gated
// item updates that carry sequential information from one purchase to the
// next. Every forward pass returns a cache; the matching backward pass
// accumulates parameter gradients into a block of the same shape.
//
// Vectors are columns: a path set of n paths is a dim x n matrix.

#include "tmer/common.hpp"

#include <cmath>
#include <span>
#include <utility>

namespace tmer {

namespace detail {

inline Matrix xavier(Eigen::Index rows, Eigen::Index cols, Rng& rng) {
  const double limit = std::sqrt(6.0 / static_cast<double>(rows + cols));
  Matrix m(rows, cols);
  for (Eigen::Index c = 0; c < cols; ++c) {
    for (Eigen::Index r = 0; r < rows; ++r) m(r, c) = (2 * uniform01(rng) - 1) * limit;
  }
  return m;
}

inline void require_dim(Eigen::Index got, Eigen::Index want, const char* what) {
  if (got != want) {
    throw ConfigError(std::string("shape mismatch for ") + what + ": got " +
                      std::to_string(got) + ", expected " + std::to_string(want));
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------

struct SelfAttentionBlock {
  std::vector<Matrix> wq, wk, wv;  // per head: head_dim x dim
  Matrix wo;                        // dim x dim

  int dim() const { return static_cast<int>(wo.rows()); }
  int heads() const { return static_cast<int>(wq.size()); }
  int head_dim() const { return heads() ? static_cast<int>(wq.front().rows()) : 0; }

  static SelfAttentionBlock init(int dim, int heads, Rng& rng) {
    if (heads < 1 || dim < 1 || dim % heads != 0) {
      throw ConfigError("attention dim " + std::to_string(dim) + " is not divisible by " +
                        std::to_string(heads) + " heads");
    }
    SelfAttentionBlock b;
    const int hd = dim / heads;
    for (int h = 0; h < heads; ++h) {
      b.wq.push_back(detail::xavier(hd, dim, rng));
      b.wk.push_back(detail::xavier(hd, dim, rng));
      b.wv.push_back(detail::xavier(hd, dim, rng));
    }
    b.wo = detail::xavier(dim, dim, rng);
    return b;
  }

  SelfAttentionBlock zeros_like() const {
    SelfAttentionBlock z = *this;
    z.visit([](std::string_view, auto& m) { m.setZero(); });
    return z;
  }

  template <class F>
  void visit(F&& f) {
    for (int h = 0; h < heads(); ++h) {
      f("wq" + std::to_string(h), wq[h]);
      f("wk" + std::to_string(h), wk[h]);
      f("wv" + std::to_string(h), wv[h]);
    }
    f(std::string("wo"), wo);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<SelfAttentionBlock*>(this)->visit(
        [&](std::string_view name, auto& m) { f(name, std::as_const(m)); });
  }
};

struct PathAttentionCache {
  Matrix input;                 // dim x n
  std::vector<Matrix> q, k, v;  // per head: head_dim x n
  std::vector<Matrix> attn;     // per head: n x n, row i = query i
  Matrix concat;                // dim x n
};

struct PathAttentionResult {
  Vector context;  // mean over positions of the multi-head output
  Vector weights;  // per path: attention mass received, averaged over heads and queries
  PathAttentionCache cache;
};

inline PathAttentionResult path_set_attention(const Matrix& paths,
                                              const SelfAttentionBlock& block) {
  if (paths.cols() == 0) throw DataError("path_set_attention needs at least one path");
  detail::require_dim(paths.rows(), block.dim(), "path embedding");
  const auto n = paths.cols();
  const int hd = block.head_dim();
  const double scale = std::sqrt(static_cast<double>(block.dim()));
  PathAttentionResult r;
  r.cache.input = paths;
  r.cache.concat.resize(block.dim(), n);
  r.weights = Vector::Zero(n);
  for (int h = 0; h < block.heads(); ++h) {
    Matrix q = block.wq[h] * paths;
    Matrix k = block.wk[h] * paths;
    Matrix v = block.wv[h] * paths;
    Matrix a = (q.transpose() * k) / scale;
    for (Eigen::Index i = 0; i < n; ++i) {
      const double top = a.row(i).maxCoeff();
      a.row(i) = (a.row(i).array() - top).exp();
      a.row(i) /= a.row(i).sum();
    }
    r.cache.concat.middleRows(h * hd, hd) = v * a.transpose();
    r.weights += a.colwise().sum().transpose();
    r.cache.q.push_back(std::move(q));
    r.cache.k.push_back(std::move(k));
    r.cache.v.push_back(std::move(v));
    r.cache.attn.push_back(std::move(a));
  }
  r.weights /= static_cast<double>(block.heads() * n);
  r.context = (block.wo * r.cache.concat).rowwise().mean();
  return r;
}

// Accumulates dL/dparams into `grad`; returns dL/dpaths (dim x n).
inline Matrix backward_path_set_attention(const PathAttentionCache& cache,
                                          const Vector& d_context,
                                          const SelfAttentionBlock& block,
                                          SelfAttentionBlock& grad) {
  const auto n = cache.input.cols();
  const int hd = block.head_dim();
  const double scale = std::sqrt(static_cast<double>(block.dim()));
  Matrix d_out = d_context.replicate(1, n) / static_cast<double>(n);
  grad.wo += d_out * cache.concat.transpose();
  Matrix d_concat = block.wo.transpose() * d_out;
  Matrix d_input = Matrix::Zero(cache.input.rows(), n);
  for (int h = 0; h < block.heads(); ++h) {
    const Matrix& a = cache.attn[h];
    Matrix d_head = d_concat.middleRows(h * hd, hd);
    Matrix d_v = d_head * a;
    Matrix d_a = d_head.transpose() * cache.v[h];
    Matrix d_s(n, n);
    for (Eigen::Index i = 0; i < n; ++i) {
      const double dot = a.row(i).dot(d_a.row(i));
      d_s.row(i) = a.row(i).array() * (d_a.row(i).array() - dot);
    }
    Matrix d_q = cache.k[h] * d_s.transpose() / scale;
    Matrix d_k = cache.q[h] * d_s / scale;
    grad.wq[h] += d_q * cache.input.transpose();
    grad.wk[h] += d_k * cache.input.transpose();
    grad.wv[h] += d_v * cache.input.transpose();
    d_input += block.wq[h].transpose() * d_q + block.wk[h].transpose() * d_k +
               block.wv[h].transpose() * d_v;
  }
  return d_input;
}

// ---------------------------------------------------------------------------
// Gated updates: out = relu(W_a a + W_c c + b) (*) a.

struct ItemUpdateBlock {
  Matrix w_prev, w_path1;       // first layer: previous item and transition context
  Vector b1;
  Matrix w_cur, w_path2;        // second layer: current item and transition context
  Vector b2;
  Matrix w_first, w_user_path;  // first item of a sequence and user->item context
  Vector b_first;

  int dim() const { return static_cast<int>(w_prev.rows()); }

  static ItemUpdateBlock init(int dim, Rng& rng) {
    ItemUpdateBlock b;
    b.w_prev = detail::xavier(dim, dim, rng);
    b.w_path1 = detail::xavier(dim, dim, rng);
    b.b1 = Vector::Zero(dim);
    b.w_cur = detail::xavier(dim, dim, rng);
    b.w_path2 = detail::xavier(dim, dim, rng);
    b.b2 = Vector::Zero(dim);
    b.w_first = detail::xavier(dim, dim, rng);
    b.w_user_path = detail::xavier(dim, dim, rng);
    b.b_first = Vector::Zero(dim);
    return b;
  }

  ItemUpdateBlock zeros_like() const {
    ItemUpdateBlock z = *this;
    z.visit([](std::string_view, auto& m) { m.setZero(); });
    return z;
  }

  template <class F>
  void visit(F&& f) {
    f(std::string("w_prev"), w_prev);
    f(std::string("w_path1"), w_path1);
    f(std::string("b1"), b1);
    f(std::string("w_cur"), w_cur);
    f(std::string("w_path2"), w_path2);
    f(std::string("b2"), b2);
    f(std::string("w_first"), w_first);
    f(std::string("w_user_path"), w_user_path);
    f(std::string("b_first"), b_first);
  }
  template <class F>
  void visit(F&& f) const {
    const_cast<ItemUpdateBlock*>(this)->visit(
        [&](std::string_view name, auto& m) { f(name, std::as_const(m)); });
  }
};

struct GateCache {
  Vector base;     // a
  Vector context;  // c
  Vector pre;      // W_a a + W_c c + b
  Vector gate;     // relu(pre)
};

namespace detail {

inline GateCache gated(const Vector& base, const Vector& context, const Matrix& w_base,
                       const Matrix& w_context, const Vector& bias) {
  require_dim(base.size(), w_base.cols(), "gated input");
  require_dim(context.size(), w_context.cols(), "gated context");
  GateCache c{base, context, w_base * base + w_context * context + bias, {}};
  c.gate = c.pre.cwiseMax(0.0);
  return c;
}

inline Vector gated_output(const GateCache& c) { return c.gate.cwiseProduct(c.base); }

// Returns (d_base, d_context) and accumulates parameter gradients.
inline std::pair<Vector, Vector> backward_gated(const GateCache& c, const Vector& d_out,
                                                const Matrix& w_base, const Matrix& w_context,
                                                Matrix& g_base, Matrix& g_context,
                                                Vector& g_bias) {
  Vector d_pre = d_out.cwiseProduct(c.base).cwiseProduct(
      (c.pre.array() > 0).cast<double>().matrix());
  g_base += d_pre * c.base.transpose();
  g_context += d_pre * c.context.transpose();
  g_bias += d_pre;
  Vector d_base = d_out.cwiseProduct(c.gate) + w_base.transpose() * d_pre;
  Vector d_context = w_context.transpose() * d_pre;
  return {std::move(d_base), std::move(d_context)};
}

}  // namespace detail

struct ItemUpdate {
  Vector h1;  // gated previous item
  Vector h2;  // gated current item
  GateCache layer1, layer2;
};

inline ItemUpdate update_item(const Vector& prev_item, const Vector& cur_item,
                              const Vector& path_context, const ItemUpdateBlock& block) {
  detail::require_dim(prev_item.size(), block.dim(), "previous item");
  detail::require_dim(cur_item.size(), block.dim(), "current item");
  detail::require_dim(path_context.size(), block.dim(), "path context");
  ItemUpdate u;
  u.layer1 = detail::gated(prev_item, path_context, block.w_prev, block.w_path1, block.b1);
  u.layer2 = detail::gated(cur_item, path_context, block.w_cur, block.w_path2, block.b2);
  u.h1 = detail::gated_output(u.layer1);
  u.h2 = detail::gated_output(u.layer2);
  return u;
}

struct ItemUpdateGrad {
  Vector d_prev, d_cur, d_context;
};

inline ItemUpdateGrad backward_update_item(const ItemUpdate& u, const Vector& d_h1,
                                           const Vector& d_h2, const ItemUpdateBlock& block,
                                           ItemUpdateBlock& grad) {
  auto [d_prev, d_ctx1] = detail::backward_gated(u.layer1, d_h1, block.w_prev, block.w_path1,
                                                 grad.w_prev, grad.w_path1, grad.b1);
  auto [d_cur, d_ctx2] = detail::backward_gated(u.layer2, d_h2, block.w_cur, block.w_path2,
                                                grad.w_cur, grad.w_path2, grad.b2);
  return {std::move(d_prev), std::move(d_cur), d_ctx1 + d_ctx2};
}

struct FirstItemUpdate {
  Vector h;
  GateCache gate;
};

inline FirstItemUpdate update_first_item(const Vector& first_item, const Vector& user_path_context,
                                         const ItemUpdateBlock& block) {
  detail::require_dim(first_item.size(), block.dim(), "first item");
  detail::require_dim(user_path_context.size(), block.dim(), "user path context");
  FirstItemUpdate u;
  u.gate = detail::gated(first_item, user_path_context, block.w_first, block.w_user_path,
                         block.b_first);
  u.h = detail::gated_output(u.gate);
  return u;
}

// Returns (d_first_item, d_user_path_context).
inline std::pair<Vector, Vector> backward_update_first_item(const FirstItemUpdate& u,
                                                            const Vector& d_h,
                                                            const ItemUpdateBlock& block,
                                                            ItemUpdateBlock& grad) {
  return detail::backward_gated(u.gate, d_h, block.w_first, block.w_user_path, grad.w_first,
                                grad.w_user_path, grad.b_first);
}

// ---------------------------------------------------------------------------
// Sequence propagation.

// Which representation of the previous item feeds the first gate layer.
enum class PrevItemSource {
  Updated,  // the previous item's second-layer output h2
  Raw,      // the previous item's embedding
};

struct ItemState {
  Vector h1, h2;
};

struct SequenceForward {
  std::vector<ItemState> states;  // per position; position 0 is (user context, first-item update)
  FirstItemUpdate first;
  std::vector<ItemUpdate> updates;  // updates[k-1] belongs to position k
  PrevItemSource prev_source = PrevItemSource::Updated;
  std::vector<Vector> items;

  // Representation handed to whatever follows position k.
  const Vector& carried(std::size_t k) const {
    return prev_source == PrevItemSource::Updated ? states[k].h2 : items[k];
  }
  std::size_t updates_applied() const { return updates.size(); }
};

// transition_contexts[k-1] is the attended path context for items[k-1] -> items[k].
inline SequenceForward propagate_sequence(std::span<const Vector> items,
                                          const Vector& user_context,
                                          std::span<const Vector> transition_contexts,
                                          const ItemUpdateBlock& block,
                                          PrevItemSource prev_source = PrevItemSource::Updated) {
  if (items.empty()) throw DataError("propagate_sequence needs at least one item");
  if (transition_contexts.size() + 1 != items.size()) {
    throw ConfigError("need one path context per transition");
  }
  SequenceForward f;
  f.prev_source = prev_source;
  f.items.assign(items.begin(), items.end());
  f.first = update_first_item(items[0], user_context, block);
  f.states.push_back({user_context, f.first.h});
  for (std::size_t k = 1; k < items.size(); ++k) {
    f.updates.push_back(update_item(f.carried(k - 1), items[k], transition_contexts[k - 1], block));
    f.states.push_back({f.updates.back().h1, f.updates.back().h2});
  }
  return f;
}

struct SequenceGrad {
  std::vector<Vector> d_items;
  Vector d_user_context;
  std::vector<Vector> d_transition_contexts;
};

// d_h1/d_h2: gradients on each position's (h1, h2) from the loss.
// d_carried: extra gradients on each position's carried representation
// (from candidates scored after that position).
inline SequenceGrad backprop_sequence(const SequenceForward& f, std::span<const Vector> d_h1,
                                      std::span<const Vector> d_h2,
                                      std::span<const Vector> d_carried,
                                      const ItemUpdateBlock& block, ItemUpdateBlock& grad) {
  const auto n = f.states.size();
  const auto dim = block.dim();
  SequenceGrad g;
  g.d_items.assign(n, Vector::Zero(dim));
  g.d_transition_contexts.assign(n - 1, Vector::Zero(dim));
  std::vector<Vector> carry(d_carried.begin(), d_carried.end());
  carry.resize(n, Vector::Zero(dim));
  std::vector<Vector> dh2(d_h2.begin(), d_h2.end());
  for (std::size_t k = n; k-- > 0;) {
    if (f.prev_source == PrevItemSource::Updated) {
      dh2[k] += carry[k];
    } else {
      g.d_items[k] += carry[k];
    }
    if (k == 0) {
      auto [d_item, d_ctx] = backward_update_first_item(f.first, dh2[0], block, grad);
      g.d_items[0] += d_item;
      g.d_user_context = d_ctx + d_h1[0];
      break;
    }
    auto d = backward_update_item(f.updates[k - 1], d_h1[k], dh2[k], block, grad);
    g.d_items[k] += d.d_cur;
    g.d_transition_contexts[k - 1] += d.d_context;
    carry[k - 1] += d.d_prev;
  }
  return g;
}

}  // namespace tmer
