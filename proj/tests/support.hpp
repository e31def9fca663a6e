#pragma once

#include "tmer.hpp"

#include <filesystem>
#include <sstream>
#include <string>

namespace tmer::testing {

inline NodeRef U(std::uint32_t i) { return {NodeKind::User, i}; }
inline NodeRef I(std::uint32_t i) { return {NodeKind::Item, i}; }
inline NodeRef B(std::uint32_t i) { return {NodeKind::Brand, i}; }
inline NodeRef C(std::uint32_t i) { return {NodeKind::Category, i}; }

inline NodeCounts counts(std::uint32_t u, std::uint32_t i, std::uint32_t b, std::uint32_t c) {
  NodeCounts n;
  n[NodeKind::User] = u;
  n[NodeKind::Item] = i;
  n[NodeKind::Brand] = b;
  n[NodeKind::Category] = c;
  return n;
}

// u0 buys i0, i0 has brand b0.
inline TypedGraph three_node_toy() {
  std::vector<Edge> e = {{U(0), Relation::Buy, I(0)}, {I(0), Relation::IsBrandOf, B(0)}};
  return TypedGraph::build(counts(1, 1, 1, 0), e);
}

inline Dataset ingest_text(const std::string& interactions, const std::string& metadata,
                           std::size_t min_interactions = 12) {
  std::istringstream is(interactions), ms(metadata);
  return ingest(is, ms, IngestOptions{min_interactions});
}

// Random matrix with entries in [-scale, scale].
inline Matrix random_matrix(Eigen::Index r, Eigen::Index c, Rng& rng, double scale = 1.0) {
  Matrix m(r, c);
  for (Eigen::Index j = 0; j < c; ++j) {
    for (Eigen::Index i = 0; i < r; ++i) m(i, j) = (2 * uniform01(rng) - 1) * scale;
  }
  return m;
}

inline EmbeddingTable random_table(NodeCounts n, int dim, Rng& rng, double scale = 1.0) {
  EmbeddingTable t(n, dim);
  t.matrix() = random_matrix(dim, static_cast<Eigen::Index>(n.total()), rng, scale);
  return t;
}

// max |a - n| / max(floor, |a| + |n|) over all entries. The floor keeps
// finite-difference roundoff on near-zero entries from dominating.
inline double max_rel_error(const Matrix& analytic, const Matrix& numeric, double floor = 1e-8) {
  double worst = 0;
  for (Eigen::Index i = 0; i < analytic.size(); ++i) {
    const double a = analytic.data()[i], n = numeric.data()[i];
    const double denom = std::max(floor, std::abs(a) + std::abs(n));
    worst = std::max(worst, std::abs(a - n) / denom);
  }
  return worst;
}

// Central differences of f with respect to every entry of `param`.
template <class F>
Matrix numeric_gradient(Matrix& param, F&& f, double h = 1e-6) {
  Matrix g(param.rows(), param.cols());
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double keep = param.data()[i];
    param.data()[i] = keep + h;
    const double up = f();
    param.data()[i] = keep - h;
    const double down = f();
    param.data()[i] = keep;
    g.data()[i] = (up - down) / (2 * h);
  }
  return g;
}

template <class F>
Vector numeric_gradient(Vector& param, F&& f, double h = 1e-6) {
  Vector g(param.size());
  for (Eigen::Index i = 0; i < param.size(); ++i) {
    const double keep = param(i);
    param(i) = keep + h;
    const double up = f();
    param(i) = keep - h;
    const double down = f();
    param(i) = keep;
    g(i) = (up - down) / (2 * h);
  }
  return g;
}

// A pipeline run that finishes in a few seconds.
inline PipelineConfig small_config(const std::string& workdir) {
  PipelineConfig c;
  c.workdir = workdir;
  c.synth_users = 24;
  c.synth_items = 60;
  c.synth_brands = 4;
  c.synth_categories = 3;
  c.dim = 8;
  c.heads = 2;
  c.walks_per_node = 4;
  c.sg_epochs = 2;
  c.max_steps = 4;
  c.k_actions = 10;
  c.policy_episodes = 64;
  c.episodes_per_pair = 8;
  c.top_q = 3;
  c.negative_pool = 3;
  c.lr = 0.01;
  c.epochs = 2;
  c.negatives_per_positive = 2;
  c.eval_negatives = 20;
  c.ks = {1, 5, 10};
  c.eval_episodes_per_pair = 8;
  c.explain_users = 5;
  return c;
}

// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("tmer_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::string str() const { return path_.string(); }

 private:
  std::filesystem::path path_;
};

}  // namespace tmer::testing
