#include "support.hpp"

#include <gtest/gtest.h>

using namespace tmer;
using namespace tmer::testing;

namespace {

// u0 bought i0 and i1; both items carry brand b0.
TypedGraph shared_brand() {
  std::vector<Edge> e = {{U(0), Relation::Buy, I(0)},
                         {U(0), Relation::Buy, I(1)},
                         {I(0), Relation::IsBrandOf, B(0)},
                         {I(1), Relation::IsBrandOf, B(0)}};
  return TypedGraph::build(counts(1, 2, 1, 0), e);
}

double sum_prob(std::span<const Action> actions) {
  double s = 0;
  for (const auto& a : actions) s += a.probability;
  return s;
}

}  // namespace

TEST(ActionScores, IdenticalEmbeddingsAreUniform) {
  auto g = shared_brand();
  EmbeddingTable t(g.counts(), 3);
  for (Eigen::Index j = 0; j < t.matrix().cols(); ++j) t.matrix().col(j) << 0.3, -1, 2;
  auto actions = action_scores(g, PolicyState::start(I(0)), PolicyModel::identity(3), t);
  ASSERT_EQ(actions.size(), 3u);
  for (const auto& a : actions) EXPECT_NEAR(a.probability, 1.0 / 3, 1e-12);
}

TEST(ActionScores, CosineOneAndZero) {
  auto g = three_node_toy();
  EmbeddingTable t(g.counts(), 2);
  t[U(0)] = Eigen::Vector2d(1, 0);
  t[I(0)] = Eigen::Vector2d(0, 1);
  t[B(0)] = Eigen::Vector2d(1, 1);
  // u0 sees itself (cos 1) and i0 (cos 0).
  auto actions = action_scores(g, PolicyState::start(U(0)), PolicyModel::identity(2), t);
  ASSERT_EQ(actions.size(), 2u);
  EXPECT_EQ(actions[0].node, U(0));
  EXPECT_NEAR(actions[0].probability, 0.7311, 1e-4);
  EXPECT_EQ(actions[1].node, I(0));
  EXPECT_NEAR(actions[1].probability, 0.2689, 1e-4);
}

TEST(ActionScores, PruningToOneGivesCertainty) {
  auto g = shared_brand();
  Rng rng(3);
  auto t = random_table(g.counts(), 4, rng);
  auto actions = action_scores(g, PolicyState::start(I(1)), PolicyModel::identity(4, 6, 1), t);
  ASSERT_EQ(actions.size(), 1u);
  EXPECT_DOUBLE_EQ(actions[0].probability, 1.0);
}

TEST(ActionScores, ScorerMatchesDirectScoring) {
  auto g = shared_brand();
  Rng rng(5);
  auto t = random_table(g.counts(), 4, rng);
  auto m = PolicyModel::identity(4, 4, 2);
  m.projection = random_matrix(4, 4, rng);
  m.log_temperature = 0.7;
  PolicyScorer scorer(g, t, m);
  for (std::size_t j = 0; j < g.node_count(); ++j) {
    NodeRef n = g.counts().node_at(j);
    auto direct = action_scores(g, PolicyState::start(n), m, t);
    const auto& cached = scorer.actions(n);
    ASSERT_EQ(direct.size(), cached.size());
    for (std::size_t a = 0; a < direct.size(); ++a) {
      EXPECT_EQ(direct[a].node, cached[a].node);
      EXPECT_NEAR(direct[a].probability, cached[a].probability, 1e-12);
    }
  }
}

TEST(ActionScores, ZeroVectorIsNumericError) {
  auto g = three_node_toy();
  EmbeddingTable t(g.counts(), 2);
  t[U(0)] = Eigen::Vector2d(1, 0);
  EXPECT_THROW(action_scores(g, PolicyState::start(U(0)), PolicyModel::identity(2), t),
               NumericError);
}

TEST(ActionScores, SimplexOnRandomInputs) {
  auto g = shared_brand();
  Rng rng(17);
  for (int trial = 0; trial < 100; ++trial) {
    auto t = random_table(g.counts(), 5, rng);
    auto m = PolicyModel::identity(5, 6, 1 + uniform_index(rng, 4));
    m.projection = random_matrix(5, 5, rng);
    m.log_temperature = 3 * uniform01(rng) - 1;
    for (NodeRef n : {U(0), I(0), I(1), B(0)}) {
      auto actions = action_scores(g, PolicyState::start(n), m, t);
      EXPECT_NEAR(sum_prob(actions), 1.0, 1e-9);
      for (const auto& a : actions) EXPECT_GE(a.probability, 0.0);
    }
  }
}

TEST(Step, AdvancesAndRecordsHistory) {
  auto g = three_node_toy();
  EmbeddingTable t(g.counts(), 2);
  t.matrix().setOnes();
  auto s0 = PolicyState::start(U(0));
  auto a0 = action_scores(g, s0, PolicyModel::identity(2), t);
  auto s1 = step(s0, a0, I(0), 3);
  EXPECT_EQ(s1.current, I(0));
  EXPECT_EQ(s1.step, 1);
  EXPECT_EQ(s1.history, (std::vector<NodeRef>{U(0), I(0)}));
  EXPECT_EQ(reward(s1, I(0), 3), 1);
  EXPECT_EQ(reward(s1, B(0), 3), 0);
  auto a1 = action_scores(g, s1, PolicyModel::identity(2), t);
  auto s2 = step(s1, a1, B(0), 3);
  EXPECT_EQ(reward(s2, B(0), 3), 1);
  EXPECT_THROW(step(s2, a1, B(0), 2), Error);
  EXPECT_THROW(step(s0, a0, B(0), 3), Error);
}

TEST(Episode, StepLimitOneCannotReachTwoHops) {
  auto g = three_node_toy();
  Rng rng(2);
  auto t = random_table(g.counts(), 3, rng);
  auto lib = mine_paths(g, t, PolicyModel::identity(3, 1), std::vector<NodePair>{{U(0), B(0)}},
                        {100, 5, 1, 1});
  EXPECT_TRUE(lookup(lib, {U(0), B(0), std::nullopt}).empty());
}

TEST(Episode, ScoreIsMeanOfStepProbabilities) {
  auto g = shared_brand();
  Rng trng(4);
  auto t = random_table(g.counts(), 4, trng);
  PolicyScorer scorer(g, t, PolicyModel::identity(4, 4));
  Rng rng(8);
  int found = 0;
  for (int e = 0; e < 200; ++e) {
    auto ep = run_episode(scorer, I(0), I(1), rng);
    if (!ep.path) continue;
    ++found;
    const auto& p = *ep.path;
    ASSERT_EQ(p.step_scores.size(), ep.steps.size());
    double mean = 0;
    for (std::size_t k = 0; k < ep.steps.size(); ++k) {
      EXPECT_EQ(p.step_scores[k], ep.steps[k].action.probability);
      mean += ep.steps[k].action.probability;
    }
    EXPECT_NEAR(p.score, mean / static_cast<double>(ep.steps.size()), 1e-15);
    EXPECT_EQ(p.nodes.front(), I(0));
    EXPECT_EQ(p.nodes.back(), I(1));
    for (std::size_t k = 0; k + 1 < p.nodes.size(); ++k) {
      EXPECT_EQ(g.relation_between(p.nodes[k], p.nodes[k + 1]), p.relations[k]);
    }
  }
  EXPECT_GT(found, 0);
}

TEST(Episode, AvoidedNodeEndsWithoutReward) {
  auto g = shared_brand();
  Rng trng(4);
  auto t = random_table(g.counts(), 4, trng);
  PolicyScorer scorer(g, t, PolicyModel::identity(4, 4));
  Rng rng(1);
  for (int e = 0; e < 300; ++e) {
    auto ep = run_episode(scorer, I(0), I(1), rng, U(0));
    if (!ep.path) continue;
    EXPECT_EQ(std::count(ep.path->nodes.begin(), ep.path->nodes.end(), U(0)), 0);
  }
  std::vector<PathQuery> q = {{I(0), I(1), U(0)}, {I(0), I(1), std::nullopt}};
  auto lib = mine_paths(scorer, q, {300, 10, 3, 1});
  ASSERT_EQ(lib.size(), 2u);
  auto touches_user = [](const PathInstance& p) {
    return std::count(p.nodes.begin(), p.nodes.end(), U(0)) > 0;
  };
  for (const auto& p : lookup(lib, q[0])) EXPECT_FALSE(touches_user(p));
  bool via_user = false;
  for (const auto& p : lookup(lib, q[1])) via_user |= touches_user(p);
  EXPECT_TRUE(via_user);
}

TEST(PathScore, Mean) {
  std::vector<double> s = {0.2, 0.4, 0.6};
  EXPECT_NEAR(path_score(s), 0.4, 1e-15);
  EXPECT_EQ(path_score({}), 0.0);
}

namespace {

PathInstance path_of(std::vector<NodeRef> nodes, double score) {
  PathInstance p;
  p.nodes = std::move(nodes);
  p.relations.assign(p.nodes.size() - 1, Relation::SelfLoop);
  p.score = score;
  return p;
}

}  // namespace

TEST(RankPaths, OrderAndDedup) {
  std::vector<PathInstance> paths = {
      path_of({I(0), U(0), I(0), U(0), I(1)}, 0.9),  // revisits i0
      path_of({I(0), B(0), I(1)}, 0.5),
      path_of({I(0), B(0), I(1)}, 0.5),
      path_of({I(0), I(0), U(0), I(1)}, 0.5),  // self-loop stay is not a revisit
      path_of({I(0), U(0), I(1)}, 0.7),
  };
  auto r = rank_paths(paths, 10);
  ASSERT_EQ(r.size(), 4u);
  EXPECT_EQ(r[0].nodes, (std::vector<NodeRef>{I(0), U(0), I(1)}));
  EXPECT_EQ(r[1].nodes, (std::vector<NodeRef>{I(0), B(0), I(1)}));
  EXPECT_EQ(r[2].nodes.size(), 4u);
  EXPECT_TRUE(has_revisit(r[3]));
  EXPECT_EQ(rank_paths(paths, 2).size(), 2u);
  EXPECT_THROW(rank_paths(paths, 0), ConfigError);
}

TEST(MinePaths, FewerPathsThanQReturnsAll) {
  auto g = three_node_toy();
  Rng rng(6);
  auto t = random_table(g.counts(), 3, rng);
  auto lib = mine_paths(g, t, PolicyModel::identity(3, 2), std::vector<NodePair>{{U(0), B(0)}},
                        {500, 10, 2, 1});
  const auto& paths = lookup(lib, {U(0), B(0), std::nullopt});
  // Within two steps the only route is u0 -> i0 -> b0.
  ASSERT_EQ(paths.size(), 1u);
  EXPECT_EQ(paths[0].nodes, (std::vector<NodeRef>{U(0), I(0), B(0)}));
}

TEST(MinePaths, IndependentOfThreadsAndOrder) {
  auto g = shared_brand();
  Rng rng(6);
  auto t = random_table(g.counts(), 3, rng);
  PolicyScorer scorer(g, t, PolicyModel::identity(3, 4));
  std::vector<NodePair> a = {{I(0), I(1)}, {U(0), B(0)}, {I(1), I(0)}};
  std::vector<NodePair> b = {a[2], a[0], a[1]};
  auto la = mine_paths(scorer, a, MineOptions{40, 3, 9, 1});
  auto lb = mine_paths(scorer, b, MineOptions{40, 3, 9, 3});
  ASSERT_EQ(la.size(), lb.size());
  for (const auto& [q, paths] : la) {
    const auto& other = lookup(lb, q);
    ASSERT_EQ(paths.size(), other.size());
    for (std::size_t i = 0; i < paths.size(); ++i) {
      EXPECT_EQ(paths[i], other[i]);
      EXPECT_EQ(paths[i].score, other[i].score);
    }
  }
}

TEST(PathsFile, RoundTripWithAvoid) {
  auto g = shared_brand();
  Rng rng(6);
  auto t = random_table(g.counts(), 3, rng);
  std::vector<PathQuery> q = {{I(0), I(1), U(0)}, {U(0), B(0), std::nullopt}};
  auto lib = mine_paths(PolicyScorer(g, t, PolicyModel::identity(3, 4)), q, {100, 4, 5, 1});
  std::ostringstream os;
  write_paths(os, lib);
  EXPECT_NE(os.str().find("# pair i:0 -> i:1 avoid u:0\n"), std::string::npos);
  std::istringstream is(os.str());
  auto back = read_paths(is, g);
  ASSERT_EQ(back.size(), lib.size());
  for (const auto& [key, paths] : lib) {
    const auto& other = lookup(back, key);
    ASSERT_EQ(other.size(), paths.size());
    for (std::size_t i = 0; i < paths.size(); ++i) {
      EXPECT_EQ(other[i], paths[i]);
      EXPECT_NEAR(other[i].score, paths[i].score, 1e-9);
    }
  }
}

TEST(PathsFile, RejectsBadInput) {
  auto g = shared_brand();
  auto parse = [&](const std::string& text) {
    std::istringstream is(text);
    return read_paths(is, g);
  };
  EXPECT_THROW(parse("i:0\ti:1\tscore=0.5\n"), DataError);
  EXPECT_THROW(parse("# pair i:0 -> i:1\ni:0\ti:1\tscore=0.5\n"), DataError);  // not adjacent
  EXPECT_THROW(parse("# pair i:0 -> i:1 avoid u:0\ni:0\tu:0\ti:1\tscore=0.5\n"), DataError);
  EXPECT_THROW(parse("# pair i:0 -> i:1\ni:0\tb:0\ti:0\tscore=0.5\n"), DataError);
  EXPECT_NO_THROW(parse("# pair i:0 -> i:1\ni:0\tb:0\ti:1\tscore=0.5\n"));
}

TEST(PolicyGradient, MatchesFiniteDifferences) {
  auto g = shared_brand();
  Rng rng(21);
  auto t = random_table(g.counts(), 4, rng);
  auto m = PolicyModel::identity(4, 4);
  m.projection += 0.3 * random_matrix(4, 4, rng);
  m.log_temperature = 0.4;
  PolicyScorer scorer(g, t, m);
  Rng erng(3);
  Episode ep;
  do ep = run_episode(scorer, I(0), I(1), erng);
  while (ep.steps.size() < 2);
  auto grad = log_prob_gradient(g, t, m, ep.steps);
  auto f = [&] { return trajectory_log_prob(g, t, m, ep.steps); };
  EXPECT_LT(max_rel_error(grad.projection, numeric_gradient(m.projection, f)), 1e-4);
  Vector lt(1);
  lt << m.log_temperature;
  auto f_lt = [&] {
    m.log_temperature = lt(0);
    return f();
  };
  Matrix numeric_lt = numeric_gradient(lt, f_lt);
  m.log_temperature = lt(0);
  EXPECT_LT(max_rel_error(Matrix::Constant(1, 1, grad.log_temperature), numeric_lt), 1e-4);
}

TEST(Reinforce, SingleTrajectoryUpdateIsLrTimesGradient) {
  auto g = shared_brand();
  Rng rng(12);
  auto t = random_table(g.counts(), 4, rng);
  auto m = PolicyModel::identity(4, 4);
  Rng erng(2);
  Episode ep;
  PolicyScorer scorer(g, t, m);
  do ep = run_episode(scorer, I(0), I(1), erng);
  while (ep.reward == 0);
  auto grad = log_prob_gradient(g, t, m, ep.steps);
  auto before = m;
  std::vector<Episode> batch = {ep};
  reinforce_update(g, t, m, batch, 0.05);
  EXPECT_LT((m.projection - before.projection - 0.05 * grad.projection).cwiseAbs().maxCoeff(),
            1e-12);
  EXPECT_NEAR(m.log_temperature - before.log_temperature, 0.05 * grad.log_temperature, 1e-12);
  EXPECT_NEAR(m.baseline, 0.01, 1e-12);
}

TEST(Reinforce, ZeroAdvantageLeavesPolicy) {
  auto g = shared_brand();
  Rng rng(12);
  auto t = random_table(g.counts(), 4, rng);
  auto m = PolicyModel::identity(4, 4);
  m.baseline = 1.0;
  Rng erng(2);
  PolicyScorer scorer(g, t, m);
  Episode ep;
  do ep = run_episode(scorer, I(0), I(1), erng);
  while (ep.reward == 0);
  std::vector<Episode> batch = {ep};
  auto before = m;
  reinforce_update(g, t, m, batch, 0.5);
  EXPECT_EQ(m.projection, before.projection);
  EXPECT_EQ(m.log_temperature, before.log_temperature);
  EXPECT_THROW(reinforce_update(g, t, m, std::span<const Episode>{}, 0.5), Error);
}

TEST(Reinforce, TrainingRaisesReward) {
  auto g = shared_brand();
  Rng rng(30);
  auto t = random_table(g.counts(), 4, rng);
  auto m = PolicyModel::identity(4, 3);
  std::vector<NodePair> pairs = {{I(0), I(1)}, {I(1), I(0)}};
  auto log = train_policy(g, t, m, pairs, {1600, 16, 0.1, 4});
  ASSERT_EQ(log.batch_reward.size(), 100u);
  double head = 0, tail = 0;
  for (int i = 0; i < 10; ++i) {
    head += log.batch_reward[i];
    tail += log.batch_reward[90 + i];
  }
  EXPECT_GT(tail, head);
}

TEST(PolicyModel, CheckpointRoundTrip) {
  Rng rng(1);
  auto m = PolicyModel::identity(3, 5, 7);
  m.projection = random_matrix(3, 3, rng);
  m.log_temperature = -0.25;
  m.baseline = 0.3;
  std::stringstream ss;
  m.write(ss);
  auto back = PolicyModel::read(ss);
  EXPECT_EQ(back.projection, m.projection);
  EXPECT_EQ(back.log_temperature, m.log_temperature);
  EXPECT_EQ(back.max_steps, 5);
  EXPECT_EQ(back.k_actions, 7u);
  EXPECT_EQ(back.baseline, 0.3);
}
