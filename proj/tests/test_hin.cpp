#include "support.hpp"

#include <gtest/gtest.h>

using namespace tmer;
using namespace tmer::testing;

namespace {

std::string twelve_items(const std::string& user, int first_item, std::int64_t t0 = 100) {
  std::string s;
  for (int k = 0; k < 12; ++k) {
    s += user + "\titem" + std::to_string(first_item + k) + '\t' + std::to_string(t0 + k) + '\n';
  }
  return s;
}

std::string metadata_for(int first_item, int n) {
  std::string s;
  for (int k = 0; k < n; ++k) {
    s += "item" + std::to_string(first_item + k) + "\tbrand" + std::to_string(k % 3) + "\tcat" +
         std::to_string(k % 2) + '\n';
  }
  return s;
}

InteractionSequence sequence_of(std::size_t n) {
  InteractionSequence s;
  s.user = U(0);
  for (std::uint32_t i = 0; i < n; ++i) {
    s.items.push_back(I(i));
    s.timestamps.push_back(i);
  }
  return s;
}

}  // namespace

TEST(Graph, ThreeNodeToyHasSevenEdges) {
  auto g = three_node_toy();
  EXPECT_EQ(g.edge_count(), 7u);
  EXPECT_EQ(g.node_count(), 3u);
}

TEST(Graph, NeighborsOfItemInToy) {
  auto g = three_node_toy();
  auto nb = g.neighbors(I(0));
  std::vector<Neighbor> want = {{Relation::BuyInverse, U(0)},
                                {Relation::SelfLoop, I(0)},
                                {Relation::IsBrandOf, B(0)}};
  ASSERT_EQ(nb.size(), 3u);
  // ordered by neighbor (kind, id)
  EXPECT_TRUE(std::equal(nb.begin(), nb.end(), want.begin()));
}

TEST(Graph, NeighborsOfUserInToy) {
  auto g = three_node_toy();
  auto nb = g.neighbors(U(0));
  std::vector<Neighbor> want = {{Relation::SelfLoop, U(0)}, {Relation::Buy, I(0)}};
  ASSERT_EQ(nb.size(), 2u);
  EXPECT_TRUE(std::equal(nb.begin(), nb.end(), want.begin()));
}

TEST(Graph, IsolatedNodeHasOnlySelfLoop) {
  auto g = TypedGraph::build(counts(1, 2, 0, 0), std::vector<Edge>{{U(0), Relation::Buy, I(0)}});
  auto nb = g.neighbors(I(1));
  ASSERT_EQ(nb.size(), 1u);
  EXPECT_EQ(nb[0].relation, Relation::SelfLoop);
  EXPECT_EQ(nb[0].node, I(1));
}

TEST(Graph, UnknownNodeIsNamed) {
  auto g = three_node_toy();
  try {
    g.neighbors(I(5));
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("i:5"), std::string::npos);
  }
}

TEST(Graph, RejectsDanglingEdge) {
  std::vector<Edge> e = {{U(0), Relation::Buy, I(3)}};
  EXPECT_THROW(TypedGraph::build(counts(1, 1, 0, 0), e), DataError);
}

TEST(Graph, DuplicateEdgesMerge) {
  std::vector<Edge> e = {{U(0), Relation::Buy, I(0)}, {U(0), Relation::Buy, I(0)}};
  EXPECT_EQ(TypedGraph::build(counts(1, 1, 0, 0), e).edge_count(), 4u);
}

TEST(Graph, InverseClosureAndSelfLoopTotality) {
  Rng rng(3);
  std::vector<Edge> forward;
  for (int k = 0; k < 80; ++k) {
    forward.push_back({U(static_cast<std::uint32_t>(uniform_index(rng, 6))), Relation::Buy,
                       I(static_cast<std::uint32_t>(uniform_index(rng, 15)))});
  }
  for (std::uint32_t i = 0; i < 15; ++i) {
    forward.push_back({I(i), Relation::IsBrandOf, B(i % 4)});
    if (i % 3) forward.push_back({I(i), Relation::IsCategoryOf, C(i % 2)});
  }
  auto g = TypedGraph::build(counts(6, 15, 4, 2), forward);
  std::set<Edge> all(g.edges().begin(), g.edges().end());
  std::size_t loops = 0;
  for (const Edge& e : g.edges()) {
    if (e.relation == Relation::SelfLoop) {
      ++loops;
      EXPECT_EQ(e.head, e.tail);
      continue;
    }
    EXPECT_TRUE(all.count({e.tail, inverse(e.relation), e.head})) << to_string(e.head);
  }
  EXPECT_EQ(loops, g.node_count());
  for (std::size_t n = 0; n < g.node_count(); ++n) {
    auto nb = g.neighbors(g.counts().node_at(n));
    EXPECT_TRUE(std::is_sorted(nb.begin(), nb.end(), [](const Neighbor& a, const Neighbor& b) {
      return a.node < b.node;
    }));
  }
}

TEST(Graph, SerializeRoundTrip) {
  auto g = three_node_toy();
  std::istringstream is(g.serialize());
  auto back = TypedGraph::parse(is);
  EXPECT_EQ(back.edges(), g.edges());
  EXPECT_EQ(back.serialize(), g.serialize());
}

TEST(Graph, ParseRejectsOpenGraph) {
  std::istringstream is("HINv1 1 1 0 0\nu:0\tBuy\ti:0\n");
  EXPECT_THROW(TypedGraph::parse(is), DataError);
  std::istringstream bad("HINv2 1 1 0 0\n");
  EXPECT_THROW(TypedGraph::parse(bad), DataError);
}

TEST(Ingest, TwelveItemUserSplitsTwoFourSix) {
  auto d = ingest_text(twelve_items("alice", 0), metadata_for(0, 12));
  ASSERT_EQ(d.sequences.size(), 1u);
  auto parts = split(d.sequences[0]);
  EXPECT_EQ(parts.bridge.size(), 2u);
  EXPECT_EQ(parts.train.size(), 4u);
  EXPECT_EQ(parts.test.size(), 6u);
  // 12 Buy + 12 IsBrandOf + 12 IsCategoryOf forward edges, doubled, plus one loop per node.
  EXPECT_EQ(d.graph.edge_count(), 36u * 2 + d.graph.node_count());
}

TEST(Ingest, EmptyInputWarns) {
  diag::WarningCapture w;
  auto d = ingest_text("", "");
  EXPECT_TRUE(d.sequences.empty());
  EXPECT_EQ(d.graph.node_count(), 0u);
  EXPECT_FALSE(w.messages.empty());
}

TEST(Ingest, MalformedLineReportsLineNumber) {
  try {
    ingest_text("# header\nalice\titem1\t5\nalice\titem2\n", "");
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("line 3"), std::string::npos) << e.what();
  }
  EXPECT_THROW(ingest_text("alice\titem1\tsoon\n", "", 1), DataError);
}

TEST(Ingest, DanglingMetadataIsSkippedWithWarning) {
  diag::WarningCapture w;
  auto d = ingest_text(twelve_items("alice", 0), metadata_for(0, 12) + "ghost\tbrand0\tcat0\n");
  EXPECT_EQ(d.counts[NodeKind::Item], 12u);
  ASSERT_EQ(w.messages.size(), 1u);
  EXPECT_NE(w.messages[0].find("ghost"), std::string::npos);
}

TEST(Ingest, DropsShortUsersAndTheirEdges) {
  diag::WarningCapture w;
  auto d = ingest_text(twelve_items("alice", 0) + "bob\titem0\t1\nbob\titem99\t2\n",
                       metadata_for(0, 12));
  EXPECT_EQ(d.counts[NodeKind::User], 1u);
  EXPECT_EQ(d.counts[NodeKind::Item], 12u);
  EXPECT_FALSE(d.ids.find(NodeKind::Item, "item99"));
  EXPECT_EQ(w.messages.size(), 1u);
}

TEST(Ingest, MissingAttributesAddNoPlaceholder) {
  auto d = ingest_text(twelve_items("alice", 0), "item0\t\tcat0\nitem1\tbrand0\t\n");
  EXPECT_FALSE(d.attributes[0].brand);
  EXPECT_TRUE(d.attributes[0].category);
  EXPECT_TRUE(d.attributes[1].brand);
  EXPECT_FALSE(d.attributes[1].category);
  EXPECT_EQ(d.counts[NodeKind::Brand], 1u);
  EXPECT_EQ(d.counts[NodeKind::Category], 1u);
}

TEST(Ingest, TimestampTiesKeepFileOrder) {
  std::string s;
  for (int k = 0; k < 12; ++k) s += "alice\titem" + std::to_string(11 - k) + "\t50\n";
  auto d = ingest_text(s, "");
  const auto& seq = d.sequences[0];
  for (std::size_t k = 0; k < 12; ++k) {
    EXPECT_EQ(d.ids.external(seq.items[k]), "item" + std::to_string(11 - k));
  }
}

TEST(Ingest, SortsByTimestamp) {
  auto shuffled = twelve_items("bob", 0, 100);
  std::vector<std::string> lines;
  std::istringstream is(shuffled);
  for (std::string l; std::getline(is, l);) lines.push_back(l);
  std::reverse(lines.begin(), lines.end());
  std::string rev;
  for (auto& l : lines) rev += l + '\n';
  auto e = ingest_text(rev, "");
  const auto& seq = e.sequences[0];
  EXPECT_TRUE(std::is_sorted(seq.timestamps.begin(), seq.timestamps.end()));
  EXPECT_EQ(e.ids.external(seq.items.front()), "item0");
}

TEST(Ingest, Deterministic) {
  const auto s = twelve_items("alice", 0) + twelve_items("bob", 5, 300);
  const auto m = metadata_for(0, 17);
  EXPECT_EQ(ingest_text(s, m).graph.serialize(), ingest_text(s, m).graph.serialize());
}

TEST(Split, DefaultSizes) {
  auto p = split(sequence_of(12));
  EXPECT_EQ(p.bridge.size(), 2u);
  EXPECT_EQ(p.train.size(), 4u);
  EXPECT_EQ(p.test.size(), 6u);
  auto q = split(sequence_of(15));
  EXPECT_EQ(q.bridge.size(), 2u);
  EXPECT_EQ(q.train.size(), 4u);
  EXPECT_EQ(q.test.size(), 9u);
}

TEST(Split, ConfiguredProportions) {
  auto p = split(sequence_of(6), SplitConfig{1, 2, 0, 6});
  EXPECT_EQ(p.bridge.size(), 1u);
  EXPECT_EQ(p.train.size(), 2u);
  EXPECT_EQ(p.test.size(), 3u);
}

TEST(Split, CapsTestItems) {
  auto p = split(sequence_of(15), SplitConfig{2, 4, 3, 12});
  EXPECT_EQ(p.test.size(), 3u);
}

TEST(Split, PartitionIsOrderedAndDisjoint) {
  auto seq = sequence_of(14);
  auto p = split(seq);
  std::vector<NodeRef> joined = p.bridge;
  joined.insert(joined.end(), p.train.begin(), p.train.end());
  joined.insert(joined.end(), p.test.begin(), p.test.end());
  EXPECT_EQ(joined, seq.items);
}

TEST(Split, TooShortNamesUser) {
  auto seq = sequence_of(7);
  seq.user = U(42);
  try {
    split(seq);
    FAIL() << "expected an error";
  } catch (const DataError& e) {
    EXPECT_NE(std::string(e.what()).find("u:42"), std::string::npos);
  }
}

TEST(TrainingGraph, HoldsOutTestPurchases) {
  auto d = ingest_text(twelve_items("alice", 0), metadata_for(0, 12));
  auto g = build_training_graph(d, SplitConfig{});
  const auto& seq = d.sequences[0];
  for (std::size_t k = 0; k < seq.items.size(); ++k) {
    EXPECT_EQ(g.relation_between(seq.user, seq.items[k]).has_value(), k < 6) << k;
  }
  EXPECT_EQ(g.node_count(), d.graph.node_count());
}

TEST(Sequences, RoundTrip) {
  auto d = ingest_text(twelve_items("alice", 0) + twelve_items("bob", 3, 7), "");
  std::ostringstream os;
  write_sequences(os, d.sequences);
  std::istringstream is(os.str());
  auto back = read_sequences(is);
  ASSERT_EQ(back.size(), d.sequences.size());
  for (std::size_t u = 0; u < back.size(); ++u) {
    EXPECT_EQ(back[u].items, d.sequences[u].items);
    EXPECT_EQ(back[u].timestamps, d.sequences[u].timestamps);
  }
}

TEST(NodeRefs, ParseAndFormat) {
  EXPECT_EQ(parse_node("c:17"), C(17));
  EXPECT_EQ(to_string(B(3)), "b:3");
  EXPECT_THROW(parse_node("x:1"), DataError);
  EXPECT_THROW(parse_node("i:"), DataError);
  EXPECT_THROW(parse_node("i:2a"), DataError);
  for (int r = 0; r <= static_cast<int>(Relation::SelfLoop); ++r) {
    auto rel = static_cast<Relation>(r);
    EXPECT_EQ(parse_relation(relation_name(rel)), rel);
    EXPECT_EQ(inverse(inverse(rel)), rel);
  }
}
