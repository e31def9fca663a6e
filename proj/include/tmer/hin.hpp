#pragma once

// Heterogeneous information network: typed nodes, typed directed edges with
// explicit inverses and one self-loop per node, plus per-user chronological
// interaction sequences and the bridge/train/test split.

#include "tmer/common.hpp"

#include <filesystem>
#include <fstream>
#include <optional>
#include <span>
#include <sstream>
#include <unordered_map>

namespace tmer {

struct Edge {
  NodeRef head;
  Relation relation = Relation::SelfLoop;
  NodeRef tail;

  friend constexpr auto operator<=>(const Edge&, const Edge&) = default;
};

struct Neighbor {
  Relation relation = Relation::SelfLoop;
  NodeRef node;

  friend constexpr bool operator==(const Neighbor&, const Neighbor&) = default;
};

class TypedGraph {
 public:
  TypedGraph() = default;

  // Builds the closed graph from forward edges (Buy, IsBrandOf, IsCategoryOf):
  // duplicates are merged, inverse edges and one self-loop per node added.
  static TypedGraph build(NodeCounts counts, std::span<const Edge> forward_edges) {
    TypedGraph g;
    g.counts_ = counts;
    std::vector<Edge> all;
    all.reserve(forward_edges.size() * 2 + counts.total());
    for (const Edge& e : forward_edges) {
      if (!counts.contains(e.head) || !counts.contains(e.tail)) {
        throw DataError("edge endpoint does not exist: " + to_string(e.head) + " -> " +
                        to_string(e.tail));
      }
      if (e.relation != Relation::Buy && e.relation != Relation::IsBrandOf &&
          e.relation != Relation::IsCategoryOf) {
        throw DataError("only forward relations may be supplied to TypedGraph::build");
      }
      all.push_back(e);
      all.push_back({e.tail, inverse(e.relation), e.head});
    }
    for (std::size_t i = 0; i < counts.total(); ++i) {
      NodeRef n = counts.node_at(i);
      all.push_back({n, Relation::SelfLoop, n});
    }
    std::sort(all.begin(), all.end(), [&](const Edge& a, const Edge& b) {
      auto ka = std::tuple(counts.index(a.head), counts.index(a.tail), a.relation);
      auto kb = std::tuple(counts.index(b.head), counts.index(b.tail), b.relation);
      return ka < kb;
    });
    all.erase(std::unique(all.begin(), all.end()), all.end());
    g.edges_ = std::move(all);

    g.offsets_.assign(counts.total() + 1, 0);
    for (const Edge& e : g.edges_) ++g.offsets_[counts.index(e.head) + 1];
    for (std::size_t i = 1; i < g.offsets_.size(); ++i) g.offsets_[i] += g.offsets_[i - 1];
    g.adjacency_.reserve(g.edges_.size());
    for (const Edge& e : g.edges_) g.adjacency_.push_back({e.relation, e.tail});
    return g;
  }

  const NodeCounts& counts() const { return counts_; }
  std::size_t node_count() const { return counts_.total(); }
  std::size_t edge_count() const { return edges_.size(); }
  bool contains(NodeRef n) const { return counts_.contains(n); }
  std::size_t index(NodeRef n) const { return counts_.index(n); }

  // All edges, sorted by (head, tail, relation).
  const std::vector<Edge>& edges() const { return edges_; }

  // Outgoing neighbors including inverse edges and the self-loop, sorted by
  // (kind, local_id) of the neighbor.
  std::span<const Neighbor> neighbors(NodeRef v) const {
    if (!contains(v)) throw DataError("unknown node " + to_string(v));
    auto i = index(v);
    return {adjacency_.data() + offsets_[i], adjacency_.data() + offsets_[i + 1]};
  }

  // Relation of the first edge v -> w, if any.
  std::optional<Relation> relation_between(NodeRef v, NodeRef w) const {
    for (const Neighbor& n : neighbors(v)) {
      if (n.node == w) return n.relation;
    }
    return std::nullopt;
  }

  void serialize(std::ostream& os) const {
    os << "HINv1 " << counts_[NodeKind::User] << ' ' << counts_[NodeKind::Item] << ' '
       << counts_[NodeKind::Brand] << ' ' << counts_[NodeKind::Category] << '\n';
    for (const Edge& e : edges_) {
      os << to_string(e.head) << '\t' << relation_name(e.relation) << '\t' << to_string(e.tail)
         << '\n';
    }
  }

  std::string serialize() const {
    std::ostringstream os;
    serialize(os);
    return os.str();
  }

  static TypedGraph parse(std::istream& is) {
    std::string line;
    if (!std::getline(is, line)) throw DataError("graph file is empty");
    std::istringstream header(line);
    std::string magic;
    NodeCounts counts;
    header >> magic >> counts[NodeKind::User] >> counts[NodeKind::Item] >>
        counts[NodeKind::Brand] >> counts[NodeKind::Category];
    if (magic != "HINv1" || !header) throw DataError("graph file: bad header '" + line + "'");

    std::vector<Edge> parsed, forward;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto f = split_view(line, '\t');
      if (f.size() != 3) {
        throw DataError("graph file line " + std::to_string(line_no) + ": expected 3 fields");
      }
      Edge e{parse_node(f[0]), parse_relation(f[1]), parse_node(f[2])};
      parsed.push_back(e);
      if (e.relation == Relation::Buy || e.relation == Relation::IsBrandOf ||
          e.relation == Relation::IsCategoryOf) {
        forward.push_back(e);
      }
    }
    TypedGraph g = build(counts, forward);
    std::sort(parsed.begin(), parsed.end(), [&](const Edge& a, const Edge& b) {
      return std::tuple(counts.index(a.head), counts.index(a.tail), a.relation) <
             std::tuple(counts.index(b.head), counts.index(b.tail), b.relation);
    });
    if (parsed != g.edges_) {
      throw DataError("graph file is not closed under inverse edges and self-loops");
    }
    return g;
  }

 private:
  NodeCounts counts_;
  std::vector<Edge> edges_;
  std::vector<std::size_t> offsets_{0};
  std::vector<Neighbor> adjacency_;
};

// ---------------------------------------------------------------------------

struct InteractionSequence {
  NodeRef user;
  std::vector<NodeRef> items;              // chronological
  std::vector<std::int64_t> timestamps;    // parallel to items, non-decreasing
};

struct SplitConfig {
  std::size_t bridge = 2;
  std::size_t train = 4;
  std::size_t max_test = 0;   // 0 keeps every remaining item
  std::size_t min_items = 12;
};

struct SequenceSplit {
  std::vector<NodeRef> bridge;
  std::vector<NodeRef> train;
  std::vector<NodeRef> test;
};

inline SequenceSplit split(const InteractionSequence& seq, const SplitConfig& cfg = {}) {
  const auto n = seq.items.size();
  if (n < cfg.min_items || n < cfg.bridge + cfg.train + 1) {
    throw DataError("sequence for user " + to_string(seq.user) + " has " + std::to_string(n) +
                    " items; split needs at least " +
                    std::to_string(std::max(cfg.min_items, cfg.bridge + cfg.train + 1)));
  }
  SequenceSplit out;
  auto it = seq.items.begin();
  out.bridge.assign(it, it + cfg.bridge);
  it += cfg.bridge;
  out.train.assign(it, it + cfg.train);
  it += cfg.train;
  auto rest = static_cast<std::size_t>(seq.items.end() - it);
  if (cfg.max_test > 0) rest = std::min(rest, cfg.max_test);
  out.test.assign(it, it + rest);
  return out;
}

// External <-> internal id mapping, dense per kind in first-seen order.
class IdMap {
 public:
  std::uint32_t intern(NodeKind k, std::string_view external) {
    auto& lookup = lookup_[static_cast<int>(k)];
    auto it = lookup.find(std::string(external));
    if (it != lookup.end()) return it->second;
    auto id = static_cast<std::uint32_t>(external_[static_cast<int>(k)].size());
    external_[static_cast<int>(k)].emplace_back(external);
    lookup.emplace(std::string(external), id);
    return id;
  }

  std::optional<std::uint32_t> find(NodeKind k, std::string_view external) const {
    const auto& lookup = lookup_[static_cast<int>(k)];
    auto it = lookup.find(std::string(external));
    if (it == lookup.end()) return std::nullopt;
    return it->second;
  }

  const std::string& external(NodeRef n) const {
    return external_[static_cast<int>(n.kind)].at(n.local_id);
  }

  std::uint32_t size(NodeKind k) const {
    return static_cast<std::uint32_t>(external_[static_cast<int>(k)].size());
  }

  void write(std::ostream& os) const {
    for (NodeKind k : kAllKinds) {
      const auto& ext = external_[static_cast<int>(k)];
      for (std::uint32_t i = 0; i < ext.size(); ++i) {
        os << to_string(NodeRef{k, i}) << '\t' << ext[i] << '\n';
      }
    }
  }

 private:
  std::array<std::vector<std::string>, 4> external_;
  std::array<std::unordered_map<std::string, std::uint32_t>, 4> lookup_;
};

struct ItemAttributes {
  std::optional<std::uint32_t> brand;
  std::optional<std::uint32_t> category;
};

struct Dataset {
  NodeCounts counts;
  IdMap ids;
  std::vector<InteractionSequence> sequences;  // indexed by user local id
  std::vector<ItemAttributes> attributes;      // indexed by item local id
  TypedGraph graph;                            // every retained interaction
};

struct IngestOptions {
  std::size_t min_interactions = 12;
};

namespace detail {

inline std::vector<Edge> attribute_edges(const std::vector<ItemAttributes>& attributes) {
  std::vector<Edge> edges;
  for (std::uint32_t i = 0; i < attributes.size(); ++i) {
    NodeRef item{NodeKind::Item, i};
    if (attributes[i].brand) {
      edges.push_back({item, Relation::IsBrandOf, {NodeKind::Brand, *attributes[i].brand}});
    }
    if (attributes[i].category) {
      edges.push_back(
          {item, Relation::IsCategoryOf, {NodeKind::Category, *attributes[i].category}});
    }
  }
  return edges;
}

}  // namespace detail

// Graph over the same nodes where each user keeps only the Buy edges of its
// first `keep_per_user` interactions. Used to hold test purchases out of the
// graph that embeddings and path mining see.
inline TypedGraph build_graph(const Dataset& data, std::size_t keep_per_user) {
  auto edges = detail::attribute_edges(data.attributes);
  for (const auto& seq : data.sequences) {
    auto n = std::min(keep_per_user, seq.items.size());
    for (std::size_t p = 0; p < n; ++p) edges.push_back({seq.user, Relation::Buy, seq.items[p]});
  }
  return TypedGraph::build(data.counts, edges);
}

inline TypedGraph build_training_graph(const Dataset& data, const SplitConfig& cfg) {
  return build_graph(data, cfg.bridge + cfg.train);
}

inline Dataset ingest(std::istream& interactions, std::istream& metadata,
                      const IngestOptions& opts = {}) {
  if (opts.min_interactions < 1) throw ConfigError("min_interactions must be >= 1");

  struct Raw {
    std::string user, item;
    std::int64_t ts;
  };
  std::vector<Raw> raw;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(interactions, line)) {
    ++line_no;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto f = split_view(line, '\t');
    if (f.size() != 3) {
      throw DataError("interactions line " + std::to_string(line_no) +
                      ": expected user_id<TAB>item_id<TAB>timestamp");
    }
    auto ts_text = trim(f[2]);
    std::int64_t ts = 0;
    auto [ptr, ec] = std::from_chars(ts_text.data(), ts_text.data() + ts_text.size(), ts);
    if (ec != std::errc{} || ptr != ts_text.data() + ts_text.size() || f[0].empty() ||
        f[1].empty()) {
      throw DataError("interactions line " + std::to_string(line_no) + ": malformed record");
    }
    raw.push_back({std::string(f[0]), std::string(f[1]), ts});
  }

  Dataset data;
  if (raw.empty()) diag::warn("interactions file contains no records");

  std::unordered_map<std::string, std::size_t> per_user;
  for (const auto& r : raw) ++per_user[r.user];

  std::vector<std::vector<std::pair<std::int64_t, NodeRef>>> timeline;
  std::size_t dropped_users = 0;
  for (const auto& [u, c] : per_user) dropped_users += c < opts.min_interactions;
  for (const auto& r : raw) {
    if (per_user[r.user] < opts.min_interactions) continue;
    auto uid = data.ids.intern(NodeKind::User, r.user);
    auto iid = data.ids.intern(NodeKind::Item, r.item);
    if (uid >= timeline.size()) timeline.resize(uid + 1);
    timeline[uid].push_back({r.ts, NodeRef{NodeKind::Item, iid}});
  }
  if (dropped_users > 0) {
    diag::warn("dropped " + std::to_string(dropped_users) + " users with fewer than " +
               std::to_string(opts.min_interactions) + " interactions");
  }

  data.attributes.resize(data.ids.size(NodeKind::Item));
  std::vector<bool> seen_meta(data.attributes.size(), false);
  line_no = 0;
  while (std::getline(metadata, line)) {
    ++line_no;
    auto view = trim(line);
    if (view.empty() || view.front() == '#') continue;
    auto f = split_view(line, '\t');
    if (f.size() != 3) {
      throw DataError("metadata line " + std::to_string(line_no) +
                      ": expected item_id<TAB>brand_id<TAB>category_id");
    }
    auto item = data.ids.find(NodeKind::Item, f[0]);
    if (!item) {
      diag::warn("metadata line " + std::to_string(line_no) + ": unknown item '" +
                 std::string(f[0]) + "', record skipped");
      continue;
    }
    if (seen_meta[*item]) {
      diag::warn("metadata line " + std::to_string(line_no) + ": duplicate item '" +
                 std::string(f[0]) + "', record skipped");
      continue;
    }
    seen_meta[*item] = true;
    auto brand = trim(f[1]);
    auto category = trim(f[2]);
    if (!brand.empty()) data.attributes[*item].brand = data.ids.intern(NodeKind::Brand, brand);
    if (!category.empty()) {
      data.attributes[*item].category = data.ids.intern(NodeKind::Category, category);
    }
  }

  for (NodeKind k : kAllKinds) data.counts[k] = data.ids.size(k);
  for (std::uint32_t u = 0; u < timeline.size(); ++u) {
    auto& events = timeline[u];
    std::stable_sort(events.begin(), events.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    InteractionSequence seq;
    seq.user = {NodeKind::User, u};
    for (const auto& [ts, item] : events) {
      seq.items.push_back(item);
      seq.timestamps.push_back(ts);
    }
    data.sequences.push_back(std::move(seq));
  }
  data.graph = build_graph(data, std::numeric_limits<std::size_t>::max());
  return data;
}

inline Dataset ingest(const std::filesystem::path& interactions,
                      const std::filesystem::path& metadata, const IngestOptions& opts = {}) {
  std::ifstream in(interactions);
  if (!in) throw DataError("cannot open interactions file " + interactions.string());
  std::ifstream meta(metadata);
  if (!meta) throw DataError("cannot open metadata file " + metadata.string());
  return ingest(in, meta, opts);
}

// Sequences file: one user per line, `u:0<TAB>i:3@<ts><TAB>i:9@<ts>...`.
inline void write_sequences(std::ostream& os, std::span<const InteractionSequence> seqs) {
  for (const auto& s : seqs) {
    os << to_string(s.user);
    for (std::size_t p = 0; p < s.items.size(); ++p) {
      os << '\t' << to_string(s.items[p]) << '@' << s.timestamps[p];
    }
    os << '\n';
  }
}

inline std::vector<InteractionSequence> read_sequences(std::istream& is) {
  std::vector<InteractionSequence> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_view(line, '\t');
    InteractionSequence s;
    s.user = parse_node(f[0]);
    for (std::size_t i = 1; i < f.size(); ++i) {
      auto at = f[i].find('@');
      if (at == std::string_view::npos) {
        throw DataError("sequences line " + std::to_string(line_no) + ": missing timestamp");
      }
      s.items.push_back(parse_node(f[i].substr(0, at)));
      s.timestamps.push_back(parse_int64(f[i].substr(at + 1)));
    }
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace tmer
