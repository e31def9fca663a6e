#pragma once

// Explanation reports: for one purchase transition, the mined item->item paths
// ranked by the attention weight the trained model gives them, plus path
// scheme (kind string) summaries.

#include "tmer/explorer.hpp"
#include "tmer/recommender.hpp"

#include <json.hpp>

#include <map>

namespace tmer {

struct ExplainedPath {
  PathInstance path;
  double alpha = 0;  // attention weight
  double score = 0;  // explorer path score
};

struct ExplanationRecord {
  NodeRef user;
  NodeRef prev;
  NodeRef next;
  std::vector<ExplainedPath> paths;  // alpha descending
  std::string scheme;                // scheme of the top path; empty without evidence

  bool no_evidence() const { return paths.empty(); }
};

inline std::string scheme_string(std::span<const NodeRef> nodes) {
  std::string s;
  for (NodeRef n : nodes) {
    if (!s.empty()) s += '-';
    s += kind_letter(n.kind);
  }
  return s;
}

inline std::string scheme_string(const PathInstance& p) { return scheme_string(p.nodes); }

using SchemeTable = std::map<std::string, std::size_t>;

inline SchemeTable summarize_schemes(std::span<const ExplanationRecord> records) {
  SchemeTable t;
  for (const auto& r : records) {
    for (const auto& p : r.paths) ++t[scheme_string(p.path)];
  }
  return t;
}

// Attention weights come from the item-item attention forward pass over the
// transition's mined paths. At most `top` paths are kept.
inline ExplanationRecord explain_transition(NodeRef user, NodeRef prev, NodeRef next,
                                            const TmerModel& model,
                                            std::span<const PathInstance> mined,
                                            std::size_t top = 5) {
  ExplanationRecord rec{user, prev, next, {}, {}};
  if (mined.empty()) return rec;
  PathSet nodes;
  for (const auto& p : mined) nodes.push_back(p.nodes);
  auto att = path_set_attention(path_matrix(nodes, model.table), model.item_item_attention);
  std::vector<std::size_t> order(mined.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return att.weights(static_cast<Eigen::Index>(a)) > att.weights(static_cast<Eigen::Index>(b));
  });
  if (order.size() > top) order.resize(top);
  for (std::size_t i : order) {
    rec.paths.push_back({mined[i], att.weights(static_cast<Eigen::Index>(i)), mined[i].score});
  }
  rec.scheme = scheme_string(rec.paths.front().path);
  return rec;
}

enum class ReportFormat { Text, Structured };

inline ReportFormat parse_report_format(std::string_view s) {
  if (s == "text") return ReportFormat::Text;
  if (s == "structured" || s == "json") return ReportFormat::Structured;
  throw ConfigError("unknown report format '" + std::string(s) + "' (expected text or structured)");
}

namespace detail {

inline std::string path_text(const PathInstance& p) {
  std::string s = to_string(p.nodes.front());
  for (std::size_t t = 0; t < p.relations.size(); ++t) {
    s += " -";
    s += relation_name(p.relations[t]);
    s += "-> " + to_string(p.nodes[t + 1]);
  }
  return s;
}

}  // namespace detail

inline nlohmann::ordered_json to_json(const ExplanationRecord& r) {
  nlohmann::ordered_json j;
  j["user"] = to_string(r.user);
  j["prev_item"] = to_string(r.prev);
  j["next_item"] = to_string(r.next);
  j["paths"] = nlohmann::ordered_json::array();
  SchemeTable counts;
  for (const auto& p : r.paths) {
    nlohmann::ordered_json e;
    e["nodes"] = nlohmann::ordered_json::array();
    for (NodeRef n : p.path.nodes) e["nodes"].push_back(to_string(n));
    e["relations"] = nlohmann::ordered_json::array();
    for (Relation rel : p.path.relations) e["relations"].push_back(std::string(relation_name(rel)));
    e["alpha"] = p.alpha;
    e["score"] = p.score;
    j["paths"].push_back(std::move(e));
    ++counts[scheme_string(p.path)];
  }
  j["scheme_counts"] = nlohmann::ordered_json::object();
  for (const auto& [scheme, n] : counts) j["scheme_counts"][scheme] = n;
  return j;
}

inline ExplanationRecord record_from_json(const nlohmann::ordered_json& j) {
  try {
    ExplanationRecord r;
    r.user = parse_node(j.at("user").get<std::string>());
    r.prev = parse_node(j.at("prev_item").get<std::string>());
    r.next = parse_node(j.at("next_item").get<std::string>());
    for (const auto& e : j.at("paths")) {
      ExplainedPath p;
      for (const auto& n : e.at("nodes")) p.path.nodes.push_back(parse_node(n.get<std::string>()));
      for (const auto& rel : e.at("relations")) {
        p.path.relations.push_back(parse_relation(rel.get<std::string>()));
      }
      if (p.path.nodes.size() != p.path.relations.size() + 1) {
        throw DataError("explanation path needs one more node than relations");
      }
      p.alpha = e.at("alpha").get<double>();
      p.score = e.at("score").get<double>();
      p.path.score = p.score;
      r.paths.push_back(std::move(p));
    }
    if (!r.paths.empty()) r.scheme = scheme_string(r.paths.front().path);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed explanation record: ") + e.what());
  }
}

inline std::string render(const ExplanationRecord& r, ReportFormat fmt) {
  if (fmt == ReportFormat::Structured) return to_json(r).dump(2) + '\n';
  std::string out = "user " + to_string(r.user) + ": " + to_string(r.prev) + " -> " +
                    to_string(r.next) + '\n';
  if (r.no_evidence()) return out + "  no evidence\n";
  for (const auto& p : r.paths) {
    out += "  alpha=" + format_fixed(p.alpha, 4) + "  score=" + format_fixed(p.score, 4) + "  " +
           scheme_string(p.path) + "  " + detail::path_text(p.path) + '\n';
  }
  return out;
}

inline std::string render(const SchemeTable& t, ReportFormat fmt) {
  if (fmt == ReportFormat::Structured) {
    nlohmann::ordered_json j = nlohmann::ordered_json::object();
    for (const auto& [scheme, n] : t) j[scheme] = n;
    return j.dump(2) + '\n';
  }
  std::vector<std::pair<std::string, std::size_t>> rows(t.begin(), t.end());
  std::stable_sort(rows.begin(), rows.end(),
                   [](const auto& a, const auto& b) { return a.second > b.second; });
  std::string out;
  for (const auto& [scheme, n] : rows) out += std::to_string(n) + '\t' + scheme + '\n';
  return out;
}

// One record per line (compact), for whole-run report files.
inline std::string render_records(std::span<const ExplanationRecord> records, ReportFormat fmt) {
  std::string out;
  if (fmt == ReportFormat::Text) {
    for (const auto& r : records) out += render(r, fmt);
    return out;
  }
  for (const auto& r : records) out += to_json(r).dump() + '\n';
  return out;
}

inline std::vector<ExplanationRecord> parse_records(std::istream& is) {
  std::vector<ExplanationRecord> out;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    nlohmann::ordered_json j = nlohmann::ordered_json::parse(line, nullptr, false);
    if (j.is_discarded()) {
      throw DataError("explanations line " + std::to_string(line_no) + ": invalid JSON");
    }
    out.push_back(record_from_json(j));
  }
  return out;
}

}  // namespace tmer
