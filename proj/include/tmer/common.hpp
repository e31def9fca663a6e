#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <array>
#include <charconv>
#include <compare>
#include <cstdint>
#include <cstdio>
#include <functional>
#include <limits>
#include <iostream>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>
#include <system_error>
#include <thread>
#include <tuple>
#include <vector>

namespace tmer {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Rng = std::mt19937_64;

// ---------------------------------------------------------------------------
// Errors. The CLI maps each family onto a process exit code.

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad flags, bad configuration values, unknown formats.
struct ConfigError : Error {
  using Error::Error;
};

// Malformed or inconsistent input data, missing artifacts.
struct DataError : Error {
  using Error::Error;
};

// Non-finite values, degenerate embeddings, divergence.
struct NumericError : Error {
  using Error::Error;
};

// ---------------------------------------------------------------------------
// Warnings go through a replaceable sink so tests can observe them.

namespace diag {

using Sink = std::function<void(std::string_view)>;

inline std::mutex& sink_mutex() {
  static std::mutex m;
  return m;
}

inline Sink& sink() {
  static Sink s = [](std::string_view msg) { std::cerr << "warning: " << msg << '\n'; };
  return s;
}

inline void warn(std::string_view msg) {
  std::lock_guard lock(sink_mutex());
  sink()(msg);
}

// Installs a sink for the lifetime of the object.
class ScopedSink {
 public:
  explicit ScopedSink(Sink s) {
    std::lock_guard lock(sink_mutex());
    previous_ = std::exchange(sink(), std::move(s));
  }
  ~ScopedSink() {
    std::lock_guard lock(sink_mutex());
    sink() = std::move(previous_);
  }
  ScopedSink(const ScopedSink&) = delete;
  ScopedSink& operator=(const ScopedSink&) = delete;

 private:
  Sink previous_;
};

// Collects warnings into a vector; handy in tests.
class WarningCapture {
 public:
  WarningCapture() : guard_([this](std::string_view m) { messages.emplace_back(m); }) {}
  std::vector<std::string> messages;

 private:
  ScopedSink guard_;
};

}  // namespace diag

// ---------------------------------------------------------------------------
// Node identity.

enum class NodeKind : std::uint8_t { User = 0, Item = 1, Brand = 2, Category = 3 };

inline constexpr std::array<NodeKind, 4> kAllKinds = {NodeKind::User, NodeKind::Item,
                                                      NodeKind::Brand, NodeKind::Category};

inline constexpr char kind_token(NodeKind k) {
  constexpr char tokens[] = {'u', 'i', 'b', 'c'};
  return tokens[static_cast<int>(k)];
}

// Upper-case letter used in meta-path scheme strings (U-I-B-I).
inline constexpr char kind_letter(NodeKind k) {
  constexpr char letters[] = {'U', 'I', 'B', 'C'};
  return letters[static_cast<int>(k)];
}

inline NodeKind parse_kind(char c) {
  switch (c) {
    case 'u': return NodeKind::User;
    case 'i': return NodeKind::Item;
    case 'b': return NodeKind::Brand;
    case 'c': return NodeKind::Category;
    default: throw DataError(std::string("unknown node kind '") + c + "'");
  }
}

struct NodeRef {
  NodeKind kind = NodeKind::User;
  std::uint32_t local_id = 0;

  friend constexpr auto operator<=>(const NodeRef&, const NodeRef&) = default;
};

inline std::string to_string(NodeRef n) {
  return std::string(1, kind_token(n.kind)) + ':' + std::to_string(n.local_id);
}

inline NodeRef parse_node(std::string_view text) {
  if (text.size() < 3 || text[1] != ':') {
    throw DataError("malformed node reference '" + std::string(text) + "'");
  }
  NodeRef n{parse_kind(text[0]), 0};
  auto digits = text.substr(2);
  auto [ptr, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), n.local_id);
  if (ec != std::errc{} || ptr != digits.data() + digits.size()) {
    throw DataError("malformed node reference '" + std::string(text) + "'");
  }
  return n;
}

inline std::ostream& operator<<(std::ostream& os, NodeRef n) { return os << to_string(n); }

// Per-kind node counts; also defines the dense global index layout
// (users, then items, brands, categories).
struct NodeCounts {
  std::array<std::uint32_t, 4> count{};

  std::uint32_t& operator[](NodeKind k) { return count[static_cast<int>(k)]; }
  std::uint32_t operator[](NodeKind k) const { return count[static_cast<int>(k)]; }

  std::size_t total() const {
    return std::size_t{count[0]} + count[1] + count[2] + count[3];
  }
  std::size_t offset(NodeKind k) const {
    std::size_t off = 0;
    for (int i = 0; i < static_cast<int>(k); ++i) off += count[i];
    return off;
  }
  bool contains(NodeRef n) const { return n.local_id < (*this)[n.kind]; }
  std::size_t index(NodeRef n) const { return offset(n.kind) + n.local_id; }
  NodeRef node_at(std::size_t index) const {
    for (NodeKind k : kAllKinds) {
      if (index < (*this)[k]) return {k, static_cast<std::uint32_t>(index)};
      index -= (*this)[k];
    }
    throw DataError("global node index out of range");
  }

  friend bool operator==(const NodeCounts&, const NodeCounts&) = default;
};

// ---------------------------------------------------------------------------
// Relations. Inverse relations are distinct labels so every edge is directed.

enum class Relation : std::uint8_t {
  Buy = 0,
  IsBrandOf = 1,
  IsCategoryOf = 2,
  BuyInverse = 3,
  IsBrandOfInverse = 4,
  IsCategoryOfInverse = 5,
  SelfLoop = 6,
};

inline constexpr Relation inverse(Relation r) {
  switch (r) {
    case Relation::Buy: return Relation::BuyInverse;
    case Relation::IsBrandOf: return Relation::IsBrandOfInverse;
    case Relation::IsCategoryOf: return Relation::IsCategoryOfInverse;
    case Relation::BuyInverse: return Relation::Buy;
    case Relation::IsBrandOfInverse: return Relation::IsBrandOf;
    case Relation::IsCategoryOfInverse: return Relation::IsCategoryOf;
    case Relation::SelfLoop: return Relation::SelfLoop;
  }
  return r;
}

inline constexpr std::string_view relation_name(Relation r) {
  constexpr std::string_view names[] = {"Buy",    "IsBrandOf",    "IsCategoryOf", "Buy^-1",
                                        "IsBrandOf^-1", "IsCategoryOf^-1", "SelfLoop"};
  return names[static_cast<int>(r)];
}

inline Relation parse_relation(std::string_view s) {
  for (int i = 0; i <= static_cast<int>(Relation::SelfLoop); ++i) {
    auto r = static_cast<Relation>(i);
    if (relation_name(r) == s) return r;
  }
  throw DataError("unknown relation '" + std::string(s) + "'");
}

// ---------------------------------------------------------------------------
// Small utilities.

// SplitMix64 finalizer; derives independent stream seeds from (seed, a, b).
inline constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline constexpr std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0) {
  return mix_seed(mix_seed(mix_seed(seed) ^ a) ^ (b * 0x2545f4914f6cdd1dULL));
}

// Uniform double in [0, 1) built from the raw generator bits.
inline double uniform01(Rng& rng) { return static_cast<double>(rng() >> 11) * 0x1.0p-53; }

// Uniform integer in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

// Shortest round-trip decimal representation.
inline std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, ptr);
}

inline std::string format_fixed(double v, int decimals) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.*f", decimals, v);
  return buf;
}

inline double parse_double(std::string_view s) {
  double v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DataError("malformed number '" + std::string(s) + "'");
  }
  return v;
}

inline std::int64_t parse_int64(std::string_view s) {
  std::int64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw DataError("malformed integer '" + std::string(s) + "'");
  }
  return v;
}

inline std::vector<std::string_view> split_view(std::string_view s, char sep) {
  std::vector<std::string_view> out;
  std::size_t start = 0;
  for (;;) {
    auto pos = s.find(sep, start);
    if (pos == std::string_view::npos) {
      out.push_back(s.substr(start));
      return out;
    }
    out.push_back(s.substr(start, pos - start));
    start = pos + 1;
  }
}

inline std::string_view trim(std::string_view s) {
  while (!s.empty() && (s.front() == ' ' || s.front() == '\r' || s.front() == '\t')) s.remove_prefix(1);
  while (!s.empty() && (s.back() == ' ' || s.back() == '\r' || s.back() == '\t')) s.remove_suffix(1);
  return s;
}

inline bool all_finite(const Matrix& m) { return m.allFinite(); }

// Runs fn(i) for i in [0, n) over `threads` workers. Callers must make each
// index independent (own output slot, own seeded generator).
template <class Fn>
void parallel_for(std::size_t n, unsigned threads, Fn&& fn) {
  if (threads <= 1 || n < 2) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, n));
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < n; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

}  // namespace tmer
