#pragma once

// Stage orchestration over a work directory. Every stage reads artifacts
// recorded in manifest.tsv, writes its own outputs through temporary files
// that are renamed into place on success, and then records them in the
// manifest with their content hashes, the stage seed and the hashes of its
// inputs.

#include "tmer/evaluation.hpp"
#include "tmer/explain.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>

namespace tmer {

inline constexpr std::string_view kVersion = "0.1.0";

struct PipelineConfig {
  // paths; empty data paths mean "use the synth output in the work directory"
  std::string workdir = "work";
  std::string interactions;
  std::string metadata;
  std::uint64_t seed = 1;
  bool deterministic = false;
  std::size_t threads = 1;

  // synth
  std::size_t synth_users = 200;
  std::size_t synth_items = 400;
  std::size_t synth_brands = 10;
  std::size_t synth_categories = 5;
  std::size_t synth_length = 12;
  double synth_loyalty = 0.9;
  double synth_sequential = 0.0;

  // ingest / split
  std::size_t min_interactions = 12;
  std::size_t bridge = 2;
  std::size_t train_items = 4;
  std::size_t max_test = 0;

  // embed
  int dim = 100;
  std::size_t walks_per_node = 20;
  std::size_t walk_length = 10;
  std::size_t window = 5;
  std::size_t sg_negatives = 5;
  std::size_t sg_epochs = 5;
  double sg_lr = 0.025;
  std::size_t refine_epochs = 1;

  // explore
  int max_steps = 6;
  std::size_t k_actions = 20;
  std::size_t policy_episodes = 2000;
  std::size_t policy_batch = 16;
  double policy_lr = 0.01;
  std::size_t episodes_per_pair = 50;
  std::size_t top_q = 5;
  std::size_t negative_pool = 8;

  // train
  int heads = 4;
  std::string optimizer = "sgd";
  double lr = 1e-4;
  std::size_t epochs = 30;
  std::size_t negatives_per_positive = 4;
  bool fine_tune_embeddings = true;
  bool positive_term = true;
  bool use_user_item_paths = true;
  bool use_item_item_paths = true;
  std::string prev_item = "updated";

  // eval
  std::size_t eval_negatives = 500;
  std::vector<std::size_t> ks = {1, 5, 10, 20};
  bool corrected = false;
  std::size_t eval_episodes_per_pair = 50;

  // explain
  std::size_t explain_top = 5;
  std::size_t explain_users = 0;  // 0 explains every user

  friend bool operator==(const PipelineConfig&, const PipelineConfig&) = default;

  void validate() const {
    if (workdir.empty()) throw ConfigError("workdir must not be empty");
    if (synth_users < 1 || synth_items < 1 || synth_brands < 1 || synth_categories < 1) {
      throw ConfigError("synth counts must be >= 1");
    }
    if (synth_length > synth_items) throw ConfigError("synth_length exceeds synth_items");
    if (!(synth_loyalty >= 0 && synth_loyalty <= 1)) {
      throw ConfigError("synth_loyalty must be in [0, 1]");
    }
    if (!(synth_sequential >= 0 && synth_sequential <= 1)) {
      throw ConfigError("synth_sequential must be in [0, 1]");
    }
    if (bridge < 1) throw ConfigError("bridge must be >= 1");
    if (train_items < 1) throw ConfigError("train_items must be >= 1");
    if (min_interactions < bridge + train_items + 1) {
      throw ConfigError("min_interactions must be >= bridge + train_items + 1");
    }
    if (dim < 1) throw ConfigError("dim must be >= 1");
    if (heads < 1 || dim % heads != 0) throw ConfigError("dim must be divisible by heads");
    if (optimizer != "sgd" && optimizer != "adam") {
      throw ConfigError("optimizer must be sgd or adam");
    }
    if (prev_item != "updated" && prev_item != "raw") {
      throw ConfigError("prev_item must be updated or raw");
    }
    if (negative_pool < 1) throw ConfigError("negative_pool must be >= 1");
    if (threads < 1) throw ConfigError("threads must be >= 1");
    eval_config().validate();
    train_config().validate();
  }

  std::uint64_t stage_seed(std::string_view stage) const {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : stage) h = (h ^ c) * 1099511628211ULL;
    return mix_seed(seed, h);
  }

  unsigned worker_threads() const { return deterministic ? 1u : static_cast<unsigned>(threads); }

  SplitConfig split_config() const { return {bridge, train_items, max_test, min_interactions}; }

  WalkOptions walk_options() const { return {walks_per_node, walk_length, stage_seed("walks")}; }

  SkipGramOptions skipgram_options() const {
    return {dim, window, sg_negatives, sg_epochs, sg_lr, stage_seed("embed")};
  }

  SkipGramOptions refine_options() const {
    auto o = skipgram_options();
    o.epochs = refine_epochs;
    o.seed = stage_seed("refine");
    return o;
  }

  PolicyTrainOptions policy_options() const {
    return {policy_episodes, policy_batch, policy_lr, stage_seed("policy")};
  }

  MineOptions mine_options() const {
    return {episodes_per_pair, top_q, stage_seed("explore"), worker_threads()};
  }

  ModelOptions model_options() const {
    return {heads, use_user_item_paths, use_item_item_paths,
            prev_item == "raw" ? PrevItemSource::Raw : PrevItemSource::Updated};
  }

  TrainConfig train_config() const {
    TrainConfig t;
    t.optimizer = optimizer == "adam" ? Optimizer::Adam : Optimizer::Sgd;
    t.lr = lr;
    t.epochs = epochs;
    t.negatives_per_positive = negatives_per_positive;
    t.seed = stage_seed("train");
    t.fine_tune_embeddings = fine_tune_embeddings;
    t.positive_term = positive_term;
    return t;
  }

  EvalConfig eval_config() const { return {eval_negatives, ks, corrected, stage_seed("eval")}; }
};

// ---------------------------------------------------------------------------
// Flat key=value serialization.

namespace detail {

inline std::string to_text(const std::string& v) { return v; }
inline std::string to_text(bool v) { return v ? "true" : "false"; }
inline std::string to_text(double v) { return format_double(v); }
inline std::string to_text(int v) { return std::to_string(v); }
inline std::string to_text(std::uint64_t v) { return std::to_string(v); }
inline std::string to_text(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

inline std::uint64_t parse_unsigned(std::string_view s) {
  std::uint64_t v = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected a non-negative integer, got '" + std::string(s) + "'");
  }
  return v;
}

inline void from_text(std::string_view s, std::string& v) { v = std::string(s); }
inline void from_text(std::string_view s, bool& v) {
  if (s == "true" || s == "1") v = true;
  else if (s == "false" || s == "0") v = false;
  else throw ConfigError("expected true or false, got '" + std::string(s) + "'");
}
inline void from_text(std::string_view s, double& v) {
  try {
    v = parse_double(s);
  } catch (const Error&) {
    throw ConfigError("expected a number, got '" + std::string(s) + "'");
  }
}
inline void from_text(std::string_view s, int& v) {
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size() || s.empty()) {
    throw ConfigError("expected an integer, got '" + std::string(s) + "'");
  }
}
inline void from_text(std::string_view s, std::uint64_t& v) { v = parse_unsigned(s); }
inline void from_text(std::string_view s, std::vector<std::size_t>& v) {
  v.clear();
  for (auto part : split_view(s, ',')) v.push_back(parse_unsigned(trim(part)));
}

struct ConfigField {
  std::string key;
  std::function<std::string(const PipelineConfig&)> get;
  std::function<void(PipelineConfig&, std::string_view)> set;
};

template <class T>
ConfigField config_field(std::string key, T PipelineConfig::*member) {
  return {std::move(key), [member](const PipelineConfig& c) { return to_text(c.*member); },
          [member](PipelineConfig& c, std::string_view s) { from_text(s, c.*member); }};
}

inline const std::vector<ConfigField>& config_fields() {
  using C = PipelineConfig;
  static const std::vector<ConfigField> fields = {
      config_field("workdir", &C::workdir),
      config_field("interactions", &C::interactions),
      config_field("metadata", &C::metadata),
      config_field("seed", &C::seed),
      config_field("deterministic", &C::deterministic),
      config_field("threads", &C::threads),
      config_field("synth_users", &C::synth_users),
      config_field("synth_items", &C::synth_items),
      config_field("synth_brands", &C::synth_brands),
      config_field("synth_categories", &C::synth_categories),
      config_field("synth_length", &C::synth_length),
      config_field("synth_loyalty", &C::synth_loyalty),
      config_field("synth_sequential", &C::synth_sequential),
      config_field("min_interactions", &C::min_interactions),
      config_field("bridge", &C::bridge),
      config_field("train_items", &C::train_items),
      config_field("max_test", &C::max_test),
      config_field("dim", &C::dim),
      config_field("walks_per_node", &C::walks_per_node),
      config_field("walk_length", &C::walk_length),
      config_field("window", &C::window),
      config_field("sg_negatives", &C::sg_negatives),
      config_field("sg_epochs", &C::sg_epochs),
      config_field("sg_lr", &C::sg_lr),
      config_field("refine_epochs", &C::refine_epochs),
      config_field("max_steps", &C::max_steps),
      config_field("k_actions", &C::k_actions),
      config_field("policy_episodes", &C::policy_episodes),
      config_field("policy_batch", &C::policy_batch),
      config_field("policy_lr", &C::policy_lr),
      config_field("episodes_per_pair", &C::episodes_per_pair),
      config_field("top_q", &C::top_q),
      config_field("negative_pool", &C::negative_pool),
      config_field("heads", &C::heads),
      config_field("optimizer", &C::optimizer),
      config_field("lr", &C::lr),
      config_field("epochs", &C::epochs),
      config_field("negatives_per_positive", &C::negatives_per_positive),
      config_field("fine_tune_embeddings", &C::fine_tune_embeddings),
      config_field("positive_term", &C::positive_term),
      config_field("use_user_item_paths", &C::use_user_item_paths),
      config_field("use_item_item_paths", &C::use_item_item_paths),
      config_field("prev_item", &C::prev_item),
      config_field("eval_negatives", &C::eval_negatives),
      config_field("ks", &C::ks),
      config_field("corrected", &C::corrected),
      config_field("eval_episodes_per_pair", &C::eval_episodes_per_pair),
      config_field("explain_top", &C::explain_top),
      config_field("explain_users", &C::explain_users),
  };
  return fields;
}

}  // namespace detail

inline void set_config_value(PipelineConfig& c, std::string_view key, std::string_view value) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) {
      try {
        f.set(c, value);
      } catch (const ConfigError& e) {
        throw ConfigError("config key " + f.key + ": " + e.what());
      }
      return;
    }
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

inline std::string get_config_value(const PipelineConfig& c, std::string_view key) {
  for (const auto& f : detail::config_fields()) {
    if (f.key == key) return f.get(c);
  }
  throw ConfigError("unknown config key '" + std::string(key) + "'");
}

// Every key, one per line, in declaration order. `skip` leaves keys out (used
// for hashing, where paths must not matter).
inline std::string serialize_config(const PipelineConfig& c,
                                    std::span<const std::string_view> skip = {}) {
  std::string out;
  for (const auto& f : detail::config_fields()) {
    if (std::find(skip.begin(), skip.end(), f.key) != skip.end()) continue;
    out += f.key + '=' + f.get(c) + '\n';
  }
  return out;
}

// Lines are `key=value`; blank lines and `#` comments are ignored. Keys not
// present keep the value from `base`.
inline PipelineConfig parse_config(std::istream& is, PipelineConfig base = {}) {
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    auto t = trim(line);
    if (t.empty() || t.front() == '#') continue;
    auto eq = t.find('=');
    if (eq == std::string_view::npos) {
      throw ConfigError("config line " + std::to_string(line_no) + ": expected key=value");
    }
    set_config_value(base, trim(t.substr(0, eq)), trim(t.substr(eq + 1)));
  }
  return base;
}

inline PipelineConfig load_config(const std::filesystem::path& p, PipelineConfig base = {}) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open config file " + p.string());
  return parse_config(is, std::move(base));
}

// ---------------------------------------------------------------------------
// Planted-brand synthetic data: each user has one planted brand, and each of
// its purchases comes from that brand with probability `loyalty`, otherwise
// from a different brand. Item i has brand i % brands and category
// (i / brands) % categories. With probability `sequential` a purchase is also
// restricted to the previous purchase's category (when such an item is left).

struct SynthConfig {
  std::size_t users = 200, items = 400, brands = 10, categories = 5, length = 12;
  double loyalty = 0.9;
  double sequential = 0.0;
  std::uint64_t seed = 1;
};

struct SynthData {
  std::string interactions;  // user<TAB>item<TAB>timestamp
  std::string metadata;      // item<TAB>brand<TAB>category
  std::string planted;       // user<TAB>brand
};

inline std::string synth_user(std::size_t u) { return "user" + std::to_string(u); }
inline std::string synth_item(std::size_t i) { return "item" + std::to_string(i); }
inline std::string synth_brand(std::size_t b) { return "brand" + std::to_string(b); }
inline std::size_t synth_brand_of(std::size_t item, std::size_t brands) { return item % brands; }
inline std::size_t synth_category_of(std::size_t item, std::size_t brands, std::size_t categories) {
  return (item / brands) % categories;
}

inline SynthData synthesize(const SynthConfig& cfg) {
  if (cfg.length > cfg.items) throw ConfigError("synth length exceeds item count");
  if (cfg.brands < 1 || cfg.categories < 1) throw ConfigError("synth needs brands and categories");
  SynthData out;
  std::vector<std::vector<std::size_t>> by_brand(cfg.brands);
  for (std::size_t i = 0; i < cfg.items; ++i) {
    by_brand[synth_brand_of(i, cfg.brands)].push_back(i);
    out.metadata += synth_item(i) + '\t' + synth_brand(synth_brand_of(i, cfg.brands)) + "\tcat" +
                    std::to_string(synth_category_of(i, cfg.brands, cfg.categories)) + '\n';
  }
  Rng rng(mix_seed(cfg.seed, 0x73796e7468ULL));
  for (std::size_t u = 0; u < cfg.users; ++u) {
    const std::size_t planted = uniform_index(rng, cfg.brands);
    out.planted += synth_user(u) + '\t' + synth_brand(planted) + '\n';
    std::vector<char> used(cfg.items, 0);
    std::optional<std::size_t> prev_category;
    auto draw = [&](bool on_brand, std::optional<std::size_t> category) -> std::optional<std::size_t> {
      std::vector<std::size_t> pool;
      for (std::size_t b = 0; b < cfg.brands; ++b) {
        if ((b == planted) != on_brand) continue;
        for (std::size_t i : by_brand[b]) {
          if (used[i]) continue;
          if (category && synth_category_of(i, cfg.brands, cfg.categories) != *category) continue;
          pool.push_back(i);
        }
      }
      if (pool.empty()) return std::nullopt;
      return pool[uniform_index(rng, pool.size())];
    };
    for (std::size_t t = 0; t < cfg.length; ++t) {
      const bool on_brand = cfg.brands == 1 || uniform01(rng) < cfg.loyalty;
      const bool chained = prev_category && uniform01(rng) < cfg.sequential;
      std::optional<std::size_t> item;
      if (chained) item = draw(on_brand, prev_category);
      if (!item) item = draw(on_brand, std::nullopt);
      if (!item) item = draw(!on_brand, std::nullopt);
      prev_category = synth_category_of(*item, cfg.brands, cfg.categories);
      used[*item] = 1;
      out.interactions += synth_user(u) + '\t' + synth_item(*item) + '\t' +
                          std::to_string(1600000000 + static_cast<std::int64_t>(t) * 3600) +
                          '\n';
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Work directory: manifest, lock, atomic stage commits.

inline std::uint64_t fnv1a(std::string_view bytes) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : bytes) h = (h ^ c) * 1099511628211ULL;
  return h;
}

inline std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream is(p, std::ios::binary);
  if (!is) throw DataError("cannot read " + p.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

struct ManifestEntry {
  std::string stage;
  std::string artifact;
  std::string hash;
  std::uint64_t seed = 0;
  std::string version;
  std::string inputs;  // comma-separated name=hash, sorted

  friend bool operator==(const ManifestEntry&, const ManifestEntry&) = default;
};

inline constexpr std::array<std::string_view, 7> kStages = {"synth", "ingest",  "embed",  "explore",
                                                            "train", "eval",    "explain"};

inline std::size_t stage_rank(std::string_view s) {
  auto it = std::find(kStages.begin(), kStages.end(), s);
  if (it == kStages.end()) {
    throw ConfigError("unknown stage '" + std::string(s) +
                      "' (expected synth, ingest, embed, explore, train, eval, explain or all)");
  }
  return static_cast<std::size_t>(it - kStages.begin());
}

class Manifest {
 public:
  static constexpr std::string_view kFile = "manifest.tsv";
  static constexpr std::string_view kHeader = "stage\tartifact\tfnv1a64\tseed\tversion\tinputs";

  static Manifest load(const std::filesystem::path& dir) {
    Manifest m;
    const auto p = dir / kFile;
    if (!std::filesystem::exists(p)) return m;
    std::istringstream is(read_file(p));
    std::string line;
    std::getline(is, line);
    if (line != kHeader) throw DataError("manifest " + p.string() + " has an unexpected header");
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto f = split_view(line, '\t');
      if (f.size() != 6) {
        throw DataError("manifest line " + std::to_string(line_no) + ": expected 6 fields");
      }
      ManifestEntry e{std::string(f[0]), std::string(f[1]), std::string(f[2]),
                      detail::parse_unsigned(f[3]), std::string(f[4]), std::string(f[5])};
      m.entries_.push_back(std::move(e));
    }
    return m;
  }

  const ManifestEntry* find(std::string_view artifact) const {
    for (const auto& e : entries_) {
      if (e.artifact == artifact) return &e;
    }
    return nullptr;
  }

  // Replaces every entry of `stage` (and of any artifact it now produces).
  void replace_stage(const std::string& stage, std::vector<ManifestEntry> fresh) {
    std::erase_if(entries_, [&](const ManifestEntry& e) {
      if (e.stage == stage) return true;
      return std::any_of(fresh.begin(), fresh.end(),
                         [&](const ManifestEntry& f) { return f.artifact == e.artifact; });
    });
    for (auto& e : fresh) entries_.push_back(std::move(e));
    std::stable_sort(entries_.begin(), entries_.end(), [](const auto& a, const auto& b) {
      const auto ra = stage_rank(a.stage), rb = stage_rank(b.stage);
      return ra != rb ? ra < rb : a.artifact < b.artifact;
    });
  }

  std::string serialize() const {
    std::string out(kHeader);
    out += '\n';
    for (const auto& e : entries_) {
      out += e.stage + '\t' + e.artifact + '\t' + e.hash + '\t' + std::to_string(e.seed) + '\t' +
             e.version + '\t' + (e.inputs.empty() ? "-" : e.inputs) + '\n';
    }
    return out;
  }

  const std::vector<ManifestEntry>& entries() const { return entries_; }

 private:
  std::vector<ManifestEntry> entries_;
};

inline void write_atomic(const std::filesystem::path& p, std::string_view content) {
  auto tmp = p;
  tmp += ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot write " + tmp.string());
    os.write(content.data(), static_cast<std::streamsize>(content.size()));
    os.flush();
    if (!os) {
      std::filesystem::remove(tmp);
      throw DataError("write failed for " + tmp.string());
    }
  }
  std::filesystem::rename(tmp, p);
}

// One pipeline per work directory.
class WorkLock {
 public:
  explicit WorkLock(const std::filesystem::path& dir) : path_(dir / ".lock") {
    fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
    if (fd_ < 0) {
      throw ConfigError("work directory " + dir.string() + " is locked by another run (remove " +
                        path_.string() + " if it is stale)");
    }
    const auto pid = std::to_string(::getpid()) + '\n';
    [[maybe_unused]] auto n = ::write(fd_, pid.data(), pid.size());
  }
  WorkLock(const WorkLock&) = delete;
  WorkLock& operator=(const WorkLock&) = delete;
  ~WorkLock() {
    ::close(fd_);
    std::error_code ec;
    std::filesystem::remove(path_, ec);
  }

 private:
  std::filesystem::path path_;
  int fd_ = -1;
};

class Workspace {
 public:
  explicit Workspace(std::filesystem::path dir) : dir_(std::move(dir)) {
    std::filesystem::create_directories(dir_);
    lock_.emplace(dir_);
    for (const auto& e : std::filesystem::directory_iterator(dir_)) {
      if (e.path().extension() == ".tmp") std::filesystem::remove(e.path());
    }
    manifest_ = Manifest::load(dir_);
  }

  const std::filesystem::path& dir() const { return dir_; }
  const Manifest& manifest() const { return manifest_; }
  Manifest& manifest() { return manifest_; }

  bool has(std::string_view artifact) const {
    return manifest_.find(artifact) && std::filesystem::exists(dir_ / artifact);
  }

  // Contents of a recorded artifact; the file must still match its hash.
  std::string require(const std::string& artifact, const std::string& what,
                      const std::string& producer) const {
    const auto* e = manifest_.find(artifact);
    const auto p = dir_ / artifact;
    if (!e || !std::filesystem::exists(p)) {
      throw DataError(what + " missing: " + p.string() + " is not recorded in the manifest (run the " +
                      producer + " stage first)");
    }
    auto content = read_file(p);
    if (hex64(fnv1a(content)) != e->hash) {
      throw DataError(what + " changed since the " + e->stage + " stage wrote it (" + p.string() +
                      "); rerun that stage");
    }
    return content;
  }

 private:
  std::filesystem::path dir_;
  std::optional<WorkLock> lock_;
  Manifest manifest_;
};

// Collects one stage's outputs in memory and commits them together.
class StageWriter {
 public:
  StageWriter(Workspace& ws, std::string stage, std::uint64_t seed)
      : ws_(ws), stage_(std::move(stage)), seed_(seed) {}

  void input(const std::string& name, std::string_view content) {
    inputs_[name] = hex64(fnv1a(content));
  }

  void output(const std::string& artifact, std::string content) {
    outputs_[artifact] = std::move(content);
  }

  void commit() {
    std::string inputs;
    for (const auto& [name, hash] : inputs_) inputs += (inputs.empty() ? "" : ",") + name + '=' + hash;
    std::vector<ManifestEntry> entries;
    for (const auto& [artifact, content] : outputs_) {
      write_atomic(ws_.dir() / artifact, content);
      entries.push_back({stage_, artifact, hex64(fnv1a(content)), seed_, std::string(kVersion),
                         inputs});
    }
    ws_.manifest().replace_stage(stage_, std::move(entries));
    write_atomic(ws_.dir() / Manifest::kFile, ws_.manifest().serialize());
  }

 private:
  Workspace& ws_;
  std::string stage_;
  std::uint64_t seed_;
  std::map<std::string, std::string> inputs_;
  std::map<std::string, std::string> outputs_;
};

// ---------------------------------------------------------------------------
// Stages.

namespace detail {

inline constexpr std::array<std::string_view, 5> kUnhashedKeys = {
    "workdir", "interactions", "metadata", "threads", "deterministic"};

struct StageContext {
  const PipelineConfig& cfg;
  Workspace& ws;
  std::ostream& log;
};

inline void record_config(StageWriter& w, const PipelineConfig& cfg) {
  w.input("config", serialize_config(cfg, kUnhashedKeys));
}

struct LoadedData {
  Dataset data;  // graph = training graph; attributes are not reloaded
  std::vector<std::size_t> users;  // users whose sequences admit a split
};

inline LoadedData load_data(const StageContext& ctx, StageWriter& w) {
  LoadedData out;
  auto graph_text = ctx.ws.require("train_graph.hin", "training graph", "ingest");
  auto seq_text = ctx.ws.require("sequences.tsv", "interaction sequences", "ingest");
  w.input("train_graph.hin", graph_text);
  w.input("sequences.tsv", seq_text);
  std::istringstream gs(graph_text), ss(seq_text);
  out.data.graph = TypedGraph::parse(gs);
  out.data.counts = out.data.graph.counts();
  out.data.sequences = read_sequences(ss);
  const auto split_cfg = ctx.cfg.split_config();
  for (std::size_t u = 0; u < out.data.sequences.size(); ++u) {
    if (out.data.sequences[u].items.size() >=
        std::max(split_cfg.min_items, split_cfg.bridge + split_cfg.train + 1)) {
      out.users.push_back(u);
    }
  }
  return out;
}

inline EmbeddingTable load_embedding(const StageContext& ctx, StageWriter& w) {
  auto text = ctx.ws.require("embedding.tsv", "embedding table", "embed");
  w.input("embedding.tsv", text);
  std::istringstream is(text);
  return EmbeddingTable::parse(is);
}

inline PathLibrary load_paths(const StageContext& ctx, StageWriter& w, const TypedGraph& g) {
  auto text = ctx.ws.require("paths.txt", "mined paths", "explore");
  w.input("paths.txt", text);
  std::istringstream is(text);
  return read_paths(is, g);
}

inline PolicyModel load_policy(const StageContext& ctx, StageWriter& w) {
  auto text = ctx.ws.require("policy.ckpt", "policy checkpoint", "explore");
  w.input("policy.ckpt", text);
  std::istringstream is(text);
  return PolicyModel::read(is);
}

inline TmerModel load_model(const StageContext& ctx, StageWriter& w) {
  auto text = ctx.ws.require("model.ckpt", "model checkpoint", "train");
  w.input("model.ckpt", text);
  std::istringstream is(text);
  return TmerModel::read(is);
}

inline std::vector<NodeRef> chain_of(const InteractionSequence& seq, const SplitConfig& cfg) {
  auto parts = split(seq, cfg);
  auto chain = parts.bridge;
  chain.insert(chain.end(), parts.train.begin(), parts.train.end());
  return chain;
}

// (user -> chain[0]) and (chain[k-1] -> chain[k]); item transitions may not
// pass through the user.
inline std::vector<PathQuery> chain_pairs(NodeRef user, std::span<const NodeRef> chain) {
  std::vector<PathQuery> pairs{{user, chain[0], std::nullopt}};
  for (std::size_t k = 1; k < chain.size(); ++k) pairs.push_back({chain[k - 1], chain[k], user});
  return pairs;
}

inline PathSet node_paths(const PathLibrary& lib, const PathQuery& q) {
  PathSet out;
  for (const auto& p : lookup(lib, q)) out.push_back(p.nodes);
  return out;
}

// Items the user never interacted with, in id order.
inline std::vector<NodeRef> unseen_items(const InteractionSequence& seq, std::uint32_t n_items) {
  std::vector<char> known(n_items, 0);
  for (NodeRef i : seq.items) known[i.local_id] = 1;
  std::vector<NodeRef> out;
  for (std::uint32_t i = 0; i < n_items; ++i) {
    if (!known[i]) out.push_back({NodeKind::Item, i});
  }
  return out;
}

using NegativePools = std::map<std::pair<std::uint32_t, std::size_t>, std::vector<NodeRef>>;

inline std::string write_negatives(const NegativePools& pools) {
  std::string out;
  for (const auto& [key, items] : pools) {
    out += to_string({NodeKind::User, key.first}) + '\t' + std::to_string(key.second);
    for (NodeRef i : items) out += '\t' + to_string(i);
    out += '\n';
  }
  return out;
}

inline NegativePools read_negatives(std::string_view text) {
  NegativePools pools;
  std::size_t line_no = 0;
  for (auto line : split_view(text, '\n')) {
    ++line_no;
    if (line.empty()) continue;
    auto f = split_view(line, '\t');
    if (f.size() < 2) throw DataError("negatives line " + std::to_string(line_no) + ": too few fields");
    auto user = parse_node(f[0]);
    auto& items = pools[{user.local_id, parse_unsigned(f[1])}];
    for (std::size_t i = 2; i < f.size(); ++i) items.push_back(parse_node(f[i]));
  }
  return pools;
}

inline std::string render_series(std::string_view header, std::span<const double> v) {
  std::string out(header);
  out += '\n';
  for (std::size_t i = 0; i < v.size(); ++i) {
    out += std::to_string(i + 1) + '\t' + format_double(v[i]) + '\n';
  }
  return out;
}

inline std::string serialize_paths(const PathLibrary& lib) {
  std::ostringstream os;
  write_paths(os, lib);
  return os.str();
}

}  // namespace detail

inline void stage_synth(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "synth", c.stage_seed("synth"));
  detail::record_config(w, c);
  auto data = synthesize({c.synth_users, c.synth_items, c.synth_brands, c.synth_categories,
                          c.synth_length, c.synth_loyalty, c.synth_sequential,
                          c.stage_seed("synth")});
  w.output("interactions.tsv", std::move(data.interactions));
  w.output("metadata.tsv", std::move(data.metadata));
  w.output("planted.tsv", std::move(data.planted));
  w.commit();
  ctx.log << "synth: " << c.synth_users << " users, " << c.synth_items << " items, "
          << c.synth_brands << " brands\n";
}

inline void stage_ingest(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "ingest", c.stage_seed("ingest"));
  detail::record_config(w, c);
  std::string interactions, metadata;
  if (c.interactions.empty()) {
    interactions = ctx.ws.require("interactions.tsv", "interaction data", "synth");
  } else {
    interactions = read_file(c.interactions);
  }
  if (!c.metadata.empty()) {
    metadata = read_file(c.metadata);
  } else if (c.interactions.empty()) {
    metadata = ctx.ws.require("metadata.tsv", "item metadata", "synth");
  }
  w.input("interactions", interactions);
  w.input("metadata", metadata);
  std::istringstream is(interactions), ms(metadata);
  Dataset data = ingest(is, ms, IngestOptions{c.min_interactions});
  const auto train_graph = build_training_graph(data, c.split_config());
  std::ostringstream seqs, ids;
  write_sequences(seqs, data.sequences);
  data.ids.write(ids);
  w.output("graph.hin", data.graph.serialize());
  w.output("train_graph.hin", train_graph.serialize());
  w.output("sequences.tsv", seqs.str());
  w.output("idmap.tsv", ids.str());
  w.commit();
  ctx.log << "ingest: " << data.counts[NodeKind::User] << " users, "
          << data.counts[NodeKind::Item] << " items, " << data.graph.edge_count() << " edges\n";
}

inline void stage_embed(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "embed", c.stage_seed("embed"));
  detail::record_config(w, c);
  auto graph_text = ctx.ws.require("train_graph.hin", "training graph", "ingest");
  w.input("train_graph.hin", graph_text);
  std::istringstream gs(graph_text);
  const auto g = TypedGraph::parse(gs);
  auto corpus = generate_walks(g, c.walk_options());
  auto result = train_skipgram(g.counts(), corpus, c.skipgram_options());
  init_attribute_vectors(result.table, g);
  std::ostringstream emb;
  result.table.write(emb);
  w.output("embedding.tsv", emb.str());
  w.output("embed_loss.tsv", detail::render_series("epoch\tloss", result.epoch_loss));
  w.commit();
  ctx.log << "embed: " << corpus.walks.size() << " walks, dim " << c.dim << ", final loss "
          << (result.epoch_loss.empty() ? 0.0 : result.epoch_loss.back()) << '\n';
}

inline void stage_explore(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "explore", c.stage_seed("explore"));
  detail::record_config(w, c);
  auto loaded = detail::load_data(ctx, w);
  const auto& g = loaded.data.graph;
  const auto table = detail::load_embedding(ctx, w);
  const auto split_cfg = c.split_config();

  std::vector<PathQuery> train_pairs, all_pairs;
  detail::NegativePools pools;
  for (std::size_t u : loaded.users) {
    const auto& seq = loaded.data.sequences[u];
    const auto chain = detail::chain_of(seq, split_cfg);
    for (auto p : detail::chain_pairs(seq.user, chain)) train_pairs.push_back(p);
    auto unseen = detail::unseen_items(seq, g.counts()[NodeKind::Item]);
    for (std::size_t k = split_cfg.bridge; k < chain.size(); ++k) {
      Rng rng(mix_seed(c.stage_seed("pool"), seq.user.local_id, k));
      auto pool = unseen;
      const auto take = std::min(c.negative_pool, pool.size());
      for (std::size_t i = 0; i < take; ++i) {
        std::swap(pool[i], pool[i + uniform_index(rng, pool.size() - i)]);
      }
      pool.resize(take);
      for (NodeRef n : pool) all_pairs.push_back({chain[k - 1], n, seq.user});
      pools[{seq.user.local_id, k}] = std::move(pool);
    }
  }
  all_pairs.insert(all_pairs.end(), train_pairs.begin(), train_pairs.end());

  auto policy = PolicyModel::identity(table.dim(), c.max_steps, c.k_actions);
  auto plog = train_policy(g, table, policy, train_pairs, c.policy_options());
  PolicyScorer scorer(g, table, policy);
  auto lib = mine_paths(scorer, all_pairs, c.mine_options());

  std::ostringstream pol;
  policy.write(pol);
  w.output("policy.ckpt", pol.str());
  w.output("policy_log.tsv", detail::render_series("batch\tmean_reward", plog.batch_reward));
  w.output("paths.txt", detail::serialize_paths(lib));
  w.output("negatives.tsv", detail::write_negatives(pools));
  w.commit();
  std::size_t found = 0;
  for (const auto& [pair, paths] : lib) found += !paths.empty();
  ctx.log << "explore: " << lib.size() << " pairs, " << found << " with paths, final batch reward "
          << (plog.batch_reward.empty() ? 0.0 : plog.batch_reward.back()) << '\n';
}

inline std::vector<UserExample> build_examples(const detail::LoadedData& loaded,
                                               const SplitConfig& split_cfg,
                                               const PathLibrary& lib,
                                               const detail::NegativePools& pools) {
  std::vector<UserExample> out;
  std::size_t empty = 0, total = 0;
  for (std::size_t u : loaded.users) {
    const auto& seq = loaded.data.sequences[u];
    UserExample ex;
    ex.user = seq.user;
    ex.chain = detail::chain_of(seq, split_cfg);
    for (auto p : detail::chain_pairs(seq.user, ex.chain)) {
      ex.chain_paths.push_back(detail::node_paths(lib, p));
      empty += ex.chain_paths.back().empty();
      ++total;
    }
    for (std::size_t k = split_cfg.bridge; k < ex.chain.size(); ++k) {
      auto it = pools.find({seq.user.local_id, k});
      if (it == pools.end() || it->second.empty()) continue;
      TrainTarget t;
      t.position = k;
      for (NodeRef n : it->second) {
        t.negative_pool.push_back({n, detail::node_paths(lib, {ex.chain[k - 1], n, seq.user})});
      }
      ex.targets.push_back(std::move(t));
    }
    out.push_back(std::move(ex));
  }
  if (empty > 0) {
    diag::warn(std::to_string(empty) + " of " + std::to_string(total) +
               " chain transitions have no mined paths; they use a zero path context");
  }
  return out;
}

inline void stage_train(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "train", c.stage_seed("train"));
  detail::record_config(w, c);
  auto loaded = detail::load_data(ctx, w);
  auto table = detail::load_embedding(ctx, w);
  const auto lib = detail::load_paths(ctx, w, loaded.data.graph);
  auto neg_text = ctx.ws.require("negatives.tsv", "negative pools", "explore");
  w.input("negatives.tsv", neg_text);
  const auto pools = detail::read_negatives(neg_text);

  if (c.refine_epochs > 0) {
    std::vector<std::vector<NodeRef>> sentences;
    for (const auto& [pair, paths] : lib) {
      for (const auto& p : paths) sentences.push_back(p.nodes);
    }
    table = train_skipgram(table.counts(), sentences, c.refine_options(), &table).table;
  }
  auto examples = build_examples(loaded, c.split_config(), lib, pools);
  Rng rng(mix_seed(c.stage_seed("train"), 0x696e6974ULL));
  auto model = TmerModel::init(std::move(table), c.model_options(), rng);
  auto tlog = train(model, examples, c.train_config());

  std::ostringstream ckpt;
  model.write(ckpt);
  w.output("model.ckpt", ckpt.str());
  w.output("loss.tsv", detail::render_series("epoch\tloss", tlog.epoch_loss));
  w.output("train_config.txt", serialize_config(c, detail::kUnhashedKeys));
  w.commit();
  ctx.log << "train: " << examples.size() << " users, " << c.epochs << " epochs, final loss "
          << (tlog.epoch_loss.empty() ? 0.0 : tlog.epoch_loss.back()) << '\n';
}

struct EvalOutcome {
  EvalReport model;
  EvalReport popularity;
};

inline EvalOutcome stage_eval(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "eval", c.stage_seed("eval"));
  detail::record_config(w, c);
  auto loaded = detail::load_data(ctx, w);
  const auto& g = loaded.data.graph;
  const auto policy_table = detail::load_embedding(ctx, w);
  const auto policy = detail::load_policy(ctx, w);
  const auto lib = detail::load_paths(ctx, w, g);
  const auto model = detail::load_model(ctx, w);
  const auto split_cfg = c.split_config();
  const auto ecfg = c.eval_config();

  auto instances = sample_eval_instances(loaded.data, g, split_cfg, ecfg);
  std::map<std::uint32_t, std::vector<NodeRef>> chains;
  for (std::size_t u : loaded.users) {
    const auto& seq = loaded.data.sequences[u];
    chains[seq.user.local_id] = detail::chain_of(seq, split_cfg);
  }
  std::vector<PathQuery> pairs;
  for (const auto& inst : instances) {
    const NodeRef last = chains.at(inst.user.local_id).back();
    pairs.push_back({last, inst.positive, inst.user});
    for (NodeRef n : inst.negatives) pairs.push_back({last, n, inst.user});
  }
  auto mine = c.mine_options();
  mine.episodes_per_pair = c.eval_episodes_per_pair;
  mine.seed = c.stage_seed("eval-mine");
  const auto eval_lib = mine_paths(PolicyScorer(g, policy_table, policy), pairs, mine);
  std::size_t pos_found = 0, neg_found = 0, neg_total = 0;
  for (const auto& inst : instances) {
    const NodeRef last = chains.at(inst.user.local_id).back();
    pos_found += !lookup(eval_lib, {last, inst.positive, inst.user}).empty();
    for (NodeRef n : inst.negatives) neg_found += !lookup(eval_lib, {last, n, inst.user}).empty();
    neg_total += inst.negatives.size();
  }
  ctx.log << "eval: paths found for " << format_fixed(100.0 * pos_found / std::max<std::size_t>(1, instances.size()), 1)
          << "% of positives and " << format_fixed(100.0 * neg_found / std::max<std::size_t>(1, neg_total), 1)
          << "% of negatives\n";

  std::map<std::uint32_t, std::unique_ptr<CandidateScorer>> scorers;
  auto examples = build_examples(loaded, split_cfg, lib, {});
  for (auto& ex : examples) {
    const auto id = ex.user.local_id;
    scorers[id] = std::make_unique<CandidateScorer>(model, std::move(ex));
  }
  BatchScorer tmer = [&](NodeRef user, std::span<const NodeRef> items) {
    const auto& scorer = *scorers.at(user.local_id);
    const NodeRef last = chains.at(user.local_id).back();
    std::vector<double> s;
    for (NodeRef i : items) s.push_back(scorer(i, detail::node_paths(eval_lib, {last, i, user})));
    return s;
  };
  const auto pop_scores = popularity_scores(g, c.stage_seed("popularity"));
  BatchScorer pop = [&](NodeRef, std::span<const NodeRef> items) {
    std::vector<double> s;
    for (NodeRef i : items) s.push_back(pop_scores[i.local_id]);
    return s;
  };
  const auto universe = g.counts()[NodeKind::Item];
  EvalOutcome out{evaluate(instances, tmer, ecfg, universe),
                  evaluate(instances, pop, ecfg, universe)};

  std::vector<std::pair<std::string, EvalReport>> cols = {{"TMER-RL", out.model},
                                                          {"Popularity", out.popularity}};
  std::string metrics = "model\tmetric\tvalue\n";
  for (const auto& [name, rep] : cols) {
    for (std::size_t i = 0; i < rep.ks.size(); ++i) {
      metrics += name + "\tHR@" + std::to_string(rep.ks[i]) + '\t' + format_double(rep.hr[i]) + '\n';
      metrics += name + "\tNDCG@" + std::to_string(rep.ks[i]) + '\t' + format_double(rep.ndcg[i]) +
                 '\n';
    }
  }
  std::ostringstream ranks;
  write_ranks(ranks, out.model);
  w.output("report.txt", render_report_table(cols));
  w.output("metrics.tsv", metrics);
  w.output("ranks.tsv", ranks.str());
  w.commit();
  ctx.log << render_report_table(cols);
  return out;
}

inline void stage_explain(const detail::StageContext& ctx) {
  const auto& c = ctx.cfg;
  StageWriter w(ctx.ws, "explain", c.stage_seed("explain"));
  detail::record_config(w, c);
  auto loaded = detail::load_data(ctx, w);
  const auto lib = detail::load_paths(ctx, w, loaded.data.graph);
  const auto model = detail::load_model(ctx, w);
  const auto split_cfg = c.split_config();

  std::vector<ExplanationRecord> records;
  std::size_t users = 0;
  for (std::size_t u : loaded.users) {
    if (c.explain_users > 0 && users++ >= c.explain_users) break;
    const auto& seq = loaded.data.sequences[u];
    const auto chain = detail::chain_of(seq, split_cfg);
    for (std::size_t k = 1; k < chain.size(); ++k) {
      const auto& mined = lookup(lib, {chain[k - 1], chain[k], seq.user});
      records.push_back(explain_transition(seq.user, chain[k - 1], chain[k], model, mined,
                                           c.explain_top));
    }
  }
  const auto schemes = summarize_schemes(records);
  w.output("explanations.jsonl", render_records(records, ReportFormat::Structured));
  w.output("explanations.txt", render_records(records, ReportFormat::Text));
  w.output("schemes.txt", render(schemes, ReportFormat::Text));
  w.commit();
  std::size_t empty = 0;
  for (const auto& r : records) empty += r.no_evidence();
  ctx.log << "explain: " << records.size() << " transitions, " << empty << " without evidence, "
          << schemes.size() << " schemes\n";
}

// Runs one stage, or the whole chain for "all" (with synth first when no
// interaction file is configured).
inline void run_stage(std::string_view stage, const PipelineConfig& cfg,
                      std::ostream& log = std::cerr) {
  cfg.validate();
  if (stage != "all") stage_rank(stage);
  Workspace ws(cfg.workdir);
  detail::StageContext ctx{cfg, ws, log};
  auto run_one = [&](std::string_view s) {
    if (s == "synth") stage_synth(ctx);
    else if (s == "ingest") stage_ingest(ctx);
    else if (s == "embed") stage_embed(ctx);
    else if (s == "explore") stage_explore(ctx);
    else if (s == "train") stage_train(ctx);
    else if (s == "eval") stage_eval(ctx);
    else if (s == "explain") stage_explain(ctx);
  };
  if (stage != "all") return run_one(stage);
  for (auto s : kStages) {
    if (s == "synth" && !cfg.interactions.empty()) continue;
    run_one(s);
  }
}

}  // namespace tmer
