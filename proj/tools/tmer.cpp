// tmer: command-line driver for the recommendation pipeline.
//
//   tmer synth --users 200 --items 400 --brands 10 --workdir w
//   tmer run all --seed 7 --deterministic --workdir w
//   tmer eval --neg 500 --k 1,5,10,20 --workdir w
//
// Settings come from defaults, then --config FILE, then flags (flags win).
// Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.

#include "tmer/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

struct Flag {
  const char* name;  // CLI spelling
  const char* key;   // config key
  const char* help;
};

// Flags that take a value, per subcommand.
const std::map<std::string, std::vector<Flag>>& stage_flags() {
  static const std::map<std::string, std::vector<Flag>> flags = {
      {"synth",
       {{"--users", "synth_users", "number of users"},
        {"--items", "synth_items", "number of items"},
        {"--brands", "synth_brands", "number of brands"},
        {"--categories", "synth_categories", "number of categories"},
        {"--length", "synth_length", "purchases per user"},
        {"--loyalty", "synth_loyalty", "probability a purchase is from the planted brand"},
        {"--sequential", "synth_sequential", "probability a purchase repeats the previous category"}}},
      {"ingest",
       {{"--interactions", "interactions", "user<TAB>item<TAB>timestamp file"},
        {"--metadata", "metadata", "item<TAB>brand<TAB>category file"},
        {"--min-interactions", "min_interactions", "drop users with fewer interactions"}}},
      {"embed",
       {{"--dim", "dim", "embedding dimension"},
        {"--walks", "walks_per_node", "walks per user/item node"},
        {"--walk-len", "walk_length", "walk length"},
        {"--window", "window", "skip-gram window"},
        {"--neg", "sg_negatives", "negative samples per pair"},
        {"--epochs", "sg_epochs", "skip-gram epochs"},
        {"--lr", "sg_lr", "initial skip-gram learning rate"}}},
      {"explore",
       {{"--max-len", "max_steps", "maximum path length T"},
        {"--k-actions", "k_actions", "actions kept after pruning"},
        {"--episodes", "episodes_per_pair", "mining episodes per node pair"},
        {"--top-q", "top_q", "paths kept per node pair"},
        {"--policy-episodes", "policy_episodes", "REINFORCE training episodes"},
        {"--policy-lr", "policy_lr", "REINFORCE learning rate"},
        {"--negative-pool", "negative_pool", "negative candidates mined per training target"}}},
      {"train",
       {{"--lr", "lr", "learning rate"},
        {"--epochs", "epochs", "training epochs"},
        {"--neg", "negatives_per_positive", "negatives per positive"},
        {"--optimizer", "optimizer", "sgd or adam"},
        {"--heads", "heads", "attention heads"},
        {"--prev-item", "prev_item", "predecessor fed to the item update: updated or raw"}}},
      {"eval",
       {{"--neg", "eval_negatives", "sampled negatives per test item"},
        {"--k", "ks", "comma-separated cutoffs"},
        {"--episodes", "eval_episodes_per_pair", "mining episodes per candidate pair"}}},
      {"explain",
       {{"--top", "explain_top", "paths per transition"},
        {"--users", "explain_users", "explain the first N users (0 = all)"}}},
  };
  return flags;
}

// Boolean switches: flag -> (config key, value to set).
const std::map<std::string, std::vector<std::tuple<const char*, const char*, const char*, const char*>>>&
stage_switches() {
  static const std::map<std::string,
                        std::vector<std::tuple<const char*, const char*, const char*, const char*>>>
      sw = {
          {"train",
           {{"--freeze-embeddings", "fine_tune_embeddings", "false", "keep embeddings fixed"},
            {"--negative-only", "positive_term", "false", "drop the positive loss term"},
            {"--no-user-item-paths", "use_user_item_paths", "false", "ablate user-item paths"},
            {"--no-item-item-paths", "use_item_item_paths", "false", "ablate item-item paths"}}},
          {"eval", {{"--corrected", "corrected", "true", "map sampled ranks to full-universe ranks"}}},
      };
  return sw;
}

int exit_code_for(const std::exception& e) {
  if (dynamic_cast<const tmer::ConfigError*>(&e)) return 1;
  if (dynamic_cast<const tmer::NumericError*>(&e)) return 3;
  return 2;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Explainable sequential recommendation over typed purchase graphs"};
  app.require_subcommand(1);
  app.fallthrough();

  std::string config_file, workdir, run_target;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> threads;
  bool deterministic = false;
  std::vector<std::pair<std::string, std::string>> overrides;  // key, value in flag order
  std::vector<std::string> sets;

  app.add_option("--config", config_file, "key=value config file")->check(CLI::ExistingFile);
  app.add_option("--workdir", workdir, "work directory");
  app.add_option("--seed", seed, "global seed");
  app.add_option("--threads", threads, "worker threads for path mining");
  app.add_flag("--deterministic", deterministic, "single-threaded, reproducible run");
  app.add_option("--set", sets, "override any config key (key=value)");

  std::map<std::string, CLI::App*> subs;
  std::map<std::string, std::map<std::string, std::string>> values;
  std::map<std::string, std::map<std::string, bool>> switches;
  for (std::string_view s : tmer::kStages) {
    const std::string name(s);
    auto* sub = app.add_subcommand(name, "run the " + name + " stage");
    subs[name] = sub;
    if (auto it = stage_flags().find(name); it != stage_flags().end()) {
      for (const auto& f : it->second) sub->add_option(f.name, values[name][f.key], f.help);
    }
    if (auto it = stage_switches().find(name); it != stage_switches().end()) {
      for (const auto& [flag, key, value, help] : it->second) {
        sub->add_flag(flag, switches[name][flag], help);
      }
    }
  }
  auto* run = app.add_subcommand("run", "run one stage or all stages in order");
  run->add_option("stage", run_target, "synth|ingest|embed|explore|train|eval|explain|all")
      ->required();
  auto* show = app.add_subcommand("config", "print the effective configuration");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 1;
  }

  try {
    tmer::PipelineConfig cfg;
    if (!config_file.empty()) cfg = tmer::load_config(config_file);
    for (const auto& s : sets) {
      auto eq = s.find('=');
      if (eq == std::string::npos) throw tmer::ConfigError("--set expects key=value, got " + s);
      tmer::set_config_value(cfg, s.substr(0, eq), s.substr(eq + 1));
    }
    if (!workdir.empty()) cfg.workdir = workdir;
    if (seed) cfg.seed = *seed;
    if (threads) cfg.threads = *threads;
    if (deterministic) cfg.deterministic = true;

    std::string stage;
    for (auto& [name, sub] : subs) {
      if (!sub->parsed()) continue;
      stage = name;
      if (auto it = stage_flags().find(name); it != stage_flags().end()) {
        for (const auto& f : it->second) {
          if (sub->count(f.name) > 0) tmer::set_config_value(cfg, f.key, values[name][f.key]);
        }
      }
      if (auto it = stage_switches().find(name); it != stage_switches().end()) {
        for (const auto& [flag, key, value, help] : it->second) {
          if (switches[name][flag]) tmer::set_config_value(cfg, key, value);
        }
      }
    }
    if (show->parsed()) {
      std::cout << tmer::serialize_config(cfg);
      return 0;
    }
    if (run->parsed()) stage = run_target;
    tmer::run_stage(stage, cfg, std::cerr);
    return 0;
  } catch (const std::exception& e) {
    std::cerr << "tmer: error: " << e.what() << '\n';
    return exit_code_for(e);
  }
}
