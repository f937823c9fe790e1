#include "fedstil/cli.hpp"

#include <charconv>
#include <cstdio>
#include <filesystem>
#include <iostream>

#include "CLI11.hpp"
#include "fedstil/config.hpp"
#include "fedstil/report.hpp"
#include "fedstil/runner.hpp"

namespace fedstil {

namespace {

std::vector<std::string> split_list(const std::string& text) {
  std::vector<std::string> items;
  std::size_t start = 0;
  while (start <= text.size()) {
    std::size_t comma = text.find(',', start);
    if (comma == std::string::npos) {
      items.push_back(text.substr(start));
      break;
    }
    items.push_back(text.substr(start, comma - start));
    start = comma + 1;
  }
  return items;
}

// "1..5" expands to 1,2,3,4,5; otherwise a comma list of integers.
std::vector<std::uint64_t> parse_seeds(const std::string& text) {
  auto parse_u64 = [&text](const std::string& s) {
    std::uint64_t v = 0;
    auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) {
      throw ConfigError("bad seed '" + s + "' in --seeds " + text);
    }
    return v;
  };
  std::size_t dots = text.find("..");
  if (dots != std::string::npos) {
    std::uint64_t lo = parse_u64(text.substr(0, dots));
    std::uint64_t hi = parse_u64(text.substr(dots + 2));
    if (hi < lo) throw ConfigError("--seeds range is empty: " + text);
    std::vector<std::uint64_t> seeds;
    for (std::uint64_t s = lo; s <= hi; ++s) seeds.push_back(s);
    return seeds;
  }
  std::vector<std::uint64_t> seeds;
  for (const auto& item : split_list(text)) seeds.push_back(parse_u64(item));
  return seeds;
}

ExperimentConfig load_for_cli(const std::string& config_path, const std::string& strategy,
                              bool seed_set, std::uint64_t seed, const std::string& out) {
  if (!std::filesystem::exists(config_path)) {
    throw ConfigError("config file not found: " + config_path);
  }
  ExperimentConfig cfg = load_config_file(config_path);
  if (!strategy.empty()) cfg.strategy = strategy_from_name(strategy);
  if (seed_set) {
    cfg.seed = seed;
    if (!cfg.stream_seed_pinned) cfg.stream.seed = seed;
  }
  if (!out.empty()) cfg.out_dir = out;
  cfg.validate();
  return cfg;
}

int do_run(const std::string& config_path, const std::string& strategy, bool seed_set,
           std::uint64_t seed, const std::string& out, const std::string& resume) {
  ExperimentConfig cfg = load_for_cli(config_path, strategy, seed_set, seed, out);
  RunOutputs outputs = run_experiment(cfg, resume);
  RunReport report = summarize_metrics_csv(outputs.metrics_csv.string());
  std::printf("run complete: strategy=%s seed=%llu rounds=%d avg_mAP=%.4f out=%s\n",
              strategy_name(cfg.strategy),
              static_cast<unsigned long long>(cfg.seed), cfg.stream.num_rounds,
              report.avg_map, outputs.out_dir.string().c_str());
  return 0;
}

int do_sweep(const std::string& config_path, const std::string& strategies_text,
             const std::string& seeds_text, const std::string& out) {
  std::vector<std::string> strategies = split_list(strategies_text);
  std::vector<std::uint64_t> seeds = parse_seeds(seeds_text);
  if (strategies.empty()) throw ConfigError("--strategies is empty");
  if (seeds.empty()) throw ConfigError("--seeds is empty");

  for (const auto& strategy : strategies) {
    for (std::uint64_t seed : seeds) {
      ExperimentConfig cfg = load_for_cli(config_path, strategy, true, seed, "");
      std::filesystem::path base = out.empty() ? cfg.out_dir : out;
      cfg.out_dir = (base / (strategy + "_seed" + std::to_string(seed))).string();
      RunOutputs outputs = run_experiment(cfg);
      RunReport report = summarize_metrics_csv(outputs.metrics_csv.string());
      std::printf("sweep: strategy=%-22s seed=%-4llu avg_mAP=%.4f\n", strategy.c_str(),
                  static_cast<unsigned long long>(seed), report.avg_map);
    }
  }
  return 0;
}

int do_validate(const std::string& config_path) {
  if (!std::filesystem::exists(config_path)) {
    throw ConfigError("config file not found: " + config_path);
  }
  ExperimentConfig cfg = load_config_file(config_path);
  cfg.validate();
  std::printf("config ok: %s (strategy=%s, %d clients, %d rounds)\n",
              config_path.c_str(), strategy_name(cfg.strategy), cfg.stream.num_clients,
              cfg.stream.num_rounds);
  return 0;
}

}  // namespace

int cli_main(int argc, const char* const* argv) {
  CLI::App app{"fedstil: federated lifelong person re-identification simulator"};
  app.require_subcommand(1);

  std::string config_path, strategy, out, resume;
  std::uint64_t seed = 0;
  bool seed_set = false;

  auto* run = app.add_subcommand("run", "run one experiment");
  run->add_option("--config", config_path, "experiment config file")->required();
  run->add_option("--strategy", strategy, "override [experiment] strategy");
  run->add_option("--seed", seed, "override [experiment] seed")
      ->each([&seed_set](const std::string&) { seed_set = true; });
  run->add_option("--out", out, "override output directory");
  run->add_option("--resume", resume, "resume from a checkpoint.bin");

  std::string strategies_text, seeds_text;
  auto* sweep = app.add_subcommand("sweep", "run a strategy x seed grid");
  sweep->add_option("--config", config_path, "experiment config file")->required();
  sweep->add_option("--strategies", strategies_text, "comma list of strategies")->required();
  sweep->add_option("--seeds", seeds_text, "comma list or lo..hi range")->required();
  sweep->add_option("--out", out, "base output directory");

  std::string in_dir;
  auto* report = app.add_subcommand("report", "aggregate metrics.csv files");
  report->add_option("--in", in_dir, "directory containing run outputs")->required();

  auto* validate = app.add_subcommand("validate", "check a config file");
  validate->add_option("--config", config_path, "experiment config file")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n" << app.help() << std::flush;
    return 2;
  }

  try {
    if (run->parsed()) return do_run(config_path, strategy, seed_set, seed, out, resume);
    if (sweep->parsed()) return do_sweep(config_path, strategies_text, seeds_text, out);
    if (report->parsed()) {
      run_report(in_dir);
      return 0;
    }
    if (validate->parsed()) return do_validate(config_path);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}

int cli_main(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("fedstil");
  for (const auto& arg : args) argv.push_back(arg.c_str());
  return cli_main(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fedstil
