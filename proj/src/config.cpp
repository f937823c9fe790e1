#include "fedstil/config.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

namespace fedstil {

const char* strategy_name(Strategy s) {
  switch (s) {
    case Strategy::fedstil: return "fedstil";
    case Strategy::fedavg: return "fedavg";
    case Strategy::local: return "local";
    case Strategy::fedstil_no_st: return "fedstil_no_st";
    case Strategy::fedstil_no_rehearsal: return "fedstil_no_rehearsal";
    case Strategy::fedstil_no_tying: return "fedstil_no_tying";
  }
  return "fedstil";
}

Strategy strategy_from_name(const std::string& name) {
  if (name == "fedstil") return Strategy::fedstil;
  if (name == "fedavg") return Strategy::fedavg;
  if (name == "local") return Strategy::local;
  if (name == "fedstil_no_st") return Strategy::fedstil_no_st;
  if (name == "fedstil_no_rehearsal") return Strategy::fedstil_no_rehearsal;
  if (name == "fedstil_no_tying") return Strategy::fedstil_no_tying;
  throw ConfigError("unknown strategy '" + name +
                    "' (expected fedstil, fedavg, local, fedstil_no_st, "
                    "fedstil_no_rehearsal or fedstil_no_tying)");
}

void ExperimentConfig::validate() const {
  stream.validate();
  if (shapes.proto_dim == 0 || shapes.hidden_dim == 0 || shapes.num_labels == 0) {
    throw ConfigError("shapes: all dimensions must be positive");
  }
  if (shapes.num_labels < static_cast<std::size_t>(stream.num_identities)) {
    throw ConfigError("shapes: num_labels must cover every stream identity");
  }
  if (training.epochs < 0) throw ConfigError("training: epochs must be non-negative");
  if (training.batch_size < 1) throw ConfigError("training: batch_size must be positive");
  if (!(training.lr > 0.0)) throw ConfigError("training: lr must be positive");
  if (training.weight_decay < 0.0) throw ConfigError("training: weight_decay negative");
  if (training.patience < 1) throw ConfigError("training: patience must be positive");
  if (training.tie_weight < 0.0) throw ConfigError("training: tie_weight negative");
  if (training.rehearsal_fraction < 0.0 || training.rehearsal_fraction >= 1.0) {
    throw ConfigError("training: rehearsal_fraction must be in [0, 1)");
  }
  if (!(server.lambda_f > 0.0) || !(server.lambda_f < 1.0)) {
    throw ConfigError("server: lambda_f must be in (0, 1)");
  }
  if (server.window < 0) throw ConfigError("server: window must be non-negative");
  if (!(server.temperature > 0.0)) throw ConfigError("server: temperature must be positive");
  if (memory.budget < 1) throw ConfigError("memory: budget must be positive");
  if (memory.per_identity_quota < 1) {
    throw ConfigError("memory: per_identity_quota must be positive");
  }
  if (eval_stride < 1) throw ConfigError("experiment: eval_stride must be positive");
}

ExperimentConfig default_config() { return ExperimentConfig{}; }

namespace {

using SectionMap = std::map<std::string, std::map<std::string, std::string>>;

std::string trim(const std::string& text) {
  std::size_t begin = text.find_first_not_of(" \t\r");
  if (begin == std::string::npos) return "";
  std::size_t end = text.find_last_not_of(" \t\r");
  return text.substr(begin, end - begin + 1);
}

SectionMap parse_sections(const std::string& text) {
  SectionMap sections;
  std::istringstream in(text);
  std::string line;
  std::string section;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::size_t hash = line.find('#');
    if (hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    if (line.front() == '[') {
      if (line.back() != ']') {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated section header");
      }
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty()) {
        throw ConfigError("config line " + std::to_string(line_no) + ": empty section");
      }
      sections[section];
      continue;
    }
    std::size_t eq = line.find('=');
    if (eq == std::string::npos) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": expected key = value");
    }
    if (section.empty()) {
      throw ConfigError("config line " + std::to_string(line_no) +
                        ": key outside any [section]");
    }
    sections[section][trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return sections;
}

std::string env_key(const std::string& section, const std::string& key) {
  std::string name = "FEDSTIL_" + section + "_" + key;
  std::transform(name.begin(), name.end(), name.begin(),
                 [](unsigned char c) { return static_cast<char>(std::toupper(c)); });
  return name;
}

class Reader {
 public:
  explicit Reader(SectionMap sections) : sections_(std::move(sections)) {}

  bool lookup(const std::string& section, const std::string& key, std::string& out) {
    seen_[section].insert(key);
    if (const char* env = std::getenv(env_key(section, key).c_str())) {
      out = env;
      return true;
    }
    auto sec = sections_.find(section);
    if (sec == sections_.end()) return false;
    auto it = sec->second.find(key);
    if (it == sec->second.end()) return false;
    out = it->second;
    return true;
  }

  bool get(const std::string& section, const std::string& key, std::string& value) {
    return lookup(section, key, value);
  }

  bool get(const std::string& section, const std::string& key, int& value) {
    std::string text;
    if (!lookup(section, key, text)) return false;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw ConfigError(section + "." + key + ": expected integer, got '" + text + "'");
    }
    return true;
  }

  bool get(const std::string& section, const std::string& key, std::uint64_t& value) {
    std::string text;
    if (!lookup(section, key, text)) return false;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw ConfigError(section + "." + key + ": expected unsigned integer, got '" +
                        text + "'");
    }
    return true;
  }

  bool get(const std::string& section, const std::string& key, double& value) {
    std::string text;
    if (!lookup(section, key, text)) return false;
    auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || ptr != text.data() + text.size()) {
      throw ConfigError(section + "." + key + ": expected real, got '" + text + "'");
    }
    return true;
  }

  bool get(const std::string& section, const std::string& key, bool& value) {
    std::string text;
    if (!lookup(section, key, text)) return false;
    if (text == "true" || text == "1") {
      value = true;
    } else if (text == "false" || text == "0") {
      value = false;
    } else {
      throw ConfigError(section + "." + key + ": expected true/false, got '" + text + "'");
    }
    return true;
  }

  // Every file key must have been consumed by one of the get() calls.
  void reject_unknown() const {
    for (const auto& [section, keys] : sections_) {
      auto seen = seen_.find(section);
      if (seen == seen_.end()) {
        throw ConfigError("unknown config section [" + section + "]");
      }
      for (const auto& [key, value] : keys) {
        if (!seen->second.count(key)) {
          throw ConfigError("unknown config key " + section + "." + key);
        }
      }
    }
  }

 private:
  SectionMap sections_;
  std::map<std::string, std::set<std::string>> seen_;
};

}  // namespace

ExperimentConfig parse_config_text(const std::string& text) {
  Reader reader(parse_sections(text));
  ExperimentConfig cfg = default_config();

  reader.get("stream", "num_clients", cfg.stream.num_clients);
  reader.get("stream", "num_rounds", cfg.stream.num_rounds);
  reader.get("stream", "num_identities", cfg.stream.num_identities);
  reader.get("stream", "raw_dim", cfg.stream.raw_dim);
  reader.get("stream", "samples_per_identity_per_round",
             cfg.stream.samples_per_identity_per_round);
  reader.get("stream", "move_prob", cfg.stream.move_prob);
  reader.get("stream", "domain_shift_scale", cfg.stream.domain_shift_scale);
  reader.get("stream", "noise_scale", cfg.stream.noise_scale);
  reader.get("stream", "query_fraction", cfg.stream.query_fraction);
  cfg.stream_seed_pinned = reader.get("stream", "seed", cfg.stream.seed);

  reader.get("shapes", "proto_dim", cfg.shapes.proto_dim);
  reader.get("shapes", "hidden_dim", cfg.shapes.hidden_dim);
  reader.get("shapes", "num_labels", cfg.shapes.num_labels);

  reader.get("training", "epochs", cfg.training.epochs);
  reader.get("training", "batch_size", cfg.training.batch_size);
  reader.get("training", "lr", cfg.training.lr);
  reader.get("training", "weight_decay", cfg.training.weight_decay);
  reader.get("training", "patience", cfg.training.patience);
  reader.get("training", "tie_weight", cfg.training.tie_weight);
  reader.get("training", "rehearsal_fraction", cfg.training.rehearsal_fraction);
  reader.get("training", "freeze_alpha", cfg.training.freeze_alpha);

  reader.get("server", "lambda_f", cfg.server.lambda_f);
  reader.get("server", "window", cfg.server.window);
  reader.get("server", "temperature", cfg.server.temperature);
  reader.get("server", "include_self", cfg.server.include_self);

  reader.get("memory", "budget", cfg.memory.budget);
  reader.get("memory", "per_identity_quota", cfg.memory.per_identity_quota);

  std::string strategy;
  if (reader.get("experiment", "strategy", strategy)) {
    cfg.strategy = strategy_from_name(strategy);
  }
  reader.get("experiment", "eval_stride", cfg.eval_stride);
  bool seed_set = reader.get("experiment", "seed", cfg.seed);
  reader.get("experiment", "out_dir", cfg.out_dir);

  reader.reject_unknown();
  if (seed_set && !cfg.stream_seed_pinned) cfg.stream.seed = cfg.seed;
  cfg.validate();
  return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::ostringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
  auto real = [](double x) {
    char buf[64];
    // shortest text that parses back to the same double
    auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    return std::string(buf, ptr);
  };
  std::ostringstream out;
  out << "[stream]\n"
      << "num_clients = " << cfg.stream.num_clients << '\n'
      << "num_rounds = " << cfg.stream.num_rounds << '\n'
      << "num_identities = " << cfg.stream.num_identities << '\n'
      << "raw_dim = " << cfg.stream.raw_dim << '\n'
      << "samples_per_identity_per_round = " << cfg.stream.samples_per_identity_per_round
      << '\n'
      << "move_prob = " << real(cfg.stream.move_prob) << '\n'
      << "domain_shift_scale = " << real(cfg.stream.domain_shift_scale) << '\n'
      << "noise_scale = " << real(cfg.stream.noise_scale) << '\n'
      << "query_fraction = " << real(cfg.stream.query_fraction) << '\n';
  // The stream follows the experiment seed unless explicitly pinned apart.
  if (cfg.stream.seed != cfg.seed) out << "seed = " << cfg.stream.seed << '\n';
  out << '\n'
      << "[shapes]\n"
      << "proto_dim = " << cfg.shapes.proto_dim << '\n'
      << "hidden_dim = " << cfg.shapes.hidden_dim << '\n'
      << "num_labels = " << cfg.shapes.num_labels << '\n'
      << '\n'
      << "[training]\n"
      << "epochs = " << cfg.training.epochs << '\n'
      << "batch_size = " << cfg.training.batch_size << '\n'
      << "lr = " << real(cfg.training.lr) << '\n'
      << "weight_decay = " << real(cfg.training.weight_decay) << '\n'
      << "patience = " << cfg.training.patience << '\n'
      << "tie_weight = " << real(cfg.training.tie_weight) << '\n'
      << "rehearsal_fraction = " << real(cfg.training.rehearsal_fraction) << '\n'
      << "freeze_alpha = " << (cfg.training.freeze_alpha ? "true" : "false") << '\n'
      << '\n'
      << "[server]\n"
      << "lambda_f = " << real(cfg.server.lambda_f) << '\n'
      << "window = " << cfg.server.window << '\n'
      << "temperature = " << real(cfg.server.temperature) << '\n'
      << "include_self = " << (cfg.server.include_self ? "true" : "false") << '\n'
      << '\n'
      << "[memory]\n"
      << "budget = " << cfg.memory.budget << '\n'
      << "per_identity_quota = " << cfg.memory.per_identity_quota << '\n'
      << '\n'
      << "[experiment]\n"
      << "strategy = " << strategy_name(cfg.strategy) << '\n'
      << "eval_stride = " << cfg.eval_stride << '\n'
      << "seed = " << cfg.seed << '\n'
      << "out_dir = " << cfg.out_dir << '\n';
  return out.str();
}

}  // namespace fedstil
