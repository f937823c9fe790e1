#pragma once

#include <cstdint>
#include <string>

#include "fedstil/client.hpp"
#include "fedstil/model.hpp"
#include "fedstil/stream.hpp"

namespace fedstil {

enum class Strategy {
  fedstil,
  fedavg,
  local,
  fedstil_no_st,
  fedstil_no_rehearsal,
  fedstil_no_tying,
};

const char* strategy_name(Strategy s);
Strategy strategy_from_name(const std::string& name);

struct TrainingConfig {
  int epochs = 5;
  int batch_size = 32;
  double lr = 1e-3;
  double weight_decay = 1e-5;
  int patience = 3;
  double tie_weight = 1.0;
  double rehearsal_fraction = 0.3;
  bool freeze_alpha = false;
};

struct ServerConfig {
  double lambda_f = 0.5;
  int window = 5;
  double temperature = 1.0;
  bool include_self = false;
};

struct ExperimentConfig {
  StreamConfig stream;
  LayerShapes shapes{64, 128, 50};
  TrainingConfig training;
  ServerConfig server;
  MemoryConfig memory;
  Strategy strategy = Strategy::fedstil;
  int eval_stride = 1;
  std::uint64_t seed = 42;
  std::string out_dir = "out";
  // When the config file pins [stream] seed it stays fixed under --seed.
  bool stream_seed_pinned = false;

  void validate() const;
};

ExperimentConfig default_config();

// Key/value text with [section] headers; '#' starts a comment. Unknown
// sections or keys are ConfigErrors. Environment variables named
// FEDSTIL_<SECTION>_<KEY> override file values.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);

std::string serialize_config(const ExperimentConfig& cfg);

}  // namespace fedstil
