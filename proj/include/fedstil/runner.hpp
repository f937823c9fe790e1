#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "fedstil/config.hpp"
#include "fedstil/metrics.hpp"
#include "fedstil/server.hpp"

namespace fedstil {

enum class MetricId {
  map,
  rank1,
  rank3,
  rank5,
  skipped_queries,
  avg_map_eq7,
  forgetting_eq8,
  s2c_bytes,
  c2s_bytes,
};

const char* metric_name(MetricId id);

struct MetricRow {
  int round = 0;
  int client = 0;
  MetricId metric = MetricId::map;
  int task_index = -1;  // -1 for per-client aggregates
  double value = 0.0;
};

struct RelevanceLogRow {
  int round = 0;
  int client = 0;
  int peer = 0;
  double weight = 0.0;
};

// Everything deterministically derived from the config before any round runs.
struct ExperimentFixtures {
  Trajectories trajectories;
  std::vector<std::vector<TaskBatch>> rounds;  // [round][client]
  ExtractionLayer extraction;
  std::uint64_t checksum = 0;
};

ExperimentFixtures build_fixtures(const ExperimentConfig& cfg);

struct RunState {
  int round = 0;  // rounds completed
  std::vector<ClientState> clients;
  FeatureHistory history;
  ParamStore store;
  CommLedger ledger;
  AccuracyTimeline timeline;
  std::vector<MetricRow> metric_rows;
  std::vector<RelevanceLogRow> relevance_rows;

  RunState() : history(5) {}
};

RunState init_run_state(const ExperimentConfig& cfg);

// One full protocol round: extract prototypes and task features, record
// features, compute every dispatch from the round-start upload snapshot,
// train locally (clients in parallel), upload, account, then evaluate when
// the round falls on the eval stride.
void run_round(RunState& state, const ExperimentConfig& cfg,
               const ExperimentFixtures& fixtures);

// The dispatch actually sent to `client` this round under the configured
// strategy, computed from `snapshot` (uploads of previous rounds). Assumes
// the round's task features are already recorded. Exposed so tests can
// exercise the production dispatch path directly.
ParamVector compute_dispatch(const ExperimentConfig& cfg, const RunState& state,
                             const ParamStore& snapshot, int client, int round,
                             RelevanceRow* row_out = nullptr);

std::string metrics_csv_text(const RunState& state, const ExperimentConfig& cfg);
std::string relevance_csv_text(const RunState& state);
std::string summary_json_text(const RunState& state, const ExperimentConfig& cfg);

struct RunOutputs {
  std::filesystem::path out_dir;
  std::filesystem::path metrics_csv;
  std::filesystem::path summary_json;
  std::filesystem::path relevance_csv;
  std::filesystem::path timing_csv;
  std::filesystem::path config_echo;
  std::filesystem::path checkpoint;
  std::vector<std::filesystem::path> client_params;
};

// Runs rounds [state.round, num_rounds), writing metrics.csv, summary.json,
// relevance.csv, timing.csv, config.txt, checkpoint.bin and final per-client
// parameter checkpoints under cfg.out_dir. resume_checkpoint, when non-empty,
// restores a saved RunState first.
RunOutputs run_experiment(const ExperimentConfig& cfg,
                          const std::string& resume_checkpoint = "");

}  // namespace fedstil
