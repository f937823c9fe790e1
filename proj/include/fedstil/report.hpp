#pragma once

#include <map>
#include <string>
#include <vector>

namespace fedstil {

// Final-round aggregates recomputed from one run's metrics.csv.
struct RunReport {
  std::string path;
  std::string strategy;
  int final_round = -1;
  double avg_map = 0.0;          // mean over clients of avg_map_eq7
  double forgetting = 0.0;       // mean over clients of forgetting_eq8
  int forgetting_clients = 0;    // clients with defined forgetting
  double task_map = 0.0;         // mean over (client, task) of map
  double rank1 = 0.0;
  double rank3 = 0.0;
  double rank5 = 0.0;
  std::uint64_t s2c_bytes = 0;
  std::uint64_t c2s_bytes = 0;
};

RunReport summarize_metrics_csv(const std::string& path);

struct StrategyAggregate {
  std::string strategy;
  int runs = 0;
  double avg_map = 0.0;
  double forgetting = 0.0;
  double task_map = 0.0;
  double rank1 = 0.0;
  double rank3 = 0.0;
  double rank5 = 0.0;
  double s2c_bytes = 0.0;
  double c2s_bytes = 0.0;
};

struct AggregateReport {
  std::vector<StrategyAggregate> strategies;       // sorted by strategy name
  std::map<std::string, double> ablation_deltas;   // fedstil minus each ablation
};

AggregateReport aggregate_runs(const std::vector<RunReport>& runs);

std::string report_table_text(const AggregateReport& report);
std::string report_json_text(const AggregateReport& report);

// Scans `in_dir` recursively for metrics.csv files, aggregates them, prints
// the table and writes report.json into in_dir. Returns the aggregate.
AggregateReport run_report(const std::string& in_dir);

}  // namespace fedstil
