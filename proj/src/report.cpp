#include "fedstil/report.hpp"

#include <algorithm>
#include <charconv>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "fedstil/errors.hpp"
#include "json.hpp"

namespace fedstil {

namespace {

struct CsvRow {
  int round;
  int client;
  std::string strategy;
  std::string metric;
  int task_index;
  double value;
};

std::vector<CsvRow> read_metrics_csv(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("report: cannot open " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("report: " + path + " missing header");

  std::vector<CsvRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (int f = 0; f < 5; ++f) {
      std::size_t comma = line.find(',', start);
      if (comma == std::string::npos) {
        throw ParseError("report: " + path + " line " + std::to_string(line_no) +
                         ": expected 6 fields");
      }
      fields.push_back(line.substr(start, comma - start));
      start = comma + 1;
    }
    fields.push_back(line.substr(start));

    auto to_int = [&](const std::string& s) {
      int v = 0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw ParseError("report: " + path + " line " + std::to_string(line_no) +
                         ": bad integer '" + s + "'");
      }
      return v;
    };
    auto to_double = [&](const std::string& s) {
      double v = 0.0;
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc() || p != s.data() + s.size()) {
        throw ParseError("report: " + path + " line " + std::to_string(line_no) +
                         ": bad value '" + s + "'");
      }
      return v;
    };
    rows.push_back({to_int(fields[0]), to_int(fields[1]), fields[2], fields[3],
                    to_int(fields[4]), to_double(fields[5])});
  }
  return rows;
}

}  // namespace

RunReport summarize_metrics_csv(const std::string& path) {
  std::vector<CsvRow> rows = read_metrics_csv(path);
  RunReport report;
  report.path = path;

  for (const auto& row : rows) {
    report.strategy = row.strategy;
    if (row.metric == "avg_map_eq7") report.final_round = std::max(report.final_round, row.round);
    if (row.metric == "s2c_bytes") report.s2c_bytes += static_cast<std::uint64_t>(row.value);
    if (row.metric == "c2s_bytes") report.c2s_bytes += static_cast<std::uint64_t>(row.value);
  }

  double map_sum = 0.0;
  int map_count = 0;
  double forget_sum = 0.0;
  double task_map_sum = 0.0, r1_sum = 0.0, r3_sum = 0.0, r5_sum = 0.0;
  int task_count = 0;
  for (const auto& row : rows) {
    if (row.round != report.final_round) continue;
    if (row.metric == "avg_map_eq7") {
      map_sum += row.value;
      ++map_count;
    } else if (row.metric == "forgetting_eq8") {
      forget_sum += row.value;
      ++report.forgetting_clients;
    } else if (row.metric == "map") {
      task_map_sum += row.value;
      ++task_count;
    } else if (row.metric == "rank1") {
      r1_sum += row.value;
    } else if (row.metric == "rank3") {
      r3_sum += row.value;
    } else if (row.metric == "rank5") {
      r5_sum += row.value;
    }
  }
  if (map_count > 0) report.avg_map = map_sum / map_count;
  if (report.forgetting_clients > 0) report.forgetting = forget_sum / report.forgetting_clients;
  if (task_count > 0) {
    report.task_map = task_map_sum / task_count;
    report.rank1 = r1_sum / task_count;
    report.rank3 = r3_sum / task_count;
    report.rank5 = r5_sum / task_count;
  }
  return report;
}

AggregateReport aggregate_runs(const std::vector<RunReport>& runs) {
  std::map<std::string, StrategyAggregate> by_strategy;
  std::map<std::string, int> forgetting_runs;
  for (const auto& run : runs) {
    StrategyAggregate& agg = by_strategy[run.strategy];
    agg.strategy = run.strategy;
    agg.runs += 1;
    agg.avg_map += run.avg_map;
    agg.task_map += run.task_map;
    agg.rank1 += run.rank1;
    agg.rank3 += run.rank3;
    agg.rank5 += run.rank5;
    agg.s2c_bytes += static_cast<double>(run.s2c_bytes);
    agg.c2s_bytes += static_cast<double>(run.c2s_bytes);
    if (run.forgetting_clients > 0) {
      agg.forgetting += run.forgetting;
      forgetting_runs[run.strategy] += 1;
    }
  }

  AggregateReport report;
  for (auto& [name, agg] : by_strategy) {
    double n = static_cast<double>(agg.runs);
    agg.avg_map /= n;
    agg.task_map /= n;
    agg.rank1 /= n;
    agg.rank3 /= n;
    agg.rank5 /= n;
    agg.s2c_bytes /= n;
    agg.c2s_bytes /= n;
    int fn = forgetting_runs[name];
    agg.forgetting = fn > 0 ? agg.forgetting / fn : 0.0;
    report.strategies.push_back(agg);
  }

  auto find = [&](const std::string& name) -> const StrategyAggregate* {
    for (const auto& agg : report.strategies) {
      if (agg.strategy == name) return &agg;
    }
    return nullptr;
  };
  if (const StrategyAggregate* fedstil = find("fedstil")) {
    for (const char* ablation :
         {"fedstil_no_st", "fedstil_no_rehearsal", "fedstil_no_tying"}) {
      if (const StrategyAggregate* agg = find(ablation)) {
        report.ablation_deltas[ablation] = fedstil->avg_map - agg->avg_map;
      }
    }
  }
  return report;
}

std::string report_table_text(const AggregateReport& report) {
  char buf[256];
  std::string out;
  out += "strategy               runs   avg_mAP  forget    mAP     R1      R3      R5      S2C_bytes    C2S_bytes\n";
  for (const auto& agg : report.strategies) {
    std::snprintf(buf, sizeof(buf),
                  "%-22s %4d   %7.4f  %7.4f %7.4f %7.4f %7.4f %7.4f %12.0f %12.0f\n",
                  agg.strategy.c_str(), agg.runs, agg.avg_map, agg.forgetting,
                  agg.task_map, agg.rank1, agg.rank3, agg.rank5, agg.s2c_bytes,
                  agg.c2s_bytes);
    out += buf;
  }
  if (!report.ablation_deltas.empty()) {
    out += "\nablation deltas (fedstil avg_mAP minus variant):\n";
    for (const auto& [name, delta] : report.ablation_deltas) {
      std::snprintf(buf, sizeof(buf), "  %-22s %+8.4f\n", name.c_str(), delta);
      out += buf;
    }
  }
  return out;
}

std::string report_json_text(const AggregateReport& report) {
  nlohmann::ordered_json j;
  j["strategies"] = nlohmann::ordered_json::array();
  for (const auto& agg : report.strategies) {
    j["strategies"].push_back({
        {"strategy", agg.strategy},
        {"runs", agg.runs},
        {"avg_map_eq7", agg.avg_map},
        {"forgetting_eq8", agg.forgetting},
        {"map", agg.task_map},
        {"rank1", agg.rank1},
        {"rank3", agg.rank3},
        {"rank5", agg.rank5},
        {"s2c_bytes", agg.s2c_bytes},
        {"c2s_bytes", agg.c2s_bytes},
    });
  }
  j["ablation_deltas"] = report.ablation_deltas;
  return j.dump(2) + "\n";
}

AggregateReport run_report(const std::string& in_dir) {
  namespace fs = std::filesystem;
  if (!fs::exists(in_dir)) throw ConfigError("report: no such directory: " + in_dir);

  std::vector<std::string> csv_paths;
  for (const auto& entry : fs::recursive_directory_iterator(in_dir)) {
    if (entry.is_regular_file() && entry.path().filename() == "metrics.csv") {
      csv_paths.push_back(entry.path().string());
    }
  }
  std::sort(csv_paths.begin(), csv_paths.end());
  if (csv_paths.empty()) {
    throw ConfigError("report: no metrics.csv found under " + in_dir);
  }

  std::vector<RunReport> runs;
  runs.reserve(csv_paths.size());
  for (const auto& path : csv_paths) runs.push_back(summarize_metrics_csv(path));
  AggregateReport report = aggregate_runs(runs);

  std::cout << report_table_text(report);
  std::ofstream out(fs::path(in_dir) / "report.json");
  if (!out) throw IoError("report: cannot write report.json under " + in_dir);
  out << report_json_text(report);
  return report;
}

}  // namespace fedstil
