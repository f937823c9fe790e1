#include "fedstil/runner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <sstream>

#include "fedstil/checkpoint.hpp"
#include "json.hpp"

namespace fedstil {

namespace {

constexpr std::uint64_t kInitTag = 0x55;
constexpr std::uint64_t kExtractionTag = 0x66;
constexpr std::uint64_t kClientRngTag = 0x77;

// Which protocol pieces a strategy keeps.
struct StrategyPolicy {
  bool exchange = true;          // any server communication at all
  bool st_aggregation = true;    // relevance-weighted aggregation
  bool upload_features = true;   // task features sent (and billed)
  bool use_memory = true;        // rehearsal memory maintained
  double rehearsal_fraction = 0.3;
  double tie_weight = 0.01;
  bool train_alpha = true;
  bool uniform_include_self = true;  // for the uniform-aggregation path
};

StrategyPolicy derive_policy(const ExperimentConfig& cfg) {
  StrategyPolicy p;
  p.rehearsal_fraction = cfg.training.rehearsal_fraction;
  p.tie_weight = cfg.training.tie_weight;
  p.train_alpha = !cfg.training.freeze_alpha;
  switch (cfg.strategy) {
    case Strategy::fedstil:
      break;
    case Strategy::fedavg:
      p.st_aggregation = false;
      p.upload_features = false;
      p.use_memory = false;
      p.rehearsal_fraction = 0.0;
      p.tie_weight = 0.0;
      p.train_alpha = false;
      p.uniform_include_self = true;
      break;
    case Strategy::local:
      p.exchange = false;
      p.st_aggregation = false;
      p.upload_features = false;
      p.use_memory = false;
      p.rehearsal_fraction = 0.0;
      p.tie_weight = 0.0;
      p.train_alpha = false;
      break;
    case Strategy::fedstil_no_st:
      p.st_aggregation = false;
      p.upload_features = false;
      p.uniform_include_self = cfg.server.include_self;
      break;
    case Strategy::fedstil_no_rehearsal:
      p.use_memory = false;
      p.rehearsal_fraction = 0.0;
      break;
    case Strategy::fedstil_no_tying:
      p.tie_weight = 0.0;
      break;
  }
  return p;
}

TrainConfig make_train_config(const ExperimentConfig& cfg, const StrategyPolicy& policy) {
  TrainConfig tc;
  tc.epochs = cfg.training.epochs;
  tc.batch_size = static_cast<std::size_t>(cfg.training.batch_size);
  tc.rehearsal_fraction = policy.rehearsal_fraction;
  tc.tie_weight = policy.tie_weight;
  tc.patience = cfg.training.patience;
  tc.train_alpha = policy.train_alpha;
  tc.adam.lr = cfg.training.lr;
  tc.adam.weight_decay = cfg.training.weight_decay;
  return tc;
}

// Runs body(c) for every client, forwarding the first captured exception
// with (client, round) context once all workers are done.
template <class F>
void for_each_client(int num_clients, int round, F&& body) {
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(num_clients));
#pragma omp parallel for schedule(dynamic)
  for (int c = 0; c < num_clients; ++c) {
    try {
      body(c);
    } catch (...) {
      errors[static_cast<std::size_t>(c)] = std::current_exception();
    }
  }
  for (int c = 0; c < num_clients; ++c) {
    if (!errors[static_cast<std::size_t>(c)]) continue;
    try {
      std::rethrow_exception(errors[static_cast<std::size_t>(c)]);
    } catch (const Error& e) {
      throw Error("client " + std::to_string(c) + ", round " + std::to_string(round) +
                  ": " + e.what());
    }
  }
}

struct TaskEvalRecord {
  int task_round = 0;
  bool scored = false;
  TaskEval eval;
  std::size_t skipped = 0;
};

}  // namespace

const char* metric_name(MetricId id) {
  switch (id) {
    case MetricId::map: return "map";
    case MetricId::rank1: return "rank1";
    case MetricId::rank3: return "rank3";
    case MetricId::rank5: return "rank5";
    case MetricId::skipped_queries: return "skipped_queries";
    case MetricId::avg_map_eq7: return "avg_map_eq7";
    case MetricId::forgetting_eq8: return "forgetting_eq8";
    case MetricId::s2c_bytes: return "s2c_bytes";
    case MetricId::c2s_bytes: return "c2s_bytes";
  }
  return "map";
}

ExperimentFixtures build_fixtures(const ExperimentConfig& cfg) {
  cfg.validate();
  ExperimentFixtures fx;
  fx.trajectories = build_identity_trajectories(cfg.stream);
  fx.rounds.resize(static_cast<std::size_t>(cfg.stream.num_rounds));
  for (int r = 0; r < cfg.stream.num_rounds; ++r) {
    fx.rounds[static_cast<std::size_t>(r)] = generate_round(cfg.stream, fx.trajectories, r);
  }
  fx.extraction = make_extraction_layer(cfg.stream.raw_dim,
                                        static_cast<int>(cfg.shapes.proto_dim),
                                        derive_seed(cfg.stream.seed, kExtractionTag));
  std::vector<TaskBatch> flat;
  for (const auto& round : fx.rounds) {
    flat.insert(flat.end(), round.begin(), round.end());
  }
  fx.checksum = stream_checksum(flat);
  return fx;
}

RunState init_run_state(const ExperimentConfig& cfg) {
  RunState state;
  state.history = FeatureHistory(cfg.server.window);
  ParamLayout layout(cfg.shapes);
  state.clients.resize(static_cast<std::size_t>(cfg.stream.num_clients));
  // One shared initialization across clients, standing in for common
  // pre-trained weights; uploads then live in an aligned parameter space
  // and averaging them is meaningful.
  AdaptiveParams shared_init = init_adaptive(cfg.shapes, derive_seed(cfg.seed, kInitTag));
  for (int c = 0; c < cfg.stream.num_clients; ++c) {
    ClientState& client = state.clients[static_cast<std::size_t>(c)];
    client.id = c;
    client.shapes = cfg.shapes;
    client.params = shared_init;
    client.opt = AdamState(layout.total);
    client.rng = Rng(derive_seed(cfg.seed ^ static_cast<std::uint64_t>(c), kClientRngTag));
  }
  return state;
}

ParamVector compute_dispatch(const ExperimentConfig& cfg, const RunState& state,
                             const ParamStore& snapshot, int client, int round,
                             RelevanceRow* row_out) {
  StrategyPolicy policy = derive_policy(cfg);
  ParamLayout layout(cfg.shapes);
  if (row_out) *row_out = RelevanceRow{client, round, {}, {}};

  if (!policy.exchange) return ParamVector(layout.total, 0.0);

  if (policy.st_aggregation) {
    RelevanceRow row =
        knowledge_relevance(state.history, client, round, cfg.server.lambda_f,
                            cfg.server.window, cfg.server.temperature,
                            cfg.server.include_self);
    RelevanceRow usable = restrict_row(row, snapshot.clients());
    if (row_out) *row_out = usable;
    return aggregate_base(snapshot, usable, layout.total);
  }

  bool any_eligible = false;
  for (int peer : snapshot.clients()) {
    if (peer != client || policy.uniform_include_self) any_eligible = true;
  }
  if (!any_eligible) return ParamVector(layout.total, 0.0);
  return uniform_aggregate(snapshot, client, policy.uniform_include_self);
}

namespace {

void evaluate_round(RunState& state, const ExperimentConfig& cfg,
                    const ExperimentFixtures& fixtures, int round) {
  const int num_clients = cfg.stream.num_clients;
  // Gallery window: every round seen so far. Old tasks keep meeting the
  // growing distractor pool, so retention separates strategies.
  std::vector<const TaskBatch*> all_batches;
  for (int r = 0; r <= round; ++r) {
    for (const auto& batch : fixtures.rounds[static_cast<std::size_t>(r)]) {
      all_batches.push_back(&batch);
    }
  }

  std::vector<std::vector<TaskEvalRecord>> per_client(
      static_cast<std::size_t>(num_clients));

  for_each_client(num_clients, round, [&](int c) {
    ClientState& client = state.clients[static_cast<std::size_t>(c)];
    ParamVector theta = compose(client.params);

    GalleryView gallery;
    try {
      gallery = build_gallery(all_batches, c, fixtures.extraction, theta, cfg.shapes);
    } catch (const EmptyEvalError&) {
      return;  // nothing to rank against (single client or query-free stream)
    }

    auto& records = per_client[static_cast<std::size_t>(c)];
    for (int task_round = 0; task_round <= round; ++task_round) {
      const TaskBatch& batch =
          fixtures.rounds[static_cast<std::size_t>(task_round)][static_cast<std::size_t>(c)];
      if (batch.query.empty()) continue;

      Matrix projected(batch.query.size(), cfg.shapes.proto_dim);
      std::vector<int> labels(batch.query.size());
      for (std::size_t i = 0; i < batch.query.size(); ++i) {
        Vector p = project_features(fixtures.extraction, batch.query[i].features);
        std::copy(p.begin(), p.end(), projected.row(i));
        labels[i] = batch.query[i].identity;
      }
      ForwardCache cache = forward(theta, cfg.shapes, projected);

      TaskEvalRecord record;
      record.task_round = task_round;
      try {
        RetrievalResult result = evaluate_retrieval(cache.hidden, labels,
                                                    gallery.embeddings, gallery.labels,
                                                    {1, 3, 5});
        record.scored = true;
        record.eval = TaskEval{result.map, result.rank_at.at(1), result.rank_at.at(3),
                               result.rank_at.at(5)};
        record.skipped = result.skipped_queries;
      } catch (const EmptyEvalError&) {
        record.scored = false;
        record.skipped = batch.query.size();
      }
      records.push_back(record);
    }
  });

  // Serial merge in client order keeps the log deterministic.
  for (int c = 0; c < num_clients; ++c) {
    bool any_scored = false;
    for (const auto& record : per_client[static_cast<std::size_t>(c)]) {
      if (record.scored) {
        state.timeline.record(c, round, record.task_round, record.eval);
        any_scored = true;
        state.metric_rows.push_back(
            {round, c, MetricId::map, record.task_round, record.eval.map});
        state.metric_rows.push_back(
            {round, c, MetricId::rank1, record.task_round, record.eval.rank1});
        state.metric_rows.push_back(
            {round, c, MetricId::rank3, record.task_round, record.eval.rank3});
        state.metric_rows.push_back(
            {round, c, MetricId::rank5, record.task_round, record.eval.rank5});
      }
      state.metric_rows.push_back({round, c, MetricId::skipped_queries,
                                   record.task_round,
                                   static_cast<double>(record.skipped)});
    }
    if (any_scored) {
      state.metric_rows.push_back(
          {round, c, MetricId::avg_map_eq7, -1, avg_accuracy(state.timeline, c, round)});
      try {
        state.metric_rows.push_back(
            {round, c, MetricId::forgetting_eq8, -1, forgetting(state.timeline, c, round)});
      } catch (const UndefinedForgettingError&) {
        // fewer than two tasks so far
      }
    }
  }
}

}  // namespace

void run_round(RunState& state, const ExperimentConfig& cfg,
               const ExperimentFixtures& fixtures) {
  const int round = state.round;
  if (round < 0 || round >= cfg.stream.num_rounds) {
    throw RangeError("run_round: round " + std::to_string(round) + " outside [0, " +
                     std::to_string(cfg.stream.num_rounds) + ")");
  }
  const int num_clients = cfg.stream.num_clients;
  const StrategyPolicy policy = derive_policy(cfg);
  const ParamLayout layout(cfg.shapes);
  const auto& batches = fixtures.rounds[static_cast<std::size_t>(round)];

  // Prototype extraction and task features.
  std::vector<std::vector<Prototype>> prototypes(static_cast<std::size_t>(num_clients));
  std::vector<TaskFeature> features(static_cast<std::size_t>(num_clients));
  for_each_client(num_clients, round, [&](int c) {
    auto& protos = prototypes[static_cast<std::size_t>(c)];
    protos = extract_prototypes(fixtures.extraction, batches[static_cast<std::size_t>(c)]);
    features[static_cast<std::size_t>(c)] = task_feature(protos, c, round);
  });

  // Server phase: record the round's features, then compute every dispatch
  // from the uploads of previous rounds.
  std::vector<ParamVector> dispatch(static_cast<std::size_t>(num_clients));
  if (policy.exchange) {
    if (policy.upload_features) {
      for (int c = 0; c < num_clients; ++c) {
        state.history.record(features[static_cast<std::size_t>(c)]);
      }
    }
    ParamStore snapshot = state.store;
    for (int c = 0; c < num_clients; ++c) {
      RelevanceRow row;
      dispatch[static_cast<std::size_t>(c)] =
          compute_dispatch(cfg, state, snapshot, c, round, &row);
      for (const auto& [peer, weight] : row.weights) {
        state.relevance_rows.push_back({round, c, peer, weight});
      }
    }
  } else {
    for (auto& d : dispatch) d.assign(layout.total, 0.0);
  }

  // Local training and memory maintenance.
  const TrainConfig train_cfg = make_train_config(cfg, policy);
  std::vector<ParamVector> uploads(static_cast<std::size_t>(num_clients));
  auto all_zero = [](const ParamVector& v) {
    for (double x : v) {
      if (x != 0.0) return false;
    }
    return true;
  };
  for_each_client(num_clients, round, [&](int c) {
    ClientState& client = state.clients[static_cast<std::size_t>(c)];
    const ParamVector& base = dispatch[static_cast<std::size_t>(c)];
    // When the first non-zero base arrives, re-express the unchanged local
    // function over it: A becomes the personal residual theta - B (.) alpha.
    // Later refreshes keep A as-is, so base updates inject the neighbors'
    // newly learnt knowledge without compounding parameter magnitude.
    if (all_zero(client.params.B) && !all_zero(base)) {
      ParamVector theta_prev = compose(client.params);
      for (std::size_t i = 0; i < theta_prev.size(); ++i) {
        client.params.A[i] = theta_prev[i] - base[i] * client.params.alpha[i];
      }
    }
    TrainResult result = train_local(client, prototypes[static_cast<std::size_t>(c)],
                                     base, train_cfg);
    uploads[static_cast<std::size_t>(c)] = std::move(result.theta);
    if (policy.use_memory) {
      update_memory(client, prototypes[static_cast<std::size_t>(c)], cfg.memory);
    }
  });

  // Uploads and accounting.
  std::uint64_t s2c_floats = 0;
  std::uint64_t c2s_floats = 0;
  if (policy.exchange) {
    std::vector<int> participating(static_cast<std::size_t>(num_clients));
    for (int c = 0; c < num_clients; ++c) {
      state.store.record(c, std::move(uploads[static_cast<std::size_t>(c)]), round);
      participating[static_cast<std::size_t>(c)] = c;
    }
    const std::size_t feature_len =
        policy.upload_features ? cfg.shapes.proto_dim : 0;
    account_round(state.ledger, round, layout.total, feature_len, participating);
    s2c_floats = layout.total;
    c2s_floats = layout.total + feature_len;
  }
  for (int c = 0; c < num_clients; ++c) {
    state.metric_rows.push_back({round, c, MetricId::s2c_bytes, -1,
                                 static_cast<double>(CommLedger::bytes(s2c_floats))});
    state.metric_rows.push_back({round, c, MetricId::c2s_bytes, -1,
                                 static_cast<double>(CommLedger::bytes(c2s_floats))});
  }

  state.round = round + 1;

  if (round % cfg.eval_stride == 0 || round == cfg.stream.num_rounds - 1) {
    evaluate_round(state, cfg, fixtures, round);
  }
}

namespace {

std::string format_value(MetricId metric, double value) {
  if (metric == MetricId::s2c_bytes || metric == MetricId::c2s_bytes ||
      metric == MetricId::skipped_queries) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%lld", static_cast<long long>(value));
    return buf;
  }
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.10g", value);
  return buf;
}

}  // namespace

std::string metrics_csv_text(const RunState& state, const ExperimentConfig& cfg) {
  std::ostringstream out;
  out << "round,client,strategy,metric,task_index,value\n";
  const char* strategy = strategy_name(cfg.strategy);
  for (const auto& row : state.metric_rows) {
    out << row.round << ',' << row.client << ',' << strategy << ','
        << metric_name(row.metric) << ',' << row.task_index << ','
        << format_value(row.metric, row.value) << '\n';
  }
  return out.str();
}

std::string relevance_csv_text(const RunState& state) {
  std::ostringstream out;
  out << "round,client,peer,weight\n";
  char buf[40];
  for (const auto& row : state.relevance_rows) {
    std::snprintf(buf, sizeof(buf), "%.10g", row.weight);
    out << row.round << ',' << row.client << ',' << row.peer << ',' << buf << '\n';
  }
  return out.str();
}

std::string summary_json_text(const RunState& state, const ExperimentConfig& cfg) {
  nlohmann::ordered_json summary;
  summary["strategy"] = strategy_name(cfg.strategy);
  summary["seed"] = cfg.seed;
  summary["stream_seed"] = cfg.stream.seed;
  summary["num_clients"] = cfg.stream.num_clients;
  summary["rounds_completed"] = state.round;

  const int final_round = state.round - 1;
  nlohmann::ordered_json per_client_map = nlohmann::ordered_json::object();
  nlohmann::ordered_json per_client_forget = nlohmann::ordered_json::object();
  double map_sum = 0.0;
  int map_count = 0;
  double forget_sum = 0.0;
  int forget_count = 0;
  for (int c = 0; c < cfg.stream.num_clients; ++c) {
    try {
      double value = avg_accuracy(state.timeline, c, final_round);
      per_client_map[std::to_string(c)] = value;
      map_sum += value;
      ++map_count;
    } catch (const Error&) {
    }
    try {
      double value = forgetting(state.timeline, c, final_round);
      per_client_forget[std::to_string(c)] = value;
      forget_sum += value;
      ++forget_count;
    } catch (const Error&) {
    }
  }
  summary["avg_map_eq7"] = {
      {"mean", map_count ? map_sum / map_count : 0.0},
      {"per_client", per_client_map},
  };
  summary["forgetting_eq8"] = {
      {"mean", forget_count ? forget_sum / forget_count : 0.0},
      {"per_client", per_client_forget},
  };

  std::uint64_t skipped = 0;
  for (const auto& row : state.metric_rows) {
    if (row.metric == MetricId::skipped_queries) {
      skipped += static_cast<std::uint64_t>(row.value);
    }
  }
  summary["communication"] = {
      {"s2c_bytes", CommLedger::bytes(state.ledger.total_s2c_floats())},
      {"c2s_bytes", CommLedger::bytes(state.ledger.total_c2s_floats())},
  };
  summary["skipped_queries"] = skipped;
  return summary.dump(2) + "\n";
}

RunOutputs run_experiment(const ExperimentConfig& cfg,
                          const std::string& resume_checkpoint) {
  cfg.validate();
  namespace fs = std::filesystem;
  RunOutputs outputs;
  outputs.out_dir = cfg.out_dir;
  std::error_code ec;
  fs::create_directories(outputs.out_dir, ec);
  if (ec) throw IoError("cannot create output directory " + outputs.out_dir.string());

  ExperimentFixtures fixtures = build_fixtures(cfg);
  RunState state;
  if (!resume_checkpoint.empty()) {
    state = load_checkpoint(resume_checkpoint, cfg);
  } else {
    state = init_run_state(cfg);
  }

  outputs.checkpoint = outputs.out_dir / "checkpoint.bin";
  std::vector<std::pair<int, double>> timings;
  while (state.round < cfg.stream.num_rounds) {
    auto start = std::chrono::steady_clock::now();
    run_round(state, cfg, fixtures);
    auto stop = std::chrono::steady_clock::now();
    timings.emplace_back(state.round - 1,
                         std::chrono::duration<double>(stop - start).count());
    save_checkpoint(outputs.checkpoint.string(), state, cfg);
  }
  if (resume_checkpoint.empty() && cfg.stream.num_rounds == 0) {
    save_checkpoint(outputs.checkpoint.string(), state, cfg);
  }

  auto write_file = [](const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot open " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
  };

  outputs.metrics_csv = outputs.out_dir / "metrics.csv";
  write_file(outputs.metrics_csv, metrics_csv_text(state, cfg));
  outputs.relevance_csv = outputs.out_dir / "relevance.csv";
  write_file(outputs.relevance_csv, relevance_csv_text(state));
  outputs.summary_json = outputs.out_dir / "summary.json";
  write_file(outputs.summary_json, summary_json_text(state, cfg));
  outputs.config_echo = outputs.out_dir / "config.txt";
  write_file(outputs.config_echo, serialize_config(cfg));

  {
    std::ostringstream timing;
    timing << "round,seconds\n";
    char buf[32];
    for (const auto& [round, seconds] : timings) {
      std::snprintf(buf, sizeof(buf), "%.6f", seconds);
      timing << round << ',' << buf << '\n';
    }
    outputs.timing_csv = outputs.out_dir / "timing.csv";
    write_file(outputs.timing_csv, timing.str());
  }

  for (const auto& client : state.clients) {
    fs::path path = outputs.out_dir / ("params_client_" + std::to_string(client.id) + ".bin");
    save_params(path.string(), cfg.shapes, compose(client.params));
    outputs.client_params.push_back(path);
  }
  return outputs;
}

}  // namespace fedstil
