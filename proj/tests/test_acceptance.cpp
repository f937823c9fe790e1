// Acceptance suite. Each test case covers one criterion and prints a
// [criterion N] PASS line when every gate in it holds.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "doctest.h"
#include "fedstil/checkpoint.hpp"
#include "fedstil/report.hpp"
#include "fedstil/runner.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace fedstil;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct SweepResults {
  // strategy -> seed -> summary values
  std::map<std::string, std::map<int, RunReport>> runs;
  double fedstil_seconds = 0.0;  // wall clock of one full default fedstil run
  test_support::TempDir dir{"acceptance_sweep"};
};

// All six strategies on the default desk-scale stream, seeds 1..5. Shared by
// criteria 5, 6, 7 and 9.
const SweepResults& default_sweep() {
  static SweepResults results = [] {
    SweepResults r;
    const char* strategies[] = {"fedstil",       "fedavg",
                                "local",         "fedstil_no_st",
                                "fedstil_no_rehearsal", "fedstil_no_tying"};
    for (const char* strategy : strategies) {
      for (int seed = 1; seed <= 5; ++seed) {
        ExperimentConfig cfg = default_config();
        cfg.strategy = strategy_from_name(strategy);
        cfg.seed = static_cast<std::uint64_t>(seed);
        cfg.stream.seed = cfg.seed;
        cfg.out_dir =
            (r.dir.path() / (std::string(strategy) + "_seed" + std::to_string(seed)))
                .string();
        auto start = Clock::now();
        RunOutputs outputs = run_experiment(cfg);
        double elapsed = seconds_since(start);
        if (std::string(strategy) == "fedstil" && seed == 1) {
          r.fedstil_seconds = elapsed;
        }
        r.runs[strategy][seed] = summarize_metrics_csv(outputs.metrics_csv.string());
      }
    }
    return r;
  }();
  return results;
}

int count_wins(const SweepResults& sweep, const std::string& a, const std::string& b) {
  int wins = 0;
  for (int seed = 1; seed <= 5; ++seed) {
    if (sweep.runs.at(a).at(seed).avg_map > sweep.runs.at(b).at(seed).avg_map) ++wins;
  }
  return wins;
}

double mean_forgetting(const SweepResults& sweep, const std::string& strategy) {
  double sum = 0.0;
  for (int seed = 1; seed <= 5; ++seed) {
    sum += sweep.runs.at(strategy).at(seed).forgetting;
  }
  return sum / 5.0;
}

}  // namespace

TEST_CASE("criterion 1: numeric and server kernels match brute-force oracles") {
  auto start = Clock::now();
  Rng rng(10001);

  for (int trial = 0; trial < 120; ++trial) {
    Vector v = test_support::random_vector(rng, 4 + rng.uniform_int(12), 3.0);
    double tau = 0.25 + rng.uniform() * 2.0;
    ProbVector got = softmax(v, tau);
    Vector expected = reference::softmax(v, tau);
    for (std::size_t i = 0; i < v.size(); ++i) {
      REQUIRE(std::abs(got[i] - expected[i]) < 1e-12);
    }
  }

  for (int trial = 0; trial < 120; ++trial) {
    Vector p = test_support::random_prob_values(rng, 8);
    Vector q = test_support::random_prob_values(rng, 8);
    REQUIRE(std::abs(kl_divergence(ProbVector(p), ProbVector(q)) -
                     reference::kl_divergence(p, q)) < 1e-12);
  }

  for (int trial = 0; trial < 120; ++trial) {
    std::size_t rows = 1 + rng.uniform_int(12);
    std::size_t cols = 1 + rng.uniform_int(12);
    Matrix m = test_support::random_matrix(rng, rows, cols);
    Vector v = test_support::random_vector(rng, cols);
    Vector got = matvec(m, v);
    Vector expected = reference::matvec(m, v);
    for (std::size_t i = 0; i < rows; ++i) {
      REQUIRE(std::abs(got[i] - expected[i]) < 1e-12);
    }
  }

  for (int trial = 0; trial < 120; ++trial) {
    const std::size_t len = 8 + rng.uniform_int(48);
    ParamStore store;
    RelevanceRow row;
    std::vector<Vector> thetas;
    std::vector<double> weights;
    std::vector<const Vector*> ptrs;
    const int peers = 2 + static_cast<int>(rng.uniform_int(5));
    double raw_sum = 0.0;
    for (int j = 0; j < peers; ++j) {
      thetas.push_back(test_support::random_vector(rng, len));
      double raw = 0.05 + rng.uniform();
      row.raw[j] = raw;
      raw_sum += raw;
    }
    for (int j = 0; j < peers; ++j) {
      row.weights[j] = row.raw[j] / raw_sum;
      store.record(j, thetas[static_cast<std::size_t>(j)], 0);
      weights.push_back(row.weights[j]);
      ptrs.push_back(&thetas[static_cast<std::size_t>(j)]);
    }
    ParamVector got = aggregate_base(store, row, len);
    Vector expected = reference::weighted_sum(weights, ptrs);
    for (std::size_t i = 0; i < len; ++i) {
      REQUIRE(std::abs(got[i] - expected[i]) < 1e-12);
    }
  }

  for (int trial = 0; trial < 120; ++trial) {
    FeatureHistory history(4);
    const int clients = 3 + static_cast<int>(rng.uniform_int(3));
    const int rounds = 3 + static_cast<int>(rng.uniform_int(4));
    for (int r = 0; r < rounds; ++r) {
      for (int c = 0; c < clients; ++c) {
        if (c != 0 && rng.uniform() < 0.25) continue;  // ragged history
        TaskFeature f;
        f.mean = test_support::random_vector(rng, 6);
        f.client = c;
        f.round = r;
        f.count = 1;
        history.record(f);
      }
    }
    double lambda_f = 0.2 + 0.6 * rng.uniform();
    bool include_self = rng.uniform() < 0.5;
    RelevanceRow row =
        knowledge_relevance(history, 0, rounds - 1, lambda_f, 4, 1.0, include_self);
    auto expected =
        oracles::relevance_raw_oracle(history, 0, rounds - 1, lambda_f, 4, 1.0, include_self);
    REQUIRE(row.raw.size() == expected.size());
    double weight_sum = 0.0;
    for (const auto& [peer, raw] : expected) {
      REQUIRE(std::abs(row.raw.at(peer) - raw) < 1e-12);
      weight_sum += row.weights.at(peer);
    }
    if (!expected.empty()) REQUIRE(std::abs(weight_sum - 1.0) < 1e-9);
  }

  double elapsed = seconds_since(start);
  REQUIRE(elapsed < 10.0);
  std::printf("[criterion 1] PASS - oracle equivalence on 120 instances per kernel "
              "(%.2fs)\n", elapsed);
}

TEST_CASE("criterion 2: analytic gradients match central finite differences") {
  auto start = Clock::now();
  Rng rng(20002);
  const LayerShapes configs[] = {{3, 4, 3}, {5, 3, 4}, {2, 6, 2}, {4, 4, 5}, {6, 2, 3}, {3, 5, 4}};
  const double tie_weights[] = {0.02, 0.2, 1.0, 0.0, 0.5, 1.5};

  for (int trial = 0; trial < 6; ++trial) {
    const LayerShapes& shapes = configs[trial];
    ParamLayout layout(shapes);
    AdaptiveParams p = init_adaptive(shapes, 300 + static_cast<std::uint64_t>(trial));
    for (double& x : p.B) x = rng.normal();  // B != 0
    for (double& x : p.alpha) x = 1.0 + 0.25 * rng.normal();
    for (double& x : p.A_anchor) x += 0.1 * rng.normal();
    for (double& x : p.alpha_anchor) x += 0.1 * rng.normal();

    const std::size_t batch = 4 + static_cast<std::size_t>(trial);
    Matrix inputs = test_support::random_matrix(rng, batch, shapes.proto_dim);
    std::vector<int> labels(batch);
    for (auto& y : labels) y = static_cast<int>(rng.uniform_int(shapes.num_labels));

    LossGrad lg = loss_and_grad(p, shapes, inputs, labels, tie_weights[trial]);
    oracles::FiniteDiffGrads fd =
        oracles::finite_difference_grads(p, shapes, inputs, labels, tie_weights[trial]);
    for (std::size_t i = 0; i < layout.total; ++i) {
      double scale = std::max({std::abs(lg.grad_a[i]), std::abs(fd.grad_a[i]), 1e-7});
      REQUIRE(std::abs(lg.grad_a[i] - fd.grad_a[i]) <= 1e-4 * scale + 1e-7);
      scale = std::max({std::abs(lg.grad_alpha[i]), std::abs(fd.grad_alpha[i]), 1e-7});
      REQUIRE(std::abs(lg.grad_alpha[i] - fd.grad_alpha[i]) <= 1e-4 * scale + 1e-7);
    }
  }

  double elapsed = seconds_since(start);
  REQUIRE(elapsed < 30.0);
  std::printf("[criterion 2] PASS - gradient check on 6 configurations with tying and "
              "non-zero base (%.2fs)\n", elapsed);
}

TEST_CASE("criterion 3: retrieval metrics equal the exhaustive oracle") {
  Rng rng(30003);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t nq = 1 + rng.uniform_int(10);
    const std::size_t ng = 5 + rng.uniform_int(46);
    const std::size_t dim = 2 + rng.uniform_int(5);
    Matrix q = test_support::random_matrix(rng, nq, dim);
    Matrix g = test_support::random_matrix(rng, ng, dim);
    std::vector<int> lq(nq), lg_labels(ng);
    for (auto& y : lq) y = static_cast<int>(rng.uniform_int(5));
    for (auto& y : lg_labels) y = static_cast<int>(rng.uniform_int(5));
    lg_labels[0] = lq[0];  // at least one valid query

    RetrievalResult got = evaluate_retrieval(q, lq, g, lg_labels, {1, 3, 5});
    oracles::RetrievalOracle expected =
        oracles::retrieval_oracle(q, lq, g, lg_labels, {1, 3, 5});
    REQUIRE(std::abs(got.map - expected.map) < 1e-12);
    for (int k : {1, 3, 5}) {
      REQUIRE(std::abs(got.rank_at.at(k) - expected.rank_at.at(k)) < 1e-12);
    }
    REQUIRE(got.valid_queries == expected.valid);
    REQUIRE(got.skipped_queries == expected.skipped);
  }

  // positives at ranks 1 and 3 of 5
  Matrix q(1, 1);
  Matrix g(5, 1);
  for (std::size_t i = 0; i < 5; ++i) g.at(i, 0) = static_cast<double>(i + 1);
  RetrievalResult hand = evaluate_retrieval(q, {1}, g, {1, 0, 1, 0, 0}, {1});
  REQUIRE(std::abs(hand.map - 5.0 / 6.0) < 1e-15);

  std::printf("[criterion 3] PASS - 20 random instances within 1e-12 and the "
              "rank-1-and-3 hand case is 5/6\n");
}

TEST_CASE("criterion 4: identical task features reduce the dispatch to FedAvg") {
  ExperimentConfig fedstil_cfg = default_config();
  fedstil_cfg.strategy = Strategy::fedstil;
  fedstil_cfg.server.include_self = true;
  fedstil_cfg.training.freeze_alpha = true;  // alpha stays at 1
  fedstil_cfg.training.tie_weight = 0.0;

  ExperimentConfig fedavg_cfg = fedstil_cfg;
  fedavg_cfg.strategy = Strategy::fedavg;

  ParamLayout layout(fedstil_cfg.shapes);
  const int clients = fedstil_cfg.stream.num_clients;
  const int rounds = fedstil_cfg.stream.num_rounds;
  REQUIRE(clients == 5);
  REQUIRE(rounds == 6);

  Rng rng(40004);
  RunState state = init_run_state(fedstil_cfg);
  ParamStore store;

  for (int round = 0; round < rounds; ++round) {
    // identical task features on all clients, fresh every round
    Vector shared = test_support::random_vector(rng, fedstil_cfg.shapes.proto_dim);
    for (int c = 0; c < clients; ++c) {
      TaskFeature f;
      f.mean = shared;
      f.client = c;
      f.round = round;
      f.count = 10;
      state.history.record(f);
    }

    ParamStore snapshot = store;
    for (int c = 0; c < clients; ++c) {
      ParamVector st_dispatch = compute_dispatch(fedstil_cfg, state, snapshot, c, round);
      ParamVector avg_dispatch = compute_dispatch(fedavg_cfg, state, snapshot, c, round);
      REQUIRE(st_dispatch.size() == avg_dispatch.size());
      for (std::size_t i = 0; i < st_dispatch.size(); ++i) {
        REQUIRE(std::abs(st_dispatch[i] - avg_dispatch[i]) <= 1e-12);
      }
    }

    // per-client uploads at round end
    for (int c = 0; c < clients; ++c) {
      store.record(c, test_support::random_vector(rng, layout.total), round);
    }
  }
  std::printf("[criterion 4] PASS - FedSTIL dispatch equals the FedAvg dispatch each "
              "round of a 5-client, 6-round run\n");
}

TEST_CASE("criterion 5: strategy ordering fedstil > fedavg > local across seeds") {
  const SweepResults& sweep = default_sweep();
  int fedstil_wins = count_wins(sweep, "fedstil", "fedavg");
  int fedavg_wins = count_wins(sweep, "fedavg", "local");

  double fedstil_mean = 0.0, fedavg_mean = 0.0, local_mean = 0.0;
  for (int seed = 1; seed <= 5; ++seed) {
    fedstil_mean += sweep.runs.at("fedstil").at(seed).avg_map / 5.0;
    fedavg_mean += sweep.runs.at("fedavg").at(seed).avg_map / 5.0;
    local_mean += sweep.runs.at("local").at(seed).avg_map / 5.0;
  }

  REQUIRE(fedstil_wins >= 4);
  REQUIRE(fedavg_wins >= 4);
  REQUIRE(fedstil_mean > fedavg_mean);
  REQUIRE(fedavg_mean > local_mean);
  std::printf("[criterion 5] PASS - final mAP fedstil %.4f > fedavg %.4f > local %.4f; "
              "sign tests %d/5 and %d/5\n",
              fedstil_mean, fedavg_mean, local_mean, fedstil_wins, fedavg_wins);
}

TEST_CASE("criterion 6: every ablation costs accuracy and rehearsal curbs forgetting") {
  const SweepResults& sweep = default_sweep();
  int vs_no_st = count_wins(sweep, "fedstil", "fedstil_no_st");
  int vs_no_rehearsal = count_wins(sweep, "fedstil", "fedstil_no_rehearsal");
  int vs_no_tying = count_wins(sweep, "fedstil", "fedstil_no_tying");
  REQUIRE(vs_no_st >= 4);
  REQUIRE(vs_no_rehearsal >= 4);
  REQUIRE(vs_no_tying >= 4);

  double fedstil_forgetting = mean_forgetting(sweep, "fedstil");
  double ablated_forgetting = mean_forgetting(sweep, "fedstil_no_rehearsal");
  REQUIRE(ablated_forgetting > fedstil_forgetting);
  std::printf("[criterion 6] PASS - ablation sign tests %d/5 (S-T), %d/5 (rehearsal), "
              "%d/5 (tying); forgetting %.5f (no rehearsal) > %.5f (fedstil)\n",
              vs_no_st, vs_no_rehearsal, vs_no_tying, ablated_forgetting,
              fedstil_forgetting);
}

TEST_CASE("criterion 7: communication totals equal the closed form") {
  const SweepResults& sweep = default_sweep();
  ExperimentConfig cfg = default_config();
  ParamLayout layout(cfg.shapes);
  const std::uint64_t rounds = static_cast<std::uint64_t>(cfg.stream.num_rounds);
  const std::uint64_t clients = static_cast<std::uint64_t>(cfg.stream.num_clients);

  // fedstil uploads theta plus the task feature, receives theta
  std::uint64_t expected_c2s = rounds * clients * 4 * (layout.total + cfg.shapes.proto_dim);
  std::uint64_t expected_s2c = rounds * clients * 4 * layout.total;
  for (int seed = 1; seed <= 5; ++seed) {
    const RunReport& run = sweep.runs.at("fedstil").at(seed);
    REQUIRE(run.c2s_bytes == expected_c2s);
    REQUIRE(run.s2c_bytes == expected_s2c);
  }
  // fedavg exchanges parameters only
  std::uint64_t expected_avg = rounds * clients * 4 * layout.total;
  for (int seed = 1; seed <= 5; ++seed) {
    const RunReport& run = sweep.runs.at("fedavg").at(seed);
    REQUIRE(run.c2s_bytes == expected_avg);
    REQUIRE(run.s2c_bytes == expected_avg);
  }
  // local never talks to the server
  for (int seed = 1; seed <= 5; ++seed) {
    const RunReport& run = sweep.runs.at("local").at(seed);
    REQUIRE(run.c2s_bytes == 0);
    REQUIRE(run.s2c_bytes == 0);
  }
  std::printf("[criterion 7] PASS - byte totals are exactly rounds x clients x 4 x "
              "floats (fedstil c2s %llu, s2c %llu; local 0)\n",
              static_cast<unsigned long long>(expected_c2s),
              static_cast<unsigned long long>(expected_s2c));
}

TEST_CASE("criterion 8: byte-identical reruns and exact checkpoint resume") {
  ExperimentConfig cfg = default_config();
  cfg.seed = 7;
  cfg.stream.seed = 7;

  test_support::TempDir dir("acceptance_determinism");
  ExperimentConfig cfg_a = cfg;
  cfg_a.out_dir = dir.file("a");
  ExperimentConfig cfg_b = cfg;
  cfg_b.out_dir = dir.file("b");
  RunOutputs out_a = run_experiment(cfg_a);
  RunOutputs out_b = run_experiment(cfg_b);
  REQUIRE(test_support::read_file(out_a.metrics_csv) ==
          test_support::read_file(out_b.metrics_csv));
  REQUIRE(test_support::read_file(out_a.summary_json) ==
          test_support::read_file(out_b.summary_json));

  for (int stop_round : {2, 4}) {
    ExperimentFixtures fixtures = build_fixtures(cfg);
    RunState state = init_run_state(cfg);
    for (int r = 0; r < stop_round; ++r) run_round(state, cfg, fixtures);
    std::string ckpt = dir.file("ckpt_round" + std::to_string(stop_round) + ".bin");
    save_checkpoint(ckpt, state, cfg);

    ExperimentConfig resumed_cfg = cfg;
    resumed_cfg.out_dir = dir.file("resumed_" + std::to_string(stop_round));
    RunOutputs resumed = run_experiment(resumed_cfg, ckpt);
    REQUIRE(test_support::read_file(out_a.metrics_csv) ==
            test_support::read_file(resumed.metrics_csv));
    REQUIRE(test_support::read_file(out_a.summary_json) ==
            test_support::read_file(resumed.summary_json));
    for (std::size_t i = 0; i < out_a.client_params.size(); ++i) {
      REQUIRE(test_support::read_file(out_a.client_params[i]) ==
              test_support::read_file(resumed.client_params[i]));
    }
  }
  std::printf("[criterion 8] PASS - identical reruns and resumes from rounds 2 and 4 "
              "reproduce the log byte for byte\n");
}

TEST_CASE("criterion 9: the default run finishes inside the desk-scale budget") {
  const SweepResults& sweep = default_sweep();
  REQUIRE(sweep.fedstil_seconds > 0.0);
  REQUIRE(sweep.fedstil_seconds < 300.0);
  std::printf("[criterion 9] PASS - default 5-client, 6-round fedstil run with "
              "per-round evaluation took %.2fs (< 300s)\n",
              sweep.fedstil_seconds);
}
