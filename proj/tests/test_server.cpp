#include <cmath>

#include "doctest.h"
#include "fedstil/server.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace fedstil;

namespace {

TaskFeature feature_of(int client, int round, Vector mean) {
  TaskFeature f;
  f.mean = std::move(mean);
  f.client = client;
  f.round = round;
  f.count = 1;
  return f;
}

}  // namespace

TEST_CASE("feature history records, retains a window and rejects regressions") {
  FeatureHistory history(2);
  for (int r = 0; r <= 5; ++r) {
    history.record(feature_of(0, r, {static_cast<double>(r)}));
  }
  const auto* rounds = history.rounds_for(0);
  REQUIRE(rounds != nullptr);
  CHECK(rounds->size() == 3);  // k = 2 keeps rounds 3, 4, 5
  CHECK(rounds->count(3) == 1);
  CHECK(rounds->count(5) == 1);
  CHECK(history.at(0, 4).mean == Vector{4.0});

  CHECK_THROWS_AS(history.record(feature_of(0, 2, {0.0})), OrderingError);
  CHECK_THROWS_AS(history.at(0, 0), MissingFeatureError);
  CHECK_THROWS_AS(history.at(9, 0), MissingFeatureError);

  // same-round record overwrites
  history.record(feature_of(0, 5, {99.0}));
  CHECK(history.at(0, 5).mean == Vector{99.0});
}

TEST_CASE("param store keeps the latest upload per client") {
  ParamStore store;
  store.record(1, {1.0, 2.0}, 0);
  store.record(1, {3.0, 4.0}, 1);
  CHECK(store.theta(1) == ParamVector{3.0, 4.0});
  CHECK(store.upload_round(1) == 1);
  CHECK_THROWS_AS(store.record(1, {0.0, 0.0}, 0), OrderingError);
  CHECK_THROWS_AS(store.record(2, {0.0}, 0), DimensionError);
  CHECK_THROWS_AS(store.theta(7), MissingParamsError);
}

TEST_CASE("task similarity is one for identical features and bounded") {
  TaskFeature f = feature_of(0, 0, {0.5, -1.0, 2.0});
  CHECK(task_similarity(f, f, 1.0) == doctest::Approx(1.0).epsilon(1e-14));

  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    TaskFeature a = feature_of(0, 0, test_support::random_vector(rng, 8));
    TaskFeature b = feature_of(1, 0, test_support::random_vector(rng, 8));
    double s = task_similarity(a, b, 1.0);
    CHECK(s > 0.0);
    CHECK(s <= 1.0);
  }

  CHECK_THROWS_AS(
      task_similarity(f, feature_of(0, 0, {1.0}), 1.0), DimensionError);
}

TEST_CASE("task similarity of a near-point mass against uniform is about one half") {
  // softmax([40, 0]) is within 1e-12 of [1, 0]; softmax([0, 0]) is uniform.
  TaskFeature point = feature_of(0, 0, {40.0, 0.0});
  TaskFeature flat = feature_of(1, 0, {0.0, 0.0});
  CHECK(task_similarity(point, flat, 1.0) == doctest::Approx(0.5).epsilon(1e-9));
}

TEST_CASE("task similarity matches the softmax-kl-exp composition oracle") {
  Rng rng(5);
  for (int trial = 0; trial < 100; ++trial) {
    TaskFeature a = feature_of(0, 0, test_support::random_vector(rng, 6, 2.0));
    TaskFeature b = feature_of(1, 0, test_support::random_vector(rng, 6, 2.0));
    double tau = 0.5 + rng.uniform();
    Vector pa = reference::softmax(a.mean, tau);
    Vector pb = reference::softmax(b.mean, tau);
    double expected = std::exp(-reference::kl_divergence(pa, pb));
    CHECK(std::abs(task_similarity(a, b, tau) - expected) < 1e-12);
  }
}

TEST_CASE("knowledge relevance sums discounted similarities over the window") {
  FeatureHistory history(5);
  TaskFeature anchor = feature_of(0, 3, {1.0, 0.0, -1.0});

  SUBCASE("single term at t' = t has discount one") {
    history.record(feature_of(1, 3, {0.5, 0.5, 0.0}));
    history.record(anchor);
    RelevanceRow row = knowledge_relevance(history, 0, 3, 0.5, 5, 1.0);
    double s = task_similarity(anchor, history.at(1, 3), 1.0);
    REQUIRE(row.raw.count(1) == 1);
    CHECK(row.raw.at(1) == doctest::Approx(s).epsilon(1e-14));
    CHECK(row.weights.at(1) == doctest::Approx(1.0).epsilon(1e-12));
  }

  SUBCASE("two terms combine as S_t + lambda * S_{t-1}") {
    history.record(feature_of(1, 2, {0.0, 1.0, 0.0}));
    history.record(feature_of(1, 3, {0.5, 0.5, 0.0}));
    history.record(anchor);
    RelevanceRow row = knowledge_relevance(history, 0, 3, 0.5, 5, 1.0);
    double s_now = task_similarity(anchor, history.at(1, 3), 1.0);
    double s_prev = task_similarity(anchor, history.at(1, 2), 1.0);
    CHECK(row.raw.at(1) == doctest::Approx(s_now + 0.5 * s_prev).epsilon(1e-14));
  }

  SUBCASE("missing own feature is an error") {
    history.record(feature_of(1, 3, {0.0, 0.0, 0.0}));
    CHECK_THROWS_AS(knowledge_relevance(history, 0, 3, 0.5, 5, 1.0), MissingFeatureError);
  }
}

TEST_CASE("knowledge relevance matches the double-loop oracle") {
  Rng rng(7);
  FeatureHistory history(3);
  const int clients = 4;
  for (int r = 0; r <= 5; ++r) {
    for (int c = 0; c < clients; ++c) {
      // ragged histories: some clients skip some rounds
      if (c != 0 && (r + c) % 3 == 0) continue;
      history.record(feature_of(c, r, test_support::random_vector(rng, 5)));
    }
  }

  for (bool include_self : {false, true}) {
    RelevanceRow row = knowledge_relevance(history, 0, 5, 0.6, 3, 1.0, include_self);
    auto expected = oracles::relevance_raw_oracle(history, 0, 5, 0.6, 3, 1.0, include_self);
    REQUIRE(row.raw.size() == expected.size());
    double weight_sum = 0.0;
    for (const auto& [peer, raw] : expected) {
      REQUIRE(row.raw.count(peer) == 1);
      CHECK(std::abs(row.raw.at(peer) - raw) < 1e-12);
      weight_sum += row.weights.at(peer);
    }
    CHECK(std::abs(weight_sum - 1.0) < 1e-9);
  }
}

TEST_CASE("relevance weights are scale invariant") {
  RelevanceRow row;
  row.client = 0;
  row.round = 2;
  row.raw = {{1, 0.4}, {2, 1.3}, {3, 0.05}};
  RelevanceRow normalized = restrict_row(row, {1, 2, 3});

  RelevanceRow scaled = row;
  for (auto& [peer, raw] : scaled.raw) raw *= 37.5;
  RelevanceRow renormalized = restrict_row(scaled, {1, 2, 3});
  for (const auto& [peer, weight] : normalized.weights) {
    CHECK(renormalized.weights.at(peer) == doctest::Approx(weight).epsilon(1e-12));
  }
}

TEST_CASE("window zero reduces to normalized instantaneous similarity") {
  Rng rng(11);
  FeatureHistory history(0);
  const int clients = 4;
  for (int c = 0; c < clients; ++c) {
    history.record(feature_of(c, 2, test_support::random_vector(rng, 4)));
  }
  RelevanceRow row = knowledge_relevance(history, 0, 2, 0.5, 0, 1.0);
  double total = 0.0;
  for (int j = 1; j < clients; ++j) {
    total += task_similarity(history.at(0, 2), history.at(j, 2), 1.0);
  }
  for (int j = 1; j < clients; ++j) {
    double s = task_similarity(history.at(0, 2), history.at(j, 2), 1.0);
    CHECK(row.weights.at(j) == doctest::Approx(s / total).epsilon(1e-12));
  }
}

TEST_CASE("aggregate_base blends stored uploads by weight") {
  ParamStore store;
  store.record(1, {1.0, -2.0, 3.0}, 0);
  store.record(2, {-1.0, 2.0, -3.0}, 0);

  SUBCASE("single neighbor with weight one is an exact copy") {
    RelevanceRow row;
    row.raw = {{1, 0.7}};
    row.weights = {{1, 1.0}};
    CHECK(aggregate_base(store, row, 3) == store.theta(1));
  }

  SUBCASE("equal weights over opposite uploads cancel") {
    RelevanceRow row;
    row.raw = {{1, 1.0}, {2, 1.0}};
    row.weights = {{1, 0.5}, {2, 0.5}};
    ParamVector base = aggregate_base(store, row, 3);
    for (double x : base) CHECK(x == doctest::Approx(0.0).epsilon(1e-15));
  }

  SUBCASE("empty rows dispatch zeros") {
    RelevanceRow row;
    CHECK(aggregate_base(store, row, 3) == ParamVector(3, 0.0));
  }

  SUBCASE("weighted peers without uploads are an error") {
    RelevanceRow row;
    row.raw = {{9, 1.0}};
    row.weights = {{9, 1.0}};
    CHECK_THROWS_AS(aggregate_base(store, row, 3), MissingParamsError);
  }
}

TEST_CASE("aggregate_base matches the weighted-sum loop oracle and is linear") {
  Rng rng(13);
  const std::size_t len = 32;
  ParamStore store_a, store_b, store_sum;
  RelevanceRow row;
  std::vector<double> weights;
  std::vector<Vector> thetas_a, thetas_b;
  double raw_total = 0.0;
  for (int j = 0; j < 4; ++j) {
    double raw = 0.1 + rng.uniform();
    row.raw[j] = raw;
    raw_total += raw;
    thetas_a.push_back(test_support::random_vector(rng, len));
    thetas_b.push_back(test_support::random_vector(rng, len));
    Vector sum(len);
    for (std::size_t i = 0; i < len; ++i) sum[i] = thetas_a[j][i] + thetas_b[j][i];
    store_a.record(j, thetas_a[j], 0);
    store_b.record(j, thetas_b[j], 0);
    store_sum.record(j, sum, 0);
  }
  for (const auto& [peer, raw] : row.raw) row.weights[peer] = raw / raw_total;

  ParamVector base = aggregate_base(store_a, row, len);
  std::vector<const Vector*> ptrs;
  std::vector<double> ws;
  for (int j = 0; j < 4; ++j) {
    ws.push_back(row.weights.at(j));
    ptrs.push_back(&thetas_a[static_cast<std::size_t>(j)]);
  }
  Vector expected = reference::weighted_sum(ws, ptrs);
  for (std::size_t i = 0; i < len; ++i) CHECK(std::abs(base[i] - expected[i]) < 1e-12);

  ParamVector base_b = aggregate_base(store_b, row, len);
  ParamVector base_sum = aggregate_base(store_sum, row, len);
  for (std::size_t i = 0; i < len; ++i) {
    CHECK(std::abs(base_sum[i] - (base[i] + base_b[i])) < 1e-10);
  }
}

TEST_CASE("uniform aggregation is the unweighted mean") {
  ParamStore store;
  store.record(0, {2.0, 4.0}, 0);
  CHECK(uniform_aggregate(store, 0) == ParamVector{2.0, 4.0});

  store.record(1, {-2.0, -4.0}, 0);
  ParamVector mean = uniform_aggregate(store, 0);
  for (double x : mean) CHECK(x == doctest::Approx(0.0).epsilon(1e-15));

  ParamStore empty;
  CHECK_THROWS_AS(uniform_aggregate(empty, 0), MissingParamsError);
  ParamStore self_only;
  self_only.record(0, {1.0}, 0);
  CHECK_THROWS_AS(uniform_aggregate(self_only, 0, false), MissingParamsError);
}

TEST_CASE("uniform aggregation equals relevance aggregation with uniform weights") {
  Rng rng(17);
  const std::size_t len = 24;
  ParamStore store;
  RelevanceRow row;
  for (int j = 0; j < 5; ++j) {
    store.record(j, test_support::random_vector(rng, len), 0);
    row.raw[j] = 1.0;
    row.weights[j] = 1.0 / 5.0;
  }
  ParamVector uniform = uniform_aggregate(store, 0, true);
  ParamVector weighted = aggregate_base(store, row, len);
  for (std::size_t i = 0; i < len; ++i) CHECK(std::abs(uniform[i] - weighted[i]) < 1e-12);
}

TEST_CASE("identical features make relevance aggregation uniform over peers") {
  Rng rng(19);
  const std::size_t len = 16;
  FeatureHistory history(5);
  ParamStore store;
  Vector shared_mean = test_support::random_vector(rng, 6);
  std::vector<Vector> thetas;
  const int clients = 4;
  for (int r = 0; r <= 2; ++r) {
    for (int c = 0; c < clients; ++c) {
      history.record(feature_of(c, r, shared_mean));
    }
  }
  for (int c = 0; c < clients; ++c) {
    thetas.push_back(test_support::random_vector(rng, len));
    store.record(c, thetas.back(), 2);
  }

  RelevanceRow row = knowledge_relevance(history, 0, 2, 0.5, 5, 1.0);
  ParamVector base = aggregate_base(store, row, len);
  // uniform over peers j != 0
  Vector expected(len, 0.0);
  for (int j = 1; j < clients; ++j) {
    for (std::size_t i = 0; i < len; ++i) expected[i] += thetas[static_cast<std::size_t>(j)][i] / 3.0;
  }
  for (std::size_t i = 0; i < len; ++i) CHECK(std::abs(base[i] - expected[i]) < 1e-12);
}
