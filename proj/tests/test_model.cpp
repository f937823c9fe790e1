#include <cmath>

#include "doctest.h"
#include "fedstil/model.hpp"
#include "oracles.hpp"
#include "test_support.hpp"

using namespace fedstil;

namespace {

AdaptiveParams random_params(const LayerShapes& shapes, Rng& rng, double base_scale) {
  AdaptiveParams p = init_adaptive(shapes, rng.uniform_int(1u << 30));
  for (double& x : p.B) x = base_scale * rng.normal();
  for (double& x : p.alpha) x = 1.0 + 0.2 * rng.normal();
  // anchors deliberately offset so the tie term is active
  for (double& x : p.A_anchor) x += 0.05 * rng.normal();
  for (double& x : p.alpha_anchor) x += 0.05 * rng.normal();
  return p;
}

}  // namespace

TEST_CASE("init produces A-only composition and is seed-deterministic") {
  LayerShapes shapes{4, 3, 2};
  AdaptiveParams p = init_adaptive(shapes, 7);
  CHECK(compose(p) == p.A);  // B = 0
  CHECK(p.alpha == ParamVector(p.A.size(), 1.0));
  CHECK(p.A_anchor == p.A);
  CHECK(p.alpha_anchor == p.alpha);

  AdaptiveParams q = init_adaptive(shapes, 7);
  CHECK(p.A == q.A);
  AdaptiveParams r = init_adaptive(shapes, 8);
  CHECK(p.A != r.A);
}

TEST_CASE("init scale follows sqrt(2 / fan_in)") {
  LayerShapes shapes{64, 256, 10};
  ParamLayout layout(shapes);
  AdaptiveParams p = init_adaptive(shapes, 99);
  double sq_sum = 0.0;
  for (std::size_t i = 0; i < layout.w1_size; ++i) {
    sq_sum += p.A[layout.w1_offset + i] * p.A[layout.w1_offset + i];
  }
  double std_dev = std::sqrt(sq_sum / static_cast<double>(layout.w1_size));
  double expected = std::sqrt(2.0 / 64.0);
  CHECK(std::abs(std_dev - expected) < 0.1 * expected);
}

TEST_CASE("compose matches the elementwise definition") {
  LayerShapes shapes{3, 2, 2};
  Rng rng(21);
  AdaptiveParams p = random_params(shapes, rng, 1.0);

  ParamVector theta = compose(p);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    CHECK(theta[i] == p.B[i] * p.alpha[i] + p.A[i]);
  }

  SUBCASE("A = 0, alpha = 1 gives theta = B") {
    p.A.assign(p.A.size(), 0.0);
    p.alpha.assign(p.alpha.size(), 1.0);
    CHECK(compose(p) == p.B);
  }

  SUBCASE("length mismatch is rejected") {
    p.alpha.pop_back();
    CHECK_THROWS_AS(compose(p), DimensionError);
  }
}

TEST_CASE("compose is linear in each argument") {
  LayerShapes shapes{3, 4, 2};
  Rng rng(22);
  AdaptiveParams p = random_params(shapes, rng, 1.0);
  AdaptiveParams doubled_a = p;
  for (double& x : doubled_a.A) x *= 2.0;
  ParamVector theta = compose(p);
  ParamVector theta2 = compose(doubled_a);
  for (std::size_t i = 0; i < theta.size(); ++i) {
    CHECK(theta2[i] - theta[i] == doctest::Approx(p.A[i]).epsilon(1e-12));
  }
}

TEST_CASE("forward of the zero parameters gives zero logits") {
  LayerShapes shapes{3, 4, 5};
  ParamLayout layout(shapes);
  Matrix inputs(2, 3);
  inputs.at(0, 0) = 1.0;
  inputs.at(1, 2) = -2.0;
  ForwardCache cache = forward(ParamVector(layout.total, 0.0), shapes, inputs);
  for (double x : cache.logits.values) CHECK(x == 0.0);
  for (double x : cache.hidden.values) CHECK(x == 0.0);
}

TEST_CASE("forward matches hand arithmetic on a 2-2-2 net") {
  LayerShapes shapes{2, 2, 2};
  ParamLayout layout(shapes);
  ParamVector theta(layout.total, 0.0);
  // W1 = [[1, 2], [3, 4]] (input x hidden), b1 = [0.5, -10], W2 = [[1, -1], [2, 0]]
  theta[layout.w1_offset + 0] = 1.0;
  theta[layout.w1_offset + 1] = 2.0;
  theta[layout.w1_offset + 2] = 3.0;
  theta[layout.w1_offset + 3] = 4.0;
  theta[layout.b1_offset + 0] = 0.5;
  theta[layout.b1_offset + 1] = -10.0;
  theta[layout.w2_offset + 0] = 1.0;
  theta[layout.w2_offset + 1] = -1.0;
  theta[layout.w2_offset + 2] = 2.0;
  theta[layout.w2_offset + 3] = 0.0;

  Matrix inputs(1, 2);
  inputs.at(0, 0) = 1.0;
  inputs.at(0, 1) = 1.0;
  ForwardCache cache = forward(theta, shapes, inputs);
  // z = [1+3+0.5, 2+4-10] = [4.5, -4]; h = [4.5, 0]; logits = [4.5, -4.5]
  CHECK(cache.pre_hidden.at(0, 0) == doctest::Approx(4.5));
  CHECK(cache.pre_hidden.at(0, 1) == doctest::Approx(-4.0));
  CHECK(cache.hidden.at(0, 0) == doctest::Approx(4.5));
  CHECK(cache.hidden.at(0, 1) == 0.0);  // relu clamps the negative pre-activation
  CHECK(cache.logits.at(0, 0) == doctest::Approx(4.5));
  CHECK(cache.logits.at(0, 1) == doctest::Approx(-4.5));

  CHECK_THROWS_AS(forward(theta, shapes, Matrix(1, 3)), DimensionError);
}

TEST_CASE("uniform logits give ln(L) cross-entropy") {
  LayerShapes shapes{3, 4, 7};
  ParamLayout layout(shapes);
  AdaptiveParams p;
  p.A.assign(layout.total, 0.0);
  p.B.assign(layout.total, 0.0);
  p.alpha.assign(layout.total, 1.0);
  p.A_anchor = p.A;
  p.alpha_anchor = p.alpha;

  Matrix inputs(4, 3);
  for (double& x : inputs.values) x = 0.5;
  LossGrad lg = loss_and_grad(p, shapes, inputs, {0, 1, 2, 3}, 0.0);
  CHECK(lg.loss == doctest::Approx(std::log(7.0)).epsilon(1e-12));
}

TEST_CASE("grad_alpha vanishes when B is zero and tying is off") {
  LayerShapes shapes{3, 4, 5};
  Rng rng(31);
  AdaptiveParams p = init_adaptive(shapes, 5);
  Matrix inputs = test_support::random_matrix(rng, 6, 3);
  LossGrad lg = loss_and_grad(p, shapes, inputs, {0, 1, 2, 3, 4, 0}, 0.0);
  for (double g : lg.grad_alpha) CHECK(g == 0.0);
}

TEST_CASE("label validation") {
  LayerShapes shapes{2, 2, 3};
  AdaptiveParams p = init_adaptive(shapes, 1);
  Matrix inputs(1, 2);
  CHECK_THROWS_AS(loss_and_grad(p, shapes, inputs, {3}, 0.0), InvalidLabelError);
  CHECK_THROWS_AS(loss_and_grad(p, shapes, inputs, {-1}, 0.0), InvalidLabelError);
}

TEST_CASE("analytic gradients match central finite differences") {
  Rng rng(41);
  const LayerShapes configs[] = {{3, 4, 3}, {5, 2, 4}, {2, 6, 2}, {4, 4, 5}, {6, 3, 3}};
  const double tie_weights[] = {0.0, 0.05, 0.5, 0.02, 0.1};
  for (int trial = 0; trial < 5; ++trial) {
    const LayerShapes& shapes = configs[trial];
    AdaptiveParams p = random_params(shapes, rng, trial == 0 ? 0.0 : 1.0);
    const std::size_t batch = 3 + static_cast<std::size_t>(trial);
    Matrix inputs = test_support::random_matrix(rng, batch, shapes.proto_dim);
    std::vector<int> labels(batch);
    for (auto& y : labels) {
      y = static_cast<int>(rng.uniform_int(shapes.num_labels));
    }

    LossGrad lg = loss_and_grad(p, shapes, inputs, labels, tie_weights[trial]);
    CHECK(lg.loss ==
          doctest::Approx(oracles::loss_value(p, shapes, inputs, labels, tie_weights[trial]))
              .epsilon(1e-10));

    oracles::FiniteDiffGrads fd =
        oracles::finite_difference_grads(p, shapes, inputs, labels, tie_weights[trial]);
    for (std::size_t i = 0; i < lg.grad_a.size(); ++i) {
      double scale = std::max({std::abs(lg.grad_a[i]), std::abs(fd.grad_a[i]), 1e-3});
      CHECK(std::abs(lg.grad_a[i] - fd.grad_a[i]) / scale < 1e-4);
      scale = std::max({std::abs(lg.grad_alpha[i]), std::abs(fd.grad_alpha[i]), 1e-3});
      CHECK(std::abs(lg.grad_alpha[i] - fd.grad_alpha[i]) / scale < 1e-4);
    }
  }
}

TEST_CASE("adam leaves parameters alone for zero gradients") {
  LayerShapes shapes{2, 3, 2};
  ParamLayout layout(shapes);
  AdaptiveParams p = init_adaptive(shapes, 3);
  AdaptiveParams before = p;
  AdamState state(layout.total);
  AdamConfig cfg;
  cfg.weight_decay = 0.0;
  adam_step(p, ParamVector(layout.total, 0.0), ParamVector(layout.total, 0.0), state, cfg);
  CHECK(p.A == before.A);
  CHECK(p.alpha == before.alpha);
}

TEST_CASE("first adam step matches the closed-form update") {
  LayerShapes shapes{2, 2, 2};
  ParamLayout layout(shapes);
  Rng rng(51);
  AdaptiveParams p = init_adaptive(shapes, 9);
  for (double& x : p.B) x = rng.normal();
  ParamVector grad_a = test_support::random_vector(rng, layout.total);
  ParamVector grad_alpha = test_support::random_vector(rng, layout.total);

  AdaptiveParams expected = p;
  AdamConfig cfg;
  {
    ParamVector m(layout.total, 0.0), v(layout.total, 0.0);
    ParamVector ma(layout.total, 0.0), va(layout.total, 0.0);
    for (std::size_t i = 0; i < layout.total; ++i) {
      expected.A[i] = oracles::adam_single_coord(expected.A[i], grad_a[i], m[i], v[i], 1, cfg);
      expected.alpha[i] =
          oracles::adam_single_coord(expected.alpha[i], grad_alpha[i], ma[i], va[i], 1, cfg);
    }
  }

  AdamState state(layout.total);
  AdaptiveParams before = p;
  adam_step(p, grad_a, grad_alpha, state, cfg);
  for (std::size_t i = 0; i < layout.total; ++i) {
    CHECK(p.A[i] == doctest::Approx(expected.A[i]).epsilon(1e-14));
    CHECK(p.alpha[i] == doctest::Approx(expected.alpha[i]).epsilon(1e-14));
  }
  // frozen base and anchors, bit for bit
  CHECK(p.B == before.B);
  CHECK(p.A_anchor == before.A_anchor);
  CHECK(p.alpha_anchor == before.alpha_anchor);
}

TEST_CASE("adam can freeze alpha") {
  LayerShapes shapes{2, 2, 2};
  ParamLayout layout(shapes);
  AdaptiveParams p = init_adaptive(shapes, 13);
  AdamState state(layout.total);
  ParamVector grad(layout.total, 0.5);
  adam_step(p, grad, grad, state, AdamConfig{}, false);
  CHECK(p.alpha == ParamVector(layout.total, 1.0));
  CHECK(state.mAlpha == ParamVector(layout.total, 0.0));
}

TEST_CASE("training drives a separable toy problem below 0.1 loss") {
  LayerShapes shapes{2, 8, 2};
  ParamLayout layout(shapes);
  AdaptiveParams p = init_adaptive(shapes, 77);
  AdamState state(layout.total);
  AdamConfig adam;
  adam.lr = 5e-3;
  adam.weight_decay = 0.0;

  Matrix inputs(8, 2);
  std::vector<int> labels(8);
  for (std::size_t i = 0; i < 8; ++i) {
    double sign = i % 2 == 0 ? 1.0 : -1.0;
    inputs.at(i, 0) = sign * (1.0 + 0.1 * static_cast<double>(i));
    inputs.at(i, 1) = -sign;
    labels[i] = i % 2 == 0 ? 0 : 1;
  }

  double loss = 0.0;
  for (int step = 0; step < 200; ++step) {
    LossGrad lg = loss_and_grad(p, shapes, inputs, labels, 0.0);
    adam_step(p, lg.grad_a, lg.grad_alpha, state, adam);
    loss = lg.loss;
  }
  CHECK(loss < 0.1);
}

TEST_CASE("parameter checkpoints round-trip") {
  LayerShapes shapes{3, 4, 5};
  Rng rng(61);
  ParamLayout layout(shapes);
  ParamVector params = test_support::random_vector(rng, layout.total);

  test_support::TempDir dir("params");
  save_params(dir.file("theta.bin"), shapes, params);
  LayerShapes loaded_shapes;
  ParamVector loaded = load_params(dir.file("theta.bin"), &loaded_shapes);
  CHECK(loaded == params);
  CHECK(loaded_shapes.proto_dim == shapes.proto_dim);
  CHECK(loaded_shapes.hidden_dim == shapes.hidden_dim);
  CHECK(loaded_shapes.num_labels == shapes.num_labels);

  test_support::write_file(dir.file("junk.bin"), "not a checkpoint");
  CHECK_THROWS_AS(load_params(dir.file("junk.bin")), ParseError);
}
