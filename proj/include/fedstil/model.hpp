#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedstil/numeric.hpp"

namespace fedstil {

struct LayerShapes {
  std::size_t proto_dim = 64;
  std::size_t hidden_dim = 128;
  std::size_t num_labels = 50;
};

// Flat parameter layout: W1 (proto_dim x hidden_dim, row-major), b1
// (hidden_dim), W2 (hidden_dim x num_labels, row-major). The classifier
// carries no bias.
struct ParamLayout {
  std::size_t w1_offset, w1_size;
  std::size_t b1_offset, b1_size;
  std::size_t w2_offset, w2_size;
  std::size_t total;

  explicit ParamLayout(const LayerShapes& s)
      : w1_offset(0),
        w1_size(s.proto_dim * s.hidden_dim),
        b1_offset(w1_size),
        b1_size(s.hidden_dim),
        w2_offset(w1_size + b1_size),
        w2_size(s.hidden_dim * s.num_labels),
        total(w1_size + b1_size + w2_size) {}
};

using ParamVector = Vector;

// theta = B (.) alpha + A. B is frozen during local training; anchors are
// the round-start snapshots of A and alpha used by the tying penalty.
struct AdaptiveParams {
  ParamVector A;
  ParamVector B;
  ParamVector alpha;
  ParamVector A_anchor;
  ParamVector alpha_anchor;
};

// Per-batch activations. `hidden` doubles as the retrieval embedding.
struct ForwardCache {
  Matrix inputs;
  Matrix pre_hidden;
  Matrix hidden;
  Matrix logits;
};

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-5;
};

struct AdamState {
  std::size_t step = 0;
  ParamVector mA, vA, mAlpha, vAlpha;

  AdamState() = default;
  explicit AdamState(std::size_t n)
      : mA(n, 0.0), vA(n, 0.0), mAlpha(n, 0.0), vAlpha(n, 0.0) {}
};

struct LossGrad {
  double loss = 0.0;
  ParamVector grad_a;
  ParamVector grad_alpha;
};

// A ~ normal scaled by sqrt(2 / fan_in) per block, alpha = ones, B = zeros,
// anchors copy A and alpha.
AdaptiveParams init_adaptive(const LayerShapes& shapes, std::uint64_t seed);

ParamVector compose(const AdaptiveParams& p);

ForwardCache forward(const ParamVector& theta, const LayerShapes& shapes,
                     const Matrix& inputs);

// Mean cross-entropy plus tie_weight * (|A - A_anchor|_1 + |alpha -
// alpha_anchor|_1) / param_count. Gradients flow through the composition:
// grad_a = dtheta + tie subgradient, grad_alpha = dtheta (.) B + tie
// subgradient; sign(0) = 0.
LossGrad loss_and_grad(const AdaptiveParams& p, const LayerShapes& shapes,
                       const Matrix& inputs, const std::vector<int>& labels,
                       double tie_weight);

// Adam with bias correction and decoupled weight decay on A and alpha.
// B and the anchors are never touched. update_alpha=false leaves alpha
// (and its moments) untouched.
void adam_step(AdaptiveParams& p, const ParamVector& grad_a,
               const ParamVector& grad_alpha, AdamState& state,
               const AdamConfig& cfg, bool update_alpha = true);

void snapshot_anchors(AdaptiveParams& p);

// Checkpoint layout: magic "FSTPARM1", u32 version, u64 proto/hidden/labels,
// u64 length, then little-endian f64 values in flat layout order.
void save_params(const std::string& path, const LayerShapes& shapes,
                 const ParamVector& params);
ParamVector load_params(const std::string& path, LayerShapes* shapes_out = nullptr);

}  // namespace fedstil
