#include "fedstil/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace fedstil {

namespace {

constexpr char kParamMagic[8] = {'F', 'S', 'T', 'P', 'A', 'R', 'M', '1'};
constexpr std::uint32_t kParamVersion = 1;
constexpr std::size_t kParallelCutoff = 8192;

void check_param_length(const ParamLayout& layout, const ParamVector& v,
                        const char* what) {
  if (v.size() != layout.total) {
    throw DimensionError(std::string(what) + ": expected " +
                         std::to_string(layout.total) + " params, got " +
                         std::to_string(v.size()));
  }
}

}  // namespace

AdaptiveParams init_adaptive(const LayerShapes& shapes, std::uint64_t seed) {
  ParamLayout layout(shapes);
  Rng rng(seed);

  AdaptiveParams p;
  p.A.resize(layout.total);
  double w1_scale = std::sqrt(2.0 / static_cast<double>(shapes.proto_dim));
  double w2_scale = std::sqrt(2.0 / static_cast<double>(shapes.hidden_dim));
  for (std::size_t i = 0; i < layout.w1_size; ++i) {
    p.A[layout.w1_offset + i] = w1_scale * rng.normal();
  }
  // The hidden bias shares its layer's fan-in.
  for (std::size_t i = 0; i < layout.b1_size; ++i) {
    p.A[layout.b1_offset + i] = w1_scale * rng.normal();
  }
  for (std::size_t i = 0; i < layout.w2_size; ++i) {
    p.A[layout.w2_offset + i] = w2_scale * rng.normal();
  }
  p.B.assign(layout.total, 0.0);
  p.alpha.assign(layout.total, 1.0);
  p.A_anchor = p.A;
  p.alpha_anchor = p.alpha;
  return p;
}

ParamVector compose(const AdaptiveParams& p) {
  if (p.A.size() != p.B.size() || p.A.size() != p.alpha.size()) {
    throw DimensionError("compose: A/B/alpha length mismatch");
  }
  ParamVector theta(p.A.size());
  const std::int64_t n = static_cast<std::int64_t>(theta.size());
#pragma omp parallel for if (theta.size() > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) {
    theta[i] = p.B[i] * p.alpha[i] + p.A[i];
  }
  return theta;
}

ForwardCache forward(const ParamVector& theta, const LayerShapes& shapes,
                     const Matrix& inputs) {
  ParamLayout layout(shapes);
  check_param_length(layout, theta, "forward");
  if (inputs.cols != shapes.proto_dim) {
    throw DimensionError("forward: input width " + std::to_string(inputs.cols) +
                         " vs proto_dim " + std::to_string(shapes.proto_dim));
  }

  const std::size_t n = inputs.rows;
  const std::size_t pd = shapes.proto_dim;
  const std::size_t hd = shapes.hidden_dim;
  const std::size_t nl = shapes.num_labels;
  const double* w1 = theta.data() + layout.w1_offset;
  const double* b1 = theta.data() + layout.b1_offset;
  const double* w2 = theta.data() + layout.w2_offset;

  ForwardCache cache;
  cache.inputs = inputs;
  cache.pre_hidden = Matrix(n, hd);
  cache.hidden = Matrix(n, hd);
  cache.logits = Matrix(n, nl);

  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for if (n * pd * hd > kParallelCutoff)
  for (std::int64_t s = 0; s < rows; ++s) {
    const double* x = inputs.row(static_cast<std::size_t>(s));
    double* z = cache.pre_hidden.row(static_cast<std::size_t>(s));
    double* h = cache.hidden.row(static_cast<std::size_t>(s));
    double* logit = cache.logits.row(static_cast<std::size_t>(s));

    for (std::size_t j = 0; j < hd; ++j) z[j] = b1[j];
    for (std::size_t i = 0; i < pd; ++i) {
      const double xi = x[i];
      const double* w1_row = w1 + i * hd;
      for (std::size_t j = 0; j < hd; ++j) z[j] += xi * w1_row[j];
    }
    for (std::size_t j = 0; j < hd; ++j) h[j] = z[j] > 0.0 ? z[j] : 0.0;

    for (std::size_t l = 0; l < nl; ++l) logit[l] = 0.0;
    for (std::size_t j = 0; j < hd; ++j) {
      const double hj = h[j];
      if (hj == 0.0) continue;
      const double* w2_row = w2 + j * nl;
      for (std::size_t l = 0; l < nl; ++l) logit[l] += hj * w2_row[l];
    }
  }
  return cache;
}

LossGrad loss_and_grad(const AdaptiveParams& p, const LayerShapes& shapes,
                       const Matrix& inputs, const std::vector<int>& labels,
                       double tie_weight) {
  ParamLayout layout(shapes);
  check_param_length(layout, p.A, "loss_and_grad: A");
  check_param_length(layout, p.B, "loss_and_grad: B");
  check_param_length(layout, p.alpha, "loss_and_grad: alpha");
  if (labels.size() != inputs.rows) {
    throw DimensionError("loss_and_grad: " + std::to_string(labels.size()) +
                         " labels for " + std::to_string(inputs.rows) + " samples");
  }
  if (inputs.rows == 0) throw EmptyTaskError("loss_and_grad: empty batch");
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= shapes.num_labels) {
      throw InvalidLabelError("loss_and_grad: label " + std::to_string(y) +
                              " outside [0, " + std::to_string(shapes.num_labels) + ")");
    }
  }

  ParamVector theta = compose(p);
  ForwardCache cache = forward(theta, shapes, inputs);

  const std::size_t n = inputs.rows;
  const std::size_t pd = shapes.proto_dim;
  const std::size_t hd = shapes.hidden_dim;
  const std::size_t nl = shapes.num_labels;
  const double inv_n = 1.0 / static_cast<double>(n);

  // dlogits = (softmax - onehot) / n, per-sample losses kept for an
  // order-fixed reduction.
  Matrix dlogits(n, nl);
  Vector sample_loss(n, 0.0);
  const std::int64_t rows = static_cast<std::int64_t>(n);
#pragma omp parallel for if (n * nl > kParallelCutoff)
  for (std::int64_t s = 0; s < rows; ++s) {
    const double* logit = cache.logits.row(static_cast<std::size_t>(s));
    double* dl = dlogits.row(static_cast<std::size_t>(s));
    double m = logit[0];
    for (std::size_t l = 1; l < nl; ++l) m = std::max(m, logit[l]);
    double sum = 0.0;
    for (std::size_t l = 0; l < nl; ++l) sum += std::exp(logit[l] - m);
    double lse = m + std::log(sum);
    int y = labels[static_cast<std::size_t>(s)];
    sample_loss[static_cast<std::size_t>(s)] = lse - logit[y];
    for (std::size_t l = 0; l < nl; ++l) {
      dl[l] = std::exp(logit[l] - lse) * inv_n;
    }
    dl[y] -= inv_n;
  }

  double ce = 0.0;
  for (std::size_t s = 0; s < n; ++s) ce += sample_loss[s];
  ce *= inv_n;

  // Backprop into the flat layout. Each parameter coordinate accumulates
  // serially over samples so results do not depend on thread count.
  ParamVector dtheta(layout.total, 0.0);
  double* dw1 = dtheta.data() + layout.w1_offset;
  double* db1 = dtheta.data() + layout.b1_offset;
  double* dw2 = dtheta.data() + layout.w2_offset;
  const double* w2 = theta.data() + layout.w2_offset;

  Matrix dz(n, hd);
#pragma omp parallel for if (n * hd * nl > kParallelCutoff)
  for (std::int64_t s = 0; s < rows; ++s) {
    const double* dl = dlogits.row(static_cast<std::size_t>(s));
    const double* z = cache.pre_hidden.row(static_cast<std::size_t>(s));
    double* dzs = dz.row(static_cast<std::size_t>(s));
    for (std::size_t j = 0; j < hd; ++j) {
      if (z[j] > 0.0) {
        const double* w2_row = w2 + j * nl;
        double acc = 0.0;
        for (std::size_t l = 0; l < nl; ++l) acc += w2_row[l] * dl[l];
        dzs[j] = acc;
      } else {
        dzs[j] = 0.0;
      }
    }
  }

  const std::int64_t hd_i = static_cast<std::int64_t>(hd);
#pragma omp parallel for if (n * hd * nl > kParallelCutoff)
  for (std::int64_t j = 0; j < hd_i; ++j) {
    double* dw2_row = dw2 + static_cast<std::size_t>(j) * nl;
    for (std::size_t s = 0; s < n; ++s) {
      const double hj = cache.hidden.at(s, static_cast<std::size_t>(j));
      if (hj == 0.0) continue;
      const double* dl = dlogits.row(s);
      for (std::size_t l = 0; l < nl; ++l) dw2_row[l] += hj * dl[l];
    }
    double acc = 0.0;
    for (std::size_t s = 0; s < n; ++s) acc += dz.at(s, static_cast<std::size_t>(j));
    db1[static_cast<std::size_t>(j)] = acc;
  }

  const std::int64_t pd_i = static_cast<std::int64_t>(pd);
#pragma omp parallel for if (n * pd * hd > kParallelCutoff)
  for (std::int64_t i = 0; i < pd_i; ++i) {
    double* dw1_row = dw1 + static_cast<std::size_t>(i) * hd;
    for (std::size_t s = 0; s < n; ++s) {
      const double xi = cache.inputs.at(s, static_cast<std::size_t>(i));
      if (xi == 0.0) continue;
      const double* dzs = dz.row(s);
      for (std::size_t j = 0; j < hd; ++j) dw1_row[j] += xi * dzs[j];
    }
  }

  LossGrad out;
  out.grad_a.resize(layout.total);
  out.grad_alpha.resize(layout.total);

  const double tie_scale = tie_weight / static_cast<double>(layout.total);
  double tie_sum = 0.0;
  const std::int64_t total = static_cast<std::int64_t>(layout.total);
  for (std::int64_t i = 0; i < total; ++i) {
    const double da = p.A[i] - p.A_anchor[i];
    const double dal = p.alpha[i] - p.alpha_anchor[i];
    tie_sum += std::abs(da) + std::abs(dal);
    const double sign_a = da > 0.0 ? 1.0 : (da < 0.0 ? -1.0 : 0.0);
    const double sign_al = dal > 0.0 ? 1.0 : (dal < 0.0 ? -1.0 : 0.0);
    out.grad_a[i] = dtheta[i] + tie_scale * sign_a;
    out.grad_alpha[i] = dtheta[i] * p.B[i] + tie_scale * sign_al;
  }
  out.loss = ce + tie_scale * tie_sum;
  return out;
}

void adam_step(AdaptiveParams& p, const ParamVector& grad_a,
               const ParamVector& grad_alpha, AdamState& state,
               const AdamConfig& cfg, bool update_alpha) {
  const std::size_t n = p.A.size();
  if (grad_a.size() != n || grad_alpha.size() != n || state.mA.size() != n) {
    throw DimensionError("adam_step: state/gradient length mismatch");
  }
  state.step += 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));

  const std::int64_t total = static_cast<std::int64_t>(n);
#pragma omp parallel for if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < total; ++i) {
    {
      double g = grad_a[i];
      state.mA[i] = cfg.beta1 * state.mA[i] + (1.0 - cfg.beta1) * g;
      state.vA[i] = cfg.beta2 * state.vA[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = state.mA[i] / bc1;
      double vhat = state.vA[i] / bc2;
      p.A[i] -= cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.A[i]);
    }
    if (update_alpha) {
      double g = grad_alpha[i];
      state.mAlpha[i] = cfg.beta1 * state.mAlpha[i] + (1.0 - cfg.beta1) * g;
      state.vAlpha[i] = cfg.beta2 * state.vAlpha[i] + (1.0 - cfg.beta2) * g * g;
      double mhat = state.mAlpha[i] / bc1;
      double vhat = state.vAlpha[i] / bc2;
      p.alpha[i] -=
          cfg.lr * (mhat / (std::sqrt(vhat) + cfg.eps) + cfg.weight_decay * p.alpha[i]);
    }
  }
}

void snapshot_anchors(AdaptiveParams& p) {
  p.A_anchor = p.A;
  p.alpha_anchor = p.alpha;
}

void save_params(const std::string& path, const LayerShapes& shapes,
                 const ParamVector& params) {
  ParamLayout layout(shapes);
  check_param_length(layout, params, "save_params");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_params: cannot open " + path);
  out.write(kParamMagic, sizeof(kParamMagic));
  std::uint32_t version = kParamVersion;
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  std::uint64_t dims[4] = {shapes.proto_dim, shapes.hidden_dim, shapes.num_labels,
                           params.size()};
  out.write(reinterpret_cast<const char*>(dims), sizeof(dims));
  out.write(reinterpret_cast<const char*>(params.data()),
            static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!out) throw IoError("save_params: write failed for " + path);
}

ParamVector load_params(const std::string& path, LayerShapes* shapes_out) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_params: cannot open " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kParamMagic, sizeof(magic)) != 0) {
    throw ParseError("load_params: bad magic in " + path);
  }
  std::uint32_t version = 0;
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  if (!in || version != kParamVersion) {
    throw ParseError("load_params: unsupported version in " + path);
  }
  std::uint64_t dims[4];
  in.read(reinterpret_cast<char*>(dims), sizeof(dims));
  if (!in) throw ParseError("load_params: truncated header in " + path);
  LayerShapes shapes{dims[0], dims[1], dims[2]};
  ParamLayout layout(shapes);
  if (dims[3] != layout.total) {
    throw ParseError("load_params: length field disagrees with shapes in " + path);
  }
  ParamVector params(dims[3]);
  in.read(reinterpret_cast<char*>(params.data()),
          static_cast<std::streamsize>(params.size() * sizeof(double)));
  if (!in) throw ParseError("load_params: truncated payload in " + path);
  if (shapes_out) *shapes_out = shapes;
  return params;
}

}  // namespace fedstil
