#include "fedstil/numeric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

namespace fedstil {

namespace {

constexpr double kKlClamp = 1e-12;
// Smallest softmax entry kept strictly positive so ProbVector stays in (0, 1].
constexpr double kProbFloor = 1e-300;
// Below this element count the omp fork costs more than the loop.
constexpr std::size_t kParallelCutoff = 16384;

}  // namespace

bool all_finite(const Vector& v) {
  for (double x : v) {
    if (!std::isfinite(x)) return false;
  }
  return true;
}

bool all_finite(const Matrix& m) { return all_finite(m.values); }

ProbVector::ProbVector(Vector values) : values_(std::move(values)) {
  if (values_.empty()) throw InvalidInputError("ProbVector: empty");
  double sum = 0.0;
  for (double x : values_) {
    if (!(x > 0.0) || x > 1.0) {
      throw InvalidInputError("ProbVector: entry outside (0, 1]");
    }
    sum += x;
  }
  if (std::abs(sum - 1.0) > 1e-9) {
    throw InvalidInputError("ProbVector: entries sum to " + std::to_string(sum));
  }
}

ProbVector softmax(const Vector& v, double temperature) {
  if (v.empty()) throw InvalidInputError("softmax: empty input");
  if (!(temperature > 0.0) || !std::isfinite(temperature)) {
    throw InvalidInputError("softmax: temperature must be positive");
  }
  if (!all_finite(v)) throw InvalidInputError("softmax: non-finite input");

  Vector scaled(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) scaled[i] = v[i] / temperature;
  double m = *std::max_element(scaled.begin(), scaled.end());

  Vector out(v.size());
  double sum = 0.0;
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = std::exp(scaled[i] - m);
    sum += out[i];
  }
  for (double& x : out) x = std::max(x / sum, kProbFloor);
  return ProbVector(std::move(out));
}

double kl_divergence(const ProbVector& p, const ProbVector& q) {
  if (p.size() != q.size()) {
    throw DimensionError("kl_divergence: length mismatch " + std::to_string(p.size()) +
                         " vs " + std::to_string(q.size()));
  }
  double sum = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    double pi = std::max(p[i], kKlClamp);
    double qi = std::max(q[i], kKlClamp);
    sum += pi * std::log(pi / qi);
  }
  if (sum < 0.0) {
    if (sum < -kKlClamp) throw InvalidInputError("kl_divergence: negative result");
    sum = 0.0;
  }
  return sum;
}

Vector matvec(const Matrix& m, const Vector& v) {
  if (m.cols != v.size()) {
    throw DimensionError("matvec: " + std::to_string(m.cols) + " cols vs vector of " +
                         std::to_string(v.size()));
  }
  Vector out(m.rows, 0.0);
  const std::int64_t rows = static_cast<std::int64_t>(m.rows);
#pragma omp parallel for if (m.rows * m.cols > kParallelCutoff)
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* row = m.row(static_cast<std::size_t>(r));
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) acc += row[c] * v[c];
    out[static_cast<std::size_t>(r)] = acc;
  }
  return out;
}

Vector hadamard(const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("hadamard: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
  return out;
}

Vector axpy(double s, const Vector& a, const Vector& b) {
  if (a.size() != b.size()) throw DimensionError("axpy: length mismatch");
  Vector out(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = s * a[i] + b[i];
  return out;
}

Matrix pairwise_sq_euclidean(const Matrix& queries, const Matrix& gallery) {
  if (queries.cols != gallery.cols) {
    throw DimensionError("pairwise_sq_euclidean: column mismatch " +
                         std::to_string(queries.cols) + " vs " +
                         std::to_string(gallery.cols));
  }
  Matrix d(queries.rows, gallery.rows);
  const std::int64_t nq = static_cast<std::int64_t>(queries.rows);
#pragma omp parallel for if (queries.rows * gallery.rows * queries.cols > kParallelCutoff)
  for (std::int64_t i = 0; i < nq; ++i) {
    const double* q = queries.row(static_cast<std::size_t>(i));
    for (std::size_t j = 0; j < gallery.rows; ++j) {
      const double* g = gallery.row(j);
      double acc = 0.0;
      for (std::size_t c = 0; c < queries.cols; ++c) {
        double diff = q[c] - g[c];
        acc += diff * diff;
      }
      d.at(static_cast<std::size_t>(i), j) = acc;
    }
  }
  return d;
}

double Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_;
  }
  // Box-Muller: u1 in (0, 1], u2 in [0, 1).
  double u1 = 1.0 - uniform();
  double u2 = uniform();
  double r = std::sqrt(-2.0 * std::log(u1));
  double theta = 2.0 * M_PI * u2;
  cached_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

std::uint64_t Rng::uniform_int(std::uint64_t bound) {
  if (bound == 0) throw InvalidInputError("uniform_int: zero bound");
  std::uint64_t mask = bound - 1;
  mask |= mask >> 1;
  mask |= mask >> 2;
  mask |= mask >> 4;
  mask |= mask >> 8;
  mask |= mask >> 16;
  mask |= mask >> 32;
  for (;;) {
    std::uint64_t r = engine_() & mask;
    if (r < bound) return r;
  }
}

std::string Rng::save_state() const {
  std::ostringstream os;
  os << engine_ << ' ' << (has_cached_ ? 1 : 0);
  if (has_cached_) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%a", cached_);
    os << ' ' << buf;
  }
  return os.str();
}

void Rng::restore_state(const std::string& text) {
  std::istringstream is(text);
  is >> engine_;
  int cached_flag = 0;
  is >> cached_flag;
  has_cached_ = cached_flag != 0;
  cached_ = 0.0;
  if (has_cached_) {
    std::string hex;
    is >> hex;
    cached_ = std::strtod(hex.c_str(), nullptr);
  }
  if (is.fail()) throw ParseError("Rng::restore_state: malformed state string");
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(seed ^ mix(tag)) ^ index);
}

}  // namespace fedstil
