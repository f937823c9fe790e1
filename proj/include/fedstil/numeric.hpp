#pragma once

#include <cstddef>
#include <cstdint>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "fedstil/errors.hpp"

namespace fedstil {

using Vector = std::vector<double>;

// Dense row-major matrix.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> values;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, double fill = 0.0)
      : rows(r), cols(c), values(r * c, fill) {}

  double& at(std::size_t r, std::size_t c) { return values[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return values[r * cols + c]; }
  double* row(std::size_t r) { return values.data() + r * cols; }
  const double* row(std::size_t r) const { return values.data() + r * cols; }
};

bool all_finite(const Vector& v);
bool all_finite(const Matrix& m);

// Discrete distribution: entries in (0, 1], summing to 1 within 1e-9.
class ProbVector {
 public:
  explicit ProbVector(Vector values);

  std::size_t size() const { return values_.size(); }
  double operator[](std::size_t i) const { return values_[i]; }
  const Vector& values() const { return values_; }

 private:
  Vector values_;
};

// Max-subtracted temperature softmax.
ProbVector softmax(const Vector& v, double temperature);

// Sum_i p_i * ln(p_i / q_i), entries clamped to >= 1e-12 before the log.
double kl_divergence(const ProbVector& p, const ProbVector& q);

Vector matvec(const Matrix& m, const Vector& v);
Vector hadamard(const Vector& a, const Vector& b);
// s * a + b
Vector axpy(double s, const Vector& a, const Vector& b);

// D[i][j] = squared euclidean distance between queries row i and gallery row j.
Matrix pairwise_sq_euclidean(const Matrix& queries, const Matrix& gallery);

// Deterministic seeded generator. Uniforms take the top 53 bits of a
// mersenne-twister word; normals come from Box-Muller over two uniforms
// (second value cached); shuffle is Fisher-Yates with rejection-sampled
// bounded draws. Identical seeds give identical sequences on the same build.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  // [0, 1)
  double uniform() {
    return static_cast<double>(engine_() >> 11) * 0x1.0p-53;
  }

  double normal();

  // uniform over [0, bound); bound must be positive
  std::uint64_t uniform_int(std::uint64_t bound);

  template <class T>
  void shuffle(std::vector<T>& items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  std::string save_state() const;
  void restore_state(const std::string& text);

 private:
  std::mt19937_64 engine_;
  bool has_cached_ = false;
  double cached_ = 0.0;
};

// Splitmix64-style derivation of independent sub-seeds from one master seed.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag, std::uint64_t index = 0);

}  // namespace fedstil
