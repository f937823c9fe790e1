#pragma once

#include <utility>
#include <vector>

#include "fedstil/model.hpp"
#include "fedstil/numeric.hpp"

// Serial reference kernels. Naive loop nests, no OpenMP, long-double
// accumulation where it is cheap. Tests use them as oracles against the
// parallel implementations; the bench tool times both.
namespace fedstil::reference {

Vector matvec(const Matrix& m, const Vector& v);

Matrix pairwise_sq_euclidean(const Matrix& queries, const Matrix& gallery);

// Extended-precision max-subtracted softmax, returned as a plain vector.
Vector softmax(const Vector& v, double temperature);

// Term-by-term KL sum with the same 1e-12 clamp as the library kernel.
double kl_divergence(const Vector& p, const Vector& q);

// sum_k weights[k] * vectors[k]
Vector weighted_sum(const std::vector<double>& weights,
                    const std::vector<const Vector*>& vectors);

// Per-sample forward pass through the two-layer head, one sample at a time.
Matrix forward_logits(const ParamVector& theta, const LayerShapes& shapes,
                      const Matrix& inputs);
Matrix forward_hidden(const ParamVector& theta, const LayerShapes& shapes,
                      const Matrix& inputs);

}  // namespace fedstil::reference
