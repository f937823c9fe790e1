#include "fedstil/reference.hpp"

#include <cmath>

namespace fedstil::reference {

Vector matvec(const Matrix& m, const Vector& v) {
  Vector out(m.rows, 0.0);
  for (std::size_t r = 0; r < m.rows; ++r) {
    double acc = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) acc += m.at(r, c) * v[c];
    out[r] = acc;
  }
  return out;
}

Matrix pairwise_sq_euclidean(const Matrix& queries, const Matrix& gallery) {
  Matrix d(queries.rows, gallery.rows);
  for (std::size_t i = 0; i < queries.rows; ++i) {
    for (std::size_t j = 0; j < gallery.rows; ++j) {
      double acc = 0.0;
      for (std::size_t c = 0; c < queries.cols; ++c) {
        double diff = queries.at(i, c) - gallery.at(j, c);
        acc += diff * diff;
      }
      d.at(i, j) = acc;
    }
  }
  return d;
}

Vector softmax(const Vector& v, double temperature) {
  long double m = v[0] / temperature;
  for (double x : v) m = std::max(m, static_cast<long double>(x) / temperature);
  std::vector<long double> e(v.size());
  long double sum = 0.0L;
  for (std::size_t i = 0; i < v.size(); ++i) {
    e[i] = std::exp(static_cast<long double>(v[i]) / temperature - m);
    sum += e[i];
  }
  Vector out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<double>(e[i] / sum);
  }
  return out;
}

double kl_divergence(const Vector& p, const Vector& q) {
  long double sum = 0.0L;
  for (std::size_t i = 0; i < p.size(); ++i) {
    long double pi = std::max<long double>(p[i], 1e-12L);
    long double qi = std::max<long double>(q[i], 1e-12L);
    sum += pi * std::log(pi / qi);
  }
  return sum < 0.0L ? 0.0 : static_cast<double>(sum);
}

Vector weighted_sum(const std::vector<double>& weights,
                    const std::vector<const Vector*>& vectors) {
  Vector out(vectors.empty() ? 0 : vectors.front()->size(), 0.0);
  for (std::size_t k = 0; k < vectors.size(); ++k) {
    for (std::size_t i = 0; i < out.size(); ++i) {
      out[i] += weights[k] * (*vectors[k])[i];
    }
  }
  return out;
}

namespace {

void forward_one(const ParamVector& theta, const LayerShapes& s, const double* x,
                 double* hidden, double* logits) {
  ParamLayout layout(s);
  const double* w1 = theta.data() + layout.w1_offset;
  const double* b1 = theta.data() + layout.b1_offset;
  const double* w2 = theta.data() + layout.w2_offset;
  for (std::size_t j = 0; j < s.hidden_dim; ++j) {
    double z = b1[j];
    for (std::size_t i = 0; i < s.proto_dim; ++i) z += x[i] * w1[i * s.hidden_dim + j];
    hidden[j] = z > 0.0 ? z : 0.0;
  }
  for (std::size_t l = 0; l < s.num_labels; ++l) {
    double acc = 0.0;
    for (std::size_t j = 0; j < s.hidden_dim; ++j) {
      acc += hidden[j] * w2[j * s.num_labels + l];
    }
    logits[l] = acc;
  }
}

}  // namespace

Matrix forward_logits(const ParamVector& theta, const LayerShapes& shapes,
                      const Matrix& inputs) {
  Matrix logits(inputs.rows, shapes.num_labels);
  Vector hidden(shapes.hidden_dim);
  for (std::size_t n = 0; n < inputs.rows; ++n) {
    forward_one(theta, shapes, inputs.row(n), hidden.data(), logits.row(n));
  }
  return logits;
}

Matrix forward_hidden(const ParamVector& theta, const LayerShapes& shapes,
                      const Matrix& inputs) {
  Matrix hidden(inputs.rows, shapes.hidden_dim);
  Vector logits(shapes.num_labels);
  for (std::size_t n = 0; n < inputs.rows; ++n) {
    forward_one(theta, shapes, inputs.row(n), hidden.row(n), logits.data());
  }
  return hidden;
}

}  // namespace fedstil::reference
