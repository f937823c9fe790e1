// Times the OpenMP kernels against their serial reference implementations
// and checks that both produce identical bits.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <string>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "fedstil/model.hpp"
#include "fedstil/numeric.hpp"
#include "fedstil/reference.hpp"

namespace {

using Clock = std::chrono::steady_clock;

template <class F>
double time_best_of(int reps, F&& fn) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    auto start = Clock::now();
    fn();
    auto stop = Clock::now();
    best = std::min(best, std::chrono::duration<double>(stop - start).count());
  }
  return best;
}

double max_abs_diff(const fedstil::Vector& a, const fedstil::Vector& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

void report(const char* name, double serial_s, double parallel_s, double diff) {
  std::printf("%-24s serial %9.3f ms   parallel %9.3f ms   speedup %5.2fx   max|diff| %g\n",
              name, serial_s * 1e3, parallel_s * 1e3, serial_s / parallel_s, diff);
}

}  // namespace

int main(int argc, char** argv) {
  int scale = 1;
  int reps = 5;
  for (int i = 1; i < argc; ++i) {
    std::string arg = argv[i];
    if (arg == "--scale" && i + 1 < argc) {
      scale = std::atoi(argv[++i]);
    } else if (arg == "--reps" && i + 1 < argc) {
      reps = std::atoi(argv[++i]);
    } else {
      std::fprintf(stderr, "usage: %s [--scale N] [--reps N]\n", argv[0]);
      return 2;
    }
  }

#ifdef _OPENMP
  std::printf("openmp threads: %d\n", omp_get_max_threads());
#else
  std::printf("openmp: disabled at build time\n");
#endif

  fedstil::Rng rng(20240901);

  {
    const std::size_t rows = 2048 * static_cast<std::size_t>(scale);
    const std::size_t cols = 1024;
    fedstil::Matrix m(rows, cols);
    for (double& x : m.values) x = rng.normal();
    fedstil::Vector v(cols);
    for (double& x : v) x = rng.normal();

    fedstil::Vector serial_out, parallel_out;
    double serial_s = time_best_of(reps, [&] { serial_out = fedstil::reference::matvec(m, v); });
    double parallel_s = time_best_of(reps, [&] { parallel_out = fedstil::matvec(m, v); });
    report("matvec", serial_s, parallel_s, max_abs_diff(serial_out, parallel_out));
  }

  {
    const std::size_t nq = 256 * static_cast<std::size_t>(scale);
    const std::size_t ng = 1024;
    const std::size_t dim = 128;
    fedstil::Matrix q(nq, dim), g(ng, dim);
    for (double& x : q.values) x = rng.normal();
    for (double& x : g.values) x = rng.normal();

    fedstil::Matrix serial_out, parallel_out;
    double serial_s =
        time_best_of(reps, [&] { serial_out = fedstil::reference::pairwise_sq_euclidean(q, g); });
    double parallel_s =
        time_best_of(reps, [&] { parallel_out = fedstil::pairwise_sq_euclidean(q, g); });
    report("pairwise_sq_euclidean", serial_s, parallel_s,
           max_abs_diff(serial_out.values, parallel_out.values));
  }

  {
    fedstil::LayerShapes shapes{128, 256, 128};
    fedstil::ParamLayout layout(shapes);
    fedstil::ParamVector theta(layout.total);
    for (double& x : theta) x = 0.05 * rng.normal();
    const std::size_t batch = 512 * static_cast<std::size_t>(scale);
    fedstil::Matrix inputs(batch, shapes.proto_dim);
    for (double& x : inputs.values) x = rng.normal();

    fedstil::Matrix serial_out;
    fedstil::ForwardCache parallel_out;
    double serial_s = time_best_of(
        reps, [&] { serial_out = fedstil::reference::forward_logits(theta, shapes, inputs); });
    double parallel_s =
        time_best_of(reps, [&] { parallel_out = fedstil::forward(theta, shapes, inputs); });
    report("forward", serial_s, parallel_s,
           max_abs_diff(serial_out.values, parallel_out.logits.values));
  }

  return 0;
}
