// Runs SOFT and SOFT++ attention on a 28x28 token grid, compares them with
// exact Gaussian-kernel attention and prints the Newton residual trace.

#include <cmath>
#include <cstdio>

#include "soft/dense_attention.hpp"
#include "soft/nystrom_soft.hpp"
#include "soft/random.hpp"

using namespace soft;

int main() {
  const Grid grid{28, 28};
  const std::size_t d = 32;
  Rng rng(42);
  // smooth random field over the grid plus a little per-token noise
  Matrix freq = gaussian_matrix(d, 2, rng, 0.15), phase = uniform_matrix(1, d, rng, 0.0, 6.283);
  Matrix q = gaussian_matrix(grid.tokens(), d, rng, 0.05);
  for (std::size_t r = 0; r < grid.h; ++r)
    for (std::size_t c = 0; c < grid.w; ++c)
      for (std::size_t k = 0; k < d; ++k)
        q(r * grid.w + c, k) += 1.5 * std::sin(freq(k, 0) * double(r) + freq(k, 1) * double(c) + phase(0, k));
  Matrix v = gaussian_matrix(grid.tokens(), d, rng);

  PeakScope exact_scope;
  Matrix exact = exact_gaussian_attention(q, q, v);
  const std::size_t exact_peak = exact_scope.peak_above_baseline();

  for (bool normalized : {false, true}) {
    AttentionConfig cfg;
    cfg.d_e = d;
    cfg.sampling = SamplingMethod::pool(4);  // 7x7 = 49 bottleneck tokens
    cfg.m = cfg.sampling.output_count(grid);
    cfg.normalized = normalized;
    SoftResult r = soft_attention(q, v, cfg, grid);
    std::printf("%s: n=%zu m=%zu  newton iterations %d, final residual %.2e\n", normalized ? "SOFT++" : "SOFT",
                r.diag.n, r.diag.m, r.diag.pinv_iterations, r.diag.final_residual);
    std::printf("  peak live elements %zu (exact attention: %zu)\n", r.diag.peak_elements, exact_peak);
    if (!normalized)
      std::printf("  relative difference to exact attention %.3f\n", frobenius(r.output - exact) / frobenius(exact));
    std::printf("  residual trace:");
    for (double t : r.diag.head_traces.front()) std::printf(" %.1e", t);
    std::printf("\n");
  }
  return 0;
}
