#pragma once

// Seeded generators for synthetic tokens and weights.

#include <cstdint>
#include <random>

#include "soft/matrix.hpp"

namespace soft {

using Rng = std::mt19937_64;

inline Matrix gaussian_matrix(std::size_t rows, std::size_t cols, Rng& rng, double stddev = 1.0) {
  std::normal_distribution<double> nd(0.0, stddev);
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = nd(rng);
  return m;
}

inline Matrix uniform_matrix(std::size_t rows, std::size_t cols, Rng& rng, double lo, double hi) {
  std::uniform_real_distribution<double> ud(lo, hi);
  Matrix m(rows, cols);
  for (double& x : m.flat()) x = ud(rng);
  return m;
}

// Tokens drawn around `clusters` random centres: centre ~ N(0, center_std^2),
// token = centre + N(0, spread^2). Token i belongs to cluster i % clusters.
inline Matrix clustered_tokens(std::size_t count, std::size_t dim, std::size_t clusters, Rng& rng,
                               double center_std = 4.0, double spread = 0.1) {
  Matrix centers = gaussian_matrix(clusters, dim, rng, center_std);
  std::normal_distribution<double> nd(0.0, spread);
  Matrix out(count, dim);
  for (std::size_t i = 0; i < count; ++i)
    for (std::size_t k = 0; k < dim; ++k) out(i, k) = centers(i % clusters, k) + nd(rng);
  return out;
}

// Derives an independent stream seed from a base seed and an index.
inline std::uint64_t derive_seed(std::uint64_t base, std::uint64_t index) {
  std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (index + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace soft
