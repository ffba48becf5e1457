#pragma once

// Eigen-backed decompositions used by diagnostics, oracles and residual norms.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "soft/errors.hpp"
#include "soft/matrix.hpp"

namespace soft {

using EigenRowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Eigen::Map<const EigenRowMajor> as_eigen(const Matrix& m) {
  return {m.data(), static_cast<Eigen::Index>(m.rows()), static_cast<Eigen::Index>(m.cols())};
}

template <typename Derived>
Matrix from_eigen(const Eigen::MatrixBase<Derived>& e) {
  Matrix m(static_cast<std::size_t>(e.rows()), static_cast<std::size_t>(e.cols()));
  for (Eigen::Index i = 0; i < e.rows(); ++i)
    for (Eigen::Index j = 0; j < e.cols(); ++j) m(i, j) = e(i, j);
  return m;
}

// Eigenvalues of a symmetric matrix, sorted descending. Only the lower
// triangle is read.
inline std::vector<double> symmetric_eigenvalues(const Matrix& a) {
  if (!a.is_square()) throw ShapeError("symmetric_eigenvalues: matrix is not square");
  if (a.empty()) return {};
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(Eigen::MatrixXd(as_eigen(a)),
                                                        Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw AnalysisError("symmetric eigen-solver did not converge");
  const auto& ev = solver.eigenvalues();
  std::vector<double> out(ev.data(), ev.data() + ev.size());
  std::sort(out.begin(), out.end(), std::greater<>());
  return out;
}

// Largest singular value estimated from `iterations` power steps on aᵀa,
// starting from a fixed-seed random vector.
inline double power_iteration_norm(const Matrix& a, int iterations = 20,
                                   std::uint64_t seed = 0x5eed) {
  if (a.empty()) return 0.0;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> nd;
  Eigen::VectorXd v(a.cols());
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = nd(rng);
  v.normalize();
  auto e = as_eigen(a);
  double sigma = 0.0;
  for (int it = 0; it < iterations; ++it) {
    Eigen::VectorXd w = e.transpose() * (e * v);
    double nw = w.norm();
    if (nw == 0.0) return 0.0;
    v = w / nw;
    sigma = std::sqrt(nw);
  }
  return (e * v).norm() > sigma ? (e * v).norm() : sigma;
}

// Full-spectrum threshold below which spectral norms are computed exactly.
inline constexpr std::size_t kExactSpectralLimit = 256;

// Spectral norm. Symmetric inputs up to kExactSpectralLimit use a full
// eigen-solve; anything else falls back to power iteration.
inline double spectral_norm(const Matrix& a) {
  if (a.empty()) return 0.0;
  if (a.is_square() && a.rows() <= kExactSpectralLimit &&
      max_asymmetry(a) <= 1e-12 * std::max(1.0, max_abs(a))) {
    auto ev = symmetric_eigenvalues(a);
    return std::max(std::abs(ev.front()), std::abs(ev.back()));
  }
  if (a.rows() <= kExactSpectralLimit && a.cols() <= kExactSpectralLimit) {
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(as_eigen(a)));
    return svd.singularValues().size() ? svd.singularValues()(0) : 0.0;
  }
  return power_iteration_norm(a, 100);
}

}  // namespace soft
