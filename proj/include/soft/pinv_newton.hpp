#pragma once

// Newton-Raphson (Newton-Schulz) iteration for the Moore-Penrose inverse of a
// symmetric positive semi-definite matrix, the SVD reference it is checked
// against, and the closed-form inverse gradient used in backpropagation.

#include <cmath>
#include <cstddef>
#include <iostream>
#include <ostream>
#include <string>
#include <vector>

#include "soft/errors.hpp"
#include "soft/linalg.hpp"
#include "soft/matrix.hpp"

namespace soft {

enum class ResidualNorm { spectral, one_norm };

struct PinvConfig {
  int max_iterations = 20;
  double beta = 0.5;
  ResidualNorm residual_norm = ResidualNorm::spectral;
  // Stop once the relative residual drops below this value. 0 runs all
  // max_iterations steps.
  double early_stop_tol = 1e-6;

  void validate() const {
    if (max_iterations < 1) throw ConfigError("PinvConfig: max_iterations must be >= 1");
    if (!(beta > 0.0 && beta < 1.0)) throw ConfigError("PinvConfig: beta must lie in (0, 1)");
    if (early_stop_tol < 0.0) throw ConfigError("PinvConfig: early_stop_tol must be >= 0");
  }
};

struct PinvResult {
  Matrix approx_inverse;
  // trace[k] is the relative residual |A A_k A - A| / |A| of iterate k;
  // trace[0] belongs to the initial guess alpha * A.
  std::vector<double> trace;
  int iterations_used = 0;
  double alpha = 0.0;

  double final_residual() const { return trace.empty() ? 0.0 : trace.back(); }
};

inline constexpr int kMaxAlphaExponent = 64;

// Largest alpha = 2 beta^n / |A|_1^2 (smallest n >= 0) with |I - alpha A|_1 <= 1.
// Falls back to 2 / |A|_1^2 when no n <= 64 qualifies.
inline double init_alpha(const Matrix& a, double beta) {
  if (!a.is_square()) throw ShapeError("init_alpha: matrix is not square");
  if (!all_finite(a)) throw DegenerateInputError("init_alpha: non-finite entry");
  const double n1 = norm1(a);
  if (n1 == 0.0) throw DegenerateInputError("init_alpha: all-zero matrix has no usable scale");
  const double base = 2.0 / (n1 * n1);
  if (!(base > 0.0) || !std::isfinite(base))
    throw DegenerateInputError("init_alpha: matrix norm out of floating-point range");
  const std::size_t m = a.rows();
  double scale = 1.0;
  for (int n = 0; n <= kMaxAlphaExponent; ++n, scale *= beta) {
    const double alpha = base * scale;
    // |I - alpha A|_1 - 1 per column, arranged so that no 1 + tiny sum is
    // ever rounded: |1 - alpha a_jj| - 1 is -alpha a_jj or alpha a_jj - 2.
    bool holds = true;
    for (std::size_t j = 0; j < m && holds; ++j) {
      const double diag = alpha * a(j, j);
      double excess = diag <= 1.0 ? -diag : diag - 2.0;
      for (std::size_t i = 0; i < m; ++i)
        if (i != j) excess += alpha * std::abs(a(i, j));
      holds = excess <= 0.0;
    }
    if (holds) return alpha;
  }
  return base;
}

namespace detail {

inline double residual_norm(const Matrix& x, ResidualNorm kind) {
  return kind == ResidualNorm::spectral ? spectral_norm(x) : norm1(x);
}

// |A X A - A| / |A|
inline double relative_residual(const Matrix& a, const Matrix& x, double a_norm, ResidualNorm kind) {
  Matrix r = matmul(matmul(a, x), a);
  r -= a;
  return residual_norm(r, kind) / a_norm;
}

// Starting scale actually used by the iteration. Each eigen-component of
// A·A_k converges iff 0 < alpha lambda^2 < 2, and lambda <= |A|_1. The printed
// rule reaches alpha |A|_1^2 = 2 (A = I, or an all-ones A), where A_1 collapses
// to zero, so the scale is shrunk by beta until alpha |A|_1^2 < 2.
inline double effective_alpha(const Matrix& a, double beta) {
  double alpha = init_alpha(a, beta);
  const double n1 = norm1(a);
  while (alpha * n1 * n1 >= 2.0) alpha *= beta;
  return alpha;
}

inline Matrix newton_step(const Matrix& a, const Matrix& x) {
  Matrix next = x * 2.0;
  next -= matmul(matmul(x, a), x);
  return next;
}

}  // namespace detail

// A_0 = alpha A, A_{k+1} = 2 A_k - A_k A A_k.
inline PinvResult newton_pinv(const Matrix& a, const PinvConfig& cfg = {}) {
  cfg.validate();
  if (!a.is_square()) throw ShapeError("newton_pinv: matrix is not square");
  if (max_asymmetry(a) >= 1e-8) throw DegenerateInputError("newton_pinv: input is not symmetric");

  PinvResult out;
  out.alpha = detail::effective_alpha(a, cfg.beta);
  const double a_norm = detail::residual_norm(a, cfg.residual_norm);

  Matrix x = a * out.alpha;
  out.trace.push_back(detail::relative_residual(a, x, a_norm, cfg.residual_norm));
  for (int k = 0; k < cfg.max_iterations; ++k) {
    if (cfg.early_stop_tol > 0.0 && out.trace.back() < cfg.early_stop_tol) break;
    x = detail::newton_step(a, x);
    ++out.iterations_used;
    if (!all_finite(x)) {
      throw DivergenceError("newton_pinv: non-finite iterate at step " + std::to_string(k + 1),
                            out.trace);
    }
    const double r = detail::relative_residual(a, x, a_norm, cfg.residual_norm);
    out.trace.push_back(r);
    if (!std::isfinite(r)) {
      throw DivergenceError("newton_pinv: non-finite residual at step " + std::to_string(k + 1),
                            out.trace);
    }
  }
  out.approx_inverse = std::move(x);
  return out;
}

struct SvdPinv {
  Matrix pinv;
  std::vector<double> singular_values;
  std::size_t dropped = 0;  // singular values zeroed by rank_tol
};

// V Σ† Uᵀ with singular values below rank_tol * sigma_max treated as zero.
inline SvdPinv svd_pinv_detailed(const Matrix& a, double rank_tol = 1e-12) {
  if (!all_finite(a)) throw OracleUnavailableError("svd_pinv_oracle: non-finite input");
  SvdPinv out;
  if (a.empty()) return out;
  Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(as_eigen(a)),
                                        Eigen::ComputeFullU | Eigen::ComputeFullV);
  if (svd.info() != Eigen::Success) throw OracleUnavailableError("svd_pinv_oracle: SVD failed");
  const auto& s = svd.singularValues();
  const double cutoff = s.size() ? rank_tol * s(0) : 0.0;
  Eigen::VectorXd inv(s.size());
  for (Eigen::Index i = 0; i < s.size(); ++i) {
    out.singular_values.push_back(s(i));
    if (s(i) > cutoff && s(i) > 0.0) {
      inv(i) = 1.0 / s(i);
    } else {
      inv(i) = 0.0;
      ++out.dropped;
    }
  }
  Eigen::MatrixXd p = svd.matrixV() * inv.asDiagonal() * svd.matrixU().transpose();
  out.pinv = from_eigen(p);
  return out;
}

inline Matrix svd_pinv_oracle(const Matrix& a, double rank_tol = 1e-12) {
  SvdPinv r = svd_pinv_detailed(a, rank_tol);
  if (r.dropped > 0) {
    std::clog << "warning: svd_pinv_oracle dropped " << r.dropped << " of "
              << r.singular_values.size() << " singular values below rank_tol\n";
  }
  return std::move(r.pinv);
}

// dL/dX = -Yᵀ (dL/dY) Yᵀ for Y = X⁻¹.
inline Matrix pinv_backward(const Matrix& y, const Matrix& grad_y) {
  require_same_shape(y, grad_y, "pinv_backward");
  if (!y.is_square()) throw ShapeError("pinv_backward: inverse is not square");
  Matrix g = matmul_tn(y, grad_y);  // Yᵀ G
  g = matmul_nt(g, y);              // (Yᵀ G) Yᵀ
  g *= -1.0;
  return g;
}

// Gradient with respect to A obtained by differentiating through every
// Newton step (alpha held constant). Reference for pinv_backward.
inline Matrix pinv_unrolled_backward(const Matrix& a, const PinvConfig& cfg, const Matrix& grad_y) {
  PinvResult fwd = newton_pinv(a, cfg);
  require_same_shape(a, grad_y, "pinv_unrolled_backward");
  std::vector<Matrix> iterates;
  iterates.reserve(static_cast<std::size_t>(fwd.iterations_used) + 1);
  iterates.push_back(a * fwd.alpha);
  for (int k = 0; k < fwd.iterations_used; ++k) iterates.push_back(detail::newton_step(a, iterates.back()));

  Matrix grad_a(a.rows(), a.cols());
  Matrix g = grad_y;
  for (int k = fwd.iterations_used - 1; k >= 0; --k) {
    const Matrix& x = iterates[static_cast<std::size_t>(k)];
    // next = 2x - x a x
    Matrix xa = matmul(x, a);
    Matrix ax = matmul(a, x);
    Matrix gx = g * 2.0;
    gx -= matmul_nt(g, ax);  // g (a x)ᵀ
    gx -= matmul_tn(xa, g);  // (x a)ᵀ g
    grad_a -= matmul_nt(matmul_tn(x, g), x);  // xᵀ g xᵀ
    g = std::move(gx);
  }
  grad_a += g * fwd.alpha;
  return grad_a;
}

inline void write_trace_csv(std::ostream& os, const PinvResult& r) {
  os << "iteration,residual\n";
  for (std::size_t k = 0; k < r.trace.size(); ++k) os << k << ',' << r.trace[k] << '\n';
}

}  // namespace soft
