#pragma once

// Spectral instrumentation for attention matrices: eigenvalue bounds of
// softmax and Gaussian-kernel attention, and growth of the pseudo-inverse
// spectral norm with and without symmetric degree normalization.

#include <Eigen/Eigenvalues>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <ostream>
#include <vector>

#include "soft/dense_attention.hpp"
#include "soft/errors.hpp"
#include "soft/fit.hpp"
#include "soft/linalg.hpp"
#include "soft/pinv_newton.hpp"
#include "soft/random.hpp"

namespace soft {

enum class MatrixKind { softmax_attn, gaussian_gram, pinv_raw, pinv_normalized, other };

struct SpectrumReport {
  MatrixKind kind = MatrixKind::other;
  std::size_t size = 0;
  std::vector<double> eigenvalues;  // descending
  double spectral_norm = 0.0;
  double trace = 0.0;

  double lambda_max() const { return eigenvalues.empty() ? 0.0 : eigenvalues.front(); }
  double lambda_min() const { return eigenvalues.empty() ? 0.0 : eigenvalues.back(); }
};

// Spectrum of a square matrix. Symmetric inputs go through the self-adjoint
// solver; other inputs through a general solver, keeping real parts.
inline SpectrumReport eigen_spectrum(const Matrix& a, bool symmetric, MatrixKind kind = MatrixKind::other) {
  if (!a.is_square()) throw ShapeError("eigen_spectrum: matrix is not square");
  if (!all_finite(a)) throw AnalysisError("eigen_spectrum: non-finite entry");
  SpectrumReport r;
  r.kind = kind;
  r.size = a.rows();
  r.trace = trace(a);
  if (a.empty()) return r;
  if (symmetric) {
    r.eigenvalues = symmetric_eigenvalues(a);
    r.spectral_norm = std::max(std::abs(r.eigenvalues.front()), std::abs(r.eigenvalues.back()));
  } else {
    Eigen::EigenSolver<Eigen::MatrixXd> solver(Eigen::MatrixXd(as_eigen(a)), false);
    if (solver.info() != Eigen::Success) throw AnalysisError("eigen_spectrum: solver did not converge");
    for (Eigen::Index i = 0; i < solver.eigenvalues().size(); ++i)
      r.eigenvalues.push_back(solver.eigenvalues()(i).real());
    std::sort(r.eigenvalues.begin(), r.eigenvalues.end(), std::greater<>());
    r.spectral_norm = spectral_norm(a);
  }
  return r;
}

// Spectrum of the row-softmax attention D⁻¹A for A = exp(s·QQᵀ/√d_e).
// Evaluated through the similar symmetric matrix D^{-1/2} A D^{-1/2}, formed
// in the log domain so large logit scales do not overflow.
inline SpectrumReport softmax_spectrum(const TokenMatrix& q, double logit_scale = 1.0) {
  const std::size_t n = q.rows();
  Matrix logits = matmul_nt(q, q);
  const double s = logit_scale / std::sqrt(static_cast<double>(q.cols()));
  logits *= s;
  std::vector<double> log_deg(n);
  for (std::size_t i = 0; i < n; ++i) {
    auto r = logits.row(i);
    const double mx = *std::max_element(r.begin(), r.end());
    double z = 0.0;
    for (double x : r) z += std::exp(x - mx);
    log_deg[i] = mx + std::log(z);
  }
  Matrix sym(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) sym(i, j) = std::exp(logits(i, j) - 0.5 * (log_deg[i] + log_deg[j]));
  SpectrumReport r = eigen_spectrum(sym, true, MatrixKind::softmax_attn);
  // trace and norm of D⁻¹A itself
  Matrix probs(n, n);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) probs(i, j) = std::exp(logits(i, j) - log_deg[i]);
  r.trace = trace(probs);
  r.spectral_norm = spectral_norm(probs);
  return r;
}

struct BoundCheck {
  bool holds = false;
  SpectrumReport spectrum;
};

// Row-softmax attention has every eigenvalue in [0, 1].
inline BoundCheck check_prop3(const TokenMatrix& q, const TokenMatrix& k, std::size_t d_e,
                                    double logit_scale = 1.0) {
  if (q.cols() != d_e || k.cols() != d_e) throw ShapeError("check_prop3: dims do not match d_e");
  if (!(q == k)) throw ShapeError("check_prop3: the bound needs a symmetric kernel (Q == K)");
  BoundCheck c;
  c.spectrum = softmax_spectrum(q, logit_scale);
  c.holds = c.spectrum.lambda_max() <= 1.0 + 1e-8 && c.spectrum.lambda_min() >= -1e-8;
  return c;
}

// Gaussian self-Gram: lambda_max <= n and trace == n.
inline BoundCheck check_prop4(const TokenMatrix& q, std::size_t d_e) {
  BoundCheck c;
  c.spectrum = eigen_spectrum(gaussian_gram(q, d_e).values, true, MatrixKind::gaussian_gram);
  const double n = static_cast<double>(q.rows());
  c.holds = c.spectrum.lambda_max() <= n + 1e-6 && std::abs(c.spectrum.trace - n) <= 1e-6;
  return c;
}

struct NormGrowthRow {
  std::size_t m = 0;
  std::size_t trial = 0;
  double raw = 0.0;         // |A†|_2
  double normalized = 0.0;  // |D^{-1/2} A† D^{-1/2}|_2
};

struct NormGrowthTable {
  std::vector<NormGrowthRow> rows;
  std::vector<double> mean_raw;         // per m value
  std::vector<double> mean_normalized;  // per m value
  double raw_exponent = 0.0;
  double normalized_exponent = 0.0;
  // Per-trial exponents, for counting how many seeds separate.
  std::vector<double> trial_raw_exponent;
  std::vector<double> trial_normalized_exponent;
};

struct NormGrowthOptions {
  std::size_t dim = 16;
  std::size_t clusters = 4;
  double center_std = 4.0;
  double spread = 0.1;
  double rank_tol = 1e-12;
};

// The pair of norms for one bottleneck Gram.
inline NormGrowthRow pinv_norms(const Matrix& a, double rank_tol = 1e-12) {
  Matrix pinv = svd_pinv_detailed(a, rank_tol).pinv;
  auto deg = row_sums(a);
  for (double& x : deg) x = 1.0 / std::sqrt(std::max(x, 1e-12));
  NormGrowthRow r;
  r.m = a.rows();
  r.raw = spectral_norm(pinv);
  r.normalized = spectral_norm(scale_cols(scale_rows(pinv, deg), deg));
  return r;
}

// For each m and trial, draws clustered bottleneck tokens, builds A and
// records both pseudo-inverse norms. Exponents are log-log fits of the
// per-m means.
inline NormGrowthTable norm_growth_experiment(const std::vector<std::size_t>& m_values, std::size_t trials,
                                              std::uint64_t seed, const NormGrowthOptions& opt = {}) {
  if (m_values.empty()) throw ConfigError("norm_growth_experiment: empty m list");
  if (trials == 0) throw ConfigError("norm_growth_experiment: trials must be >= 1");
  NormGrowthTable t;
  std::vector<std::vector<double>> raw(trials), nor(trials);
  for (std::size_t mi = 0; mi < m_values.size(); ++mi) {
    const std::size_t m = m_values[mi];
    if (m == 0) throw ConfigError("norm_growth_experiment: m must be >= 1");
    double sr = 0.0, sn = 0.0;
    for (std::size_t trial = 0; trial < trials; ++trial) {
      Rng rng(derive_seed(seed, mi * 1000003 + trial));
      Matrix tokens = clustered_tokens(m, opt.dim, opt.clusters, rng, opt.center_std, opt.spread);
      NormGrowthRow row = pinv_norms(gaussian_gram(tokens, opt.dim).values, opt.rank_tol);
      row.trial = trial;
      sr += row.raw;
      sn += row.normalized;
      raw[trial].push_back(row.raw);
      nor[trial].push_back(row.normalized);
      t.rows.push_back(row);
    }
    t.mean_raw.push_back(sr / static_cast<double>(trials));
    t.mean_normalized.push_back(sn / static_cast<double>(trials));
  }
  if (m_values.size() >= 2) {
    std::vector<double> ms(m_values.begin(), m_values.end());
    t.raw_exponent = loglog_slope(ms, t.mean_raw);
    t.normalized_exponent = loglog_slope(ms, t.mean_normalized);
    for (std::size_t trial = 0; trial < trials; ++trial) {
      t.trial_raw_exponent.push_back(loglog_slope(ms, raw[trial]));
      t.trial_normalized_exponent.push_back(loglog_slope(ms, nor[trial]));
    }
  }
  return t;
}

inline void write_spectrum_csv(std::ostream& os, const SpectrumReport& r) {
  os << "index,value\n";
  for (std::size_t i = 0; i < r.eigenvalues.size(); ++i) os << i << ',' << r.eigenvalues[i] << '\n';
}

inline void write_norm_growth_csv(std::ostream& os, const NormGrowthTable& t) {
  os << "m,trial,raw,normalized\n";
  for (const auto& r : t.rows) os << r.m << ',' << r.trial << ',' << r.raw << ',' << r.normalized << '\n';
}

}  // namespace soft
