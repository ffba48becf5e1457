#pragma once

// Linear-complexity softmax-free attention. Bottleneck tokens are sampled
// from Q, the Gaussian kernel is evaluated only against them, and the full
// n×n attention matrix is replaced by Pᵀ·NR(A)·P (optionally with the
// symmetric D^{-1/2} normalization), applied right-to-left to V.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "soft/dense_attention.hpp"
#include "soft/errors.hpp"
#include "soft/matrix.hpp"
#include "soft/pinv_newton.hpp"

namespace soft {

struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;
  std::size_t tokens() const noexcept { return h * w; }
};

enum class SamplingKind { convolution, average_pool, random, biased_first_m };

inline const char* to_string(SamplingKind k) {
  switch (k) {
    case SamplingKind::convolution: return "conv";
    case SamplingKind::average_pool: return "pool";
    case SamplingKind::random: return "random";
    case SamplingKind::biased_first_m: return "biased";
  }
  return "?";
}

inline SamplingKind parse_sampling(const std::string& s) {
  if (s == "conv" || s == "convolution") return SamplingKind::convolution;
  if (s == "pool" || s == "average_pool") return SamplingKind::average_pool;
  if (s == "random") return SamplingKind::random;
  if (s == "biased" || s == "biased_first_m") return SamplingKind::biased_first_m;
  throw UsageError("unknown sampling method '" + s + "'");
}

struct SamplingMethod {
  SamplingKind kind = SamplingKind::average_pool;
  // Window size for convolution / pooling (stride equals the window).
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  // Token count for random / biased selection.
  std::size_t count = 0;
  std::uint64_t seed = 0;

  static SamplingMethod pool(std::size_t k) { return {SamplingKind::average_pool, k, k, 0, 0}; }
  static SamplingMethod pool(std::size_t kh, std::size_t kw) {
    return {SamplingKind::average_pool, kh, kw, 0, 0};
  }
  static SamplingMethod conv(std::size_t k) { return {SamplingKind::convolution, k, k, 0, 0}; }
  static SamplingMethod random(std::size_t m, std::uint64_t seed) {
    return {SamplingKind::random, 1, 1, m, seed};
  }
  static SamplingMethod biased(std::size_t m) { return {SamplingKind::biased_first_m, 1, 1, m, 0}; }

  bool windowed() const noexcept {
    return kind == SamplingKind::convolution || kind == SamplingKind::average_pool;
  }

  // Number of bottleneck tokens produced on `grid`.
  std::size_t output_count(Grid grid) const {
    if (windowed()) {
      if (kernel_h == 0 || kernel_w == 0) throw ConfigError("sampling: kernel must be >= 1");
      return ((grid.h + kernel_h - 1) / kernel_h) * ((grid.w + kernel_w - 1) / kernel_w);
    }
    return count;
  }
};

// One pooling / convolution window: token indices and their offset inside the
// kernel (row-major over kernel_h × kernel_w). Right and bottom edge windows
// hold fewer tokens when the kernel does not tile the grid.
struct Window {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> offsets;
};

inline std::vector<Window> sampling_windows(Grid grid, std::size_t kh, std::size_t kw) {
  std::vector<Window> out;
  for (std::size_t r0 = 0; r0 < grid.h; r0 += kh) {
    for (std::size_t c0 = 0; c0 < grid.w; c0 += kw) {
      Window win;
      for (std::size_t r = r0; r < std::min(r0 + kh, grid.h); ++r) {
        for (std::size_t c = c0; c < std::min(c0 + kw, grid.w); ++c) {
          win.tokens.push_back(r * grid.w + c);
          win.offsets.push_back((r - r0) * kw + (c - c0));
        }
      }
      out.push_back(std::move(win));
    }
  }
  return out;
}

// Learnable k×k×d_e → d_e map of the convolution sampler. `weight` stacks one
// d_e×d_e block per kernel offset.
struct ConvSamplerWeights {
  Matrix weight;  // (kernel_h * kernel_w * d_e) × d_e
  Matrix bias;    // 1 × d_e
};

// Token indices chosen by the random / biased policies.
inline std::vector<std::size_t> selected_rows(const SamplingMethod& method, std::size_t n) {
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  if (method.kind == SamplingKind::random) {
    std::mt19937_64 rng(method.seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(method.count);
    std::sort(idx.begin(), idx.end());
  } else {
    idx.resize(method.count);
  }
  return idx;
}

inline void check_sampling(const TokenMatrix& q, Grid grid, const SamplingMethod& method,
                           const ConvSamplerWeights* conv) {
  if (grid.tokens() != q.rows())
    throw ShapeError("sample_bottleneck: grid " + std::to_string(grid.h) + "x" +
                     std::to_string(grid.w) + " does not hold " + std::to_string(q.rows()) + " tokens");
  const std::size_t m = method.output_count(grid);
  if (m < 1) throw ConfigError("sample_bottleneck: bottleneck length must be >= 1");
  if (m > q.rows()) throw ConfigError("sample_bottleneck: bottleneck length exceeds token count");
  if (method.kind == SamplingKind::convolution) {
    if (!conv) throw ConfigError("sample_bottleneck: convolution sampling needs weights");
    const std::size_t d = q.cols();
    if (conv->weight.rows() != method.kernel_h * method.kernel_w * d || conv->weight.cols() != d ||
        conv->bias.rows() != 1 || conv->bias.cols() != d)
      throw ShapeError("sample_bottleneck: convolution weights do not match kernel and d_e");
  }
}

// Q̃ = f_s(Q)
inline TokenMatrix sample_bottleneck(const TokenMatrix& q, Grid grid, const SamplingMethod& method,
                                     const ConvSamplerWeights* conv = nullptr) {
  check_sampling(q, grid, method, conv);
  const std::size_t d = q.cols();
  switch (method.kind) {
    case SamplingKind::average_pool: {
      auto wins = sampling_windows(grid, method.kernel_h, method.kernel_w);
      TokenMatrix out(wins.size(), d);
      for (std::size_t w = 0; w < wins.size(); ++w) {
        const double inv = 1.0 / static_cast<double>(wins[w].tokens.size());
        for (std::size_t t : wins[w].tokens)
          for (std::size_t k = 0; k < d; ++k) out(w, k) += q(t, k) * inv;
      }
      return out;
    }
    case SamplingKind::convolution: {
      auto wins = sampling_windows(grid, method.kernel_h, method.kernel_w);
      TokenMatrix out(wins.size(), d);
      for (std::size_t w = 0; w < wins.size(); ++w) {
        auto orow = out.row(w);
        for (std::size_t k = 0; k < d; ++k) orow[k] = conv->bias(0, k);
        for (std::size_t i = 0; i < wins[w].tokens.size(); ++i) {
          const std::size_t t = wins[w].tokens[i], base = wins[w].offsets[i] * d;
          for (std::size_t a = 0; a < d; ++a) {
            const double x = q(t, a);
            if (x == 0.0) continue;
            auto wrow = conv->weight.row(base + a);
            for (std::size_t k = 0; k < d; ++k) orow[k] += x * wrow[k];
          }
        }
      }
      return out;
    }
    case SamplingKind::random:
    case SamplingKind::biased_first_m: {
      auto idx = selected_rows(method, q.rows());
      TokenMatrix out(idx.size(), d);
      for (std::size_t i = 0; i < idx.size(); ++i) std::copy_n(q.row(idx[i]).data(), d, out.row(i).data());
      return out;
    }
  }
  throw ConfigError("sample_bottleneck: unknown method");
}

struct SamplingGradients {
  Matrix grad_q;
  Matrix grad_conv_weight;  // empty unless convolution
  Matrix grad_conv_bias;
};

// Reverse pass of sample_bottleneck.
inline SamplingGradients sample_bottleneck_backward(const TokenMatrix& q, Grid grid,
                                                    const SamplingMethod& method,
                                                    const ConvSamplerWeights* conv,
                                                    const Matrix& grad_sampled) {
  check_sampling(q, grid, method, conv);
  const std::size_t d = q.cols();
  SamplingGradients g{Matrix(q.rows(), d), {}, {}};
  switch (method.kind) {
    case SamplingKind::average_pool: {
      auto wins = sampling_windows(grid, method.kernel_h, method.kernel_w);
      for (std::size_t w = 0; w < wins.size(); ++w) {
        const double inv = 1.0 / static_cast<double>(wins[w].tokens.size());
        for (std::size_t t : wins[w].tokens)
          for (std::size_t k = 0; k < d; ++k) g.grad_q(t, k) += grad_sampled(w, k) * inv;
      }
      break;
    }
    case SamplingKind::convolution: {
      auto wins = sampling_windows(grid, method.kernel_h, method.kernel_w);
      g.grad_conv_weight = Matrix(conv->weight.rows(), d);
      g.grad_conv_bias = Matrix(1, d);
      for (std::size_t w = 0; w < wins.size(); ++w) {
        auto gout = grad_sampled.row(w);
        for (std::size_t k = 0; k < d; ++k) g.grad_conv_bias(0, k) += gout[k];
        for (std::size_t i = 0; i < wins[w].tokens.size(); ++i) {
          const std::size_t t = wins[w].tokens[i], base = wins[w].offsets[i] * d;
          for (std::size_t a = 0; a < d; ++a) {
            auto wrow = conv->weight.row(base + a);
            auto gwrow = g.grad_conv_weight.row(base + a);
            const double x = q(t, a);
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
              gwrow[k] += x * gout[k];
              acc += wrow[k] * gout[k];
            }
            g.grad_q(t, a) += acc;
          }
        }
      }
      break;
    }
    case SamplingKind::random:
    case SamplingKind::biased_first_m: {
      auto idx = selected_rows(method, q.rows());
      for (std::size_t i = 0; i < idx.size(); ++i)
        for (std::size_t k = 0; k < d; ++k) g.grad_q(idx[i], k) += grad_sampled(i, k);
      break;
    }
  }
  return g;
}

struct AttentionConfig {
  std::size_t d_e = 0;
  std::size_t heads = 1;
  std::size_t m = 0;
  SamplingMethod sampling;
  PinvConfig pinv;
  bool normalized = true;  // SOFT++ when true

  std::size_t head_dim() const { return d_e / heads; }

  void validate(Grid grid) const {
    if (d_e == 0) throw ConfigError("AttentionConfig: d_e must be >= 1");
    if (heads == 0 || d_e % heads != 0) throw ConfigError("AttentionConfig: d_e not divisible by heads");
    if (m == 0) throw ConfigError("AttentionConfig: m must be >= 1");
    if (m > grid.tokens()) throw ConfigError("AttentionConfig: m exceeds token count");
    if (sampling.output_count(grid) != m)
      throw ConfigError("AttentionConfig: sampling yields " + std::to_string(sampling.output_count(grid)) +
                        " tokens, expected m=" + std::to_string(m));
    pinv.validate();
  }
};

inline constexpr double kDegreeFloor = 1e-12;

// Everything one head keeps for its reverse pass.
struct SoftHeadCache {
  Matrix a;          // m×m bottleneck Gram
  Matrix p;          // m×n cross Gram exp(Q̃ ⊖ Q)
  PinvResult pinv;   // NR(A)
  std::vector<double> inv_sqrt_degree;  // D^{-1/2}, normalized mode only
  Matrix mid;        // NR(A), or D^{-1/2} NR(A) D^{-1/2}
  Matrix pv;         // P·V
  Matrix mpv;        // mid·P·V
};

// Single-head SOFT: out = Pᵀ·mid·(P·V). Never forms an n×n product.
inline TokenMatrix soft_head(const TokenMatrix& q, const TokenMatrix& q_tilde, const TokenMatrix& v,
                             const PinvConfig& pinv_cfg, bool normalized, SoftHeadCache* cache = nullptr) {
  const std::size_t dim = q.cols();
  SoftHeadCache local;
  SoftHeadCache& c = cache ? *cache : local;
  c.a = gaussian_gram(q_tilde, dim).values;
  c.p = gaussian_gram(q_tilde, q, dim).values;
  c.pinv = newton_pinv(c.a, pinv_cfg);
  if (normalized) {
    auto deg = row_sums(c.a);
    c.inv_sqrt_degree.resize(deg.size());
    for (std::size_t i = 0; i < deg.size(); ++i)
      c.inv_sqrt_degree[i] = 1.0 / std::sqrt(std::max(deg[i], kDegreeFloor));
    c.mid = scale_cols(scale_rows(c.pinv.approx_inverse, c.inv_sqrt_degree), c.inv_sqrt_degree);
  } else {
    c.inv_sqrt_degree.clear();
    c.mid = c.pinv.approx_inverse;
  }
  c.pv = matmul(c.p, v);
  c.mpv = matmul(c.mid, c.pv);
  return matmul_tn(c.p, c.mpv);
}

enum class InverseGradient { closed_form, unrolled };

struct SoftHeadGradients {
  Matrix grad_q;        // n×d_h
  Matrix grad_q_tilde;  // m×d_h
  Matrix grad_v;        // n×d_h
};

// Reverse pass of soft_head. The inverse is differentiated with
// pinv_backward on the forward iterate, or by unrolling the Newton steps.
inline SoftHeadGradients soft_head_backward(const TokenMatrix& q, const TokenMatrix& q_tilde,
                                            const TokenMatrix& v, const SoftHeadCache& c,
                                            const Matrix& grad_out, const PinvConfig& pinv_cfg,
                                            InverseGradient mode = InverseGradient::closed_form) {
  const std::size_t dim = q.cols();
  SoftHeadGradients g{Matrix(q.rows(), dim), Matrix(q_tilde.rows(), dim), {}};
  // out = Pᵀ R, R = mid·W, W = P·V
  Matrix grad_p = matmul_nt(c.mpv, grad_out);  // R Gᵀ
  Matrix grad_r = matmul(c.p, grad_out);
  Matrix grad_mid = matmul_nt(grad_r, c.pv);
  Matrix grad_w = matmul_tn(c.mid, grad_r);
  grad_p += matmul_nt(grad_w, v);
  g.grad_v = matmul_tn(c.p, grad_w);

  const Matrix& y = c.pinv.approx_inverse;
  const std::size_t m = y.rows();
  Matrix grad_a(m, m);
  Matrix grad_y;
  if (!c.inv_sqrt_degree.empty()) {
    const auto& s = c.inv_sqrt_degree;
    grad_y = scale_cols(scale_rows(grad_mid, s), s);
    // mid_ij = s_i y_ij s_j, s_i = (sum_j a_ij)^{-1/2}
    for (std::size_t i = 0; i < m; ++i) {
      double gs = 0.0;
      for (std::size_t j = 0; j < m; ++j) gs += grad_mid(i, j) * y(i, j) * s[j] + grad_mid(j, i) * y(j, i) * s[j];
      const double gdeg = gs * (-0.5) * s[i] * s[i] * s[i];
      for (std::size_t j = 0; j < m; ++j) grad_a(i, j) += gdeg;
    }
  } else {
    grad_y = std::move(grad_mid);
  }
  grad_a += mode == InverseGradient::closed_form ? pinv_backward(y, grad_y)
                                                 : pinv_unrolled_backward(c.a, pinv_cfg, grad_y);

  gaussian_gram_backward(q_tilde, q_tilde, c.a, grad_a, dim, g.grad_q_tilde, g.grad_q_tilde);
  gaussian_gram_backward(q_tilde, q, c.p, grad_p, dim, g.grad_q_tilde, g.grad_q);
  return g;
}

struct SoftDiagnostics {
  std::size_t n = 0;
  std::size_t m = 0;
  SamplingKind method = SamplingKind::average_pool;
  int pinv_iterations = 0;      // max over heads
  double final_residual = 0.0;  // max over heads
  std::size_t peak_elements = 0;
  std::vector<std::vector<double>> head_traces;

  static const char* csv_header() { return "n,m,method,pinv_iterations,final_residual,peak_elements"; }
  std::string csv_row() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.10g", final_residual);
    return std::to_string(n) + ',' + std::to_string(m) + ',' + to_string(method) + ',' +
           std::to_string(pinv_iterations) + ',' + buf + ',' + std::to_string(peak_elements);
  }
};

struct SoftResult {
  TokenMatrix output;
  SoftDiagnostics diag;
};

// Multi-head SOFT / SOFT++ attention with K = Q. Sampling runs once on the
// full d_e-dimensional Q; each head slices both Q and Q̃.
inline SoftResult soft_attention(const TokenMatrix& q, const TokenMatrix& v, const AttentionConfig& cfg,
                                 Grid grid, const ConvSamplerWeights* conv = nullptr) {
  PeakScope scope;
  cfg.validate(grid);
  if (q.cols() != cfg.d_e) throw ShapeError("soft_attention: Q width does not match d_e");
  if (v.rows() != q.rows()) throw ShapeError("soft_attention: Q and V token counts differ");
  if (v.cols() % cfg.heads != 0) throw ShapeError("soft_attention: V width not divisible by heads");

  SoftResult res;
  res.diag.n = q.rows();
  res.diag.m = cfg.m;
  res.diag.method = cfg.sampling.kind;
  TokenMatrix q_tilde = sample_bottleneck(q, grid, cfg.sampling, conv);
  res.output = TokenMatrix(q.rows(), v.cols());
  const std::size_t dh = cfg.head_dim(), dv = v.cols() / cfg.heads;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    SoftHeadCache cache;
    TokenMatrix oh = soft_head(slice_cols(q, h * dh, dh), slice_cols(q_tilde, h * dh, dh),
                               slice_cols(v, h * dv, dv), cfg.pinv, cfg.normalized, &cache);
    set_cols(res.output, h * dv, oh);
    res.diag.pinv_iterations = std::max(res.diag.pinv_iterations, cache.pinv.iterations_used);
    res.diag.final_residual = std::max(res.diag.final_residual, cache.pinv.final_residual());
    res.diag.head_traces.push_back(std::move(cache.pinv.trace));
  }
  res.diag.peak_elements = scope.peak_above_baseline();
  return res;
}

inline constexpr std::size_t kMaterializeLimit = 1024;

// Full n×n Ŝ per head, for error measurement on small inputs only.
inline std::vector<GramMatrix> materialize_shat(const TokenMatrix& q, const AttentionConfig& cfg, Grid grid,
                                                const ConvSamplerWeights* conv = nullptr) {
  if (q.rows() > kMaterializeLimit)
    throw ConfigError("materialize_shat: refused for n=" + std::to_string(q.rows()) + " > " +
                      std::to_string(kMaterializeLimit));
  cfg.validate(grid);
  if (q.cols() != cfg.d_e) throw ShapeError("materialize_shat: Q width does not match d_e");
  TokenMatrix q_tilde = sample_bottleneck(q, grid, cfg.sampling, conv);
  const std::size_t dh = cfg.head_dim();
  std::vector<GramMatrix> out;
  for (std::size_t h = 0; h < cfg.heads; ++h) {
    TokenMatrix qh = slice_cols(q, h * dh, dh), qth = slice_cols(q_tilde, h * dh, dh);
    Matrix p = gaussian_gram(qth, qh, dh).values;
    Matrix a = gaussian_gram(qth, dh).values;
    Matrix mid = newton_pinv(a, cfg.pinv).approx_inverse;
    if (cfg.normalized) {
      auto deg = row_sums(a);
      for (double& x : deg) x = 1.0 / std::sqrt(std::max(x, kDegreeFloor));
      mid = scale_cols(scale_rows(mid, deg), deg);
    }
    out.push_back({matmul_tn(p, matmul(mid, p)), GramKind::self});
  }
  return out;
}

struct CostReport {
  double flops = 0.0;
  double elements = 0.0;
};

// Predicted time and space cost of one SOFT evaluation:
// time  (d_e + 4 m d_e + m^2) n + T m^3 + d_e m^2
// space (2m + d_e) n + m^2
inline CostReport complexity_accounting(const AttentionConfig& cfg, std::size_t n) {
  if (cfg.m == 0) throw ConfigError("complexity_accounting: m must be >= 1");
  const double de = static_cast<double>(cfg.d_e), m = static_cast<double>(cfg.m);
  const double nn = static_cast<double>(n), t = static_cast<double>(cfg.pinv.max_iterations);
  return {(de + 4.0 * m * de + m * m) * nn + t * m * m * m + de * m * m, (2.0 * m + de) * nn + m * m};
}

}  // namespace soft
