#pragma once

// Quadratic reference attention: scaled dot-product softmax and the full
// Gaussian-kernel form. Both materialize the n×n attention matrix and serve
// as oracles for the linearized path.

#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>

#include "soft/errors.hpp"
#include "soft/matrix.hpp"

namespace soft {

// n×d token features. Rows are tokens.
using TokenMatrix = Matrix;

inline void validate_tokens(const TokenMatrix& x, const char* what = "tokens") {
  if (x.rows() < 1 || x.cols() < 1) throw ShapeError(std::string(what) + ": empty token matrix");
  if (!all_finite(x)) throw ShapeError(std::string(what) + ": non-finite entry");
}

// Q/K/V projection weights. With a shared query/key projection there is only
// one stored matrix, so W_k is W_q by construction.
class ProjectionSet {
 public:
  ProjectionSet(Matrix wq, Matrix wv) : wq_(std::move(wq)), wv_(std::move(wv)) { check(); }
  ProjectionSet(Matrix wq, Matrix wk, Matrix wv)
      : wq_(std::move(wq)), wk_(std::move(wk)), wv_(std::move(wv)) {
    check();
  }

  bool shared_qk() const noexcept { return !wk_.has_value(); }
  const Matrix& wq() const noexcept { return wq_; }
  const Matrix& wk() const noexcept { return wk_ ? *wk_ : wq_; }
  const Matrix& wv() const noexcept { return wv_; }
  Matrix& wq() noexcept { return wq_; }
  Matrix& wk() noexcept { return wk_ ? *wk_ : wq_; }
  Matrix& wv() noexcept { return wv_; }

  std::size_t input_dim() const noexcept { return wq_.rows(); }
  std::size_t embed_dim() const noexcept { return wq_.cols(); }

 private:
  void check() const {
    const Matrix& k = wk();
    if (k.rows() != wq_.rows() || wv_.rows() != wq_.rows())
      throw ShapeError("ProjectionSet: projections disagree on input dimension");
    if (k.cols() != wq_.cols()) throw ShapeError("ProjectionSet: W_q and W_k output dims differ");
  }

  Matrix wq_;
  std::optional<Matrix> wk_;
  Matrix wv_;
};

struct Projected {
  TokenMatrix q, k, v;
};

inline Projected project(const TokenMatrix& x, const ProjectionSet& proj) {
  if (x.cols() != proj.input_dim())
    throw ShapeError("project: token dim " + std::to_string(x.cols()) +
                     " does not match projection rows " + std::to_string(proj.input_dim()));
  Projected out{matmul(x, proj.wq()), {}, matmul(x, proj.wv())};
  out.k = proj.shared_qk() ? out.q : matmul(x, proj.wk());
  return out;
}

enum class GramKind { self, cross };

// Gaussian-kernel Gram matrix. `self` Grams are symmetric with unit diagonal.
struct GramMatrix {
  Matrix values;
  GramKind kind = GramKind::cross;
};

// Exponent scale of the kernel: exp(-|q-k|^2 * kernel_scale(d)).
inline double kernel_scale(std::size_t dim) { return 1.0 / (2.0 * std::sqrt(static_cast<double>(dim))); }

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double t = a[k] - b[k];
    s += t * t;
  }
  return s;
}

// S = exp(Q ⊖ Q). Only the upper triangle is evaluated; the result is
// exactly symmetric with an exact unit diagonal.
inline GramMatrix gaussian_gram(const TokenMatrix& q, std::size_t dim) {
  if (q.cols() != dim) throw ShapeError("gaussian_gram: token dim does not match d_e");
  const double c = kernel_scale(dim);
  const std::size_t n = q.rows();
  Matrix s(n, n);
  for (std::size_t i = 0; i < n; ++i) {
    s(i, i) = 1.0;
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = std::exp(-c * squared_distance(q.row(i), q.row(j)));
      s(i, j) = v;
      s(j, i) = v;
    }
  }
  return {std::move(s), GramKind::self};
}

// S[i,j] = exp(-|Q_i - K_j|^2 / (2 sqrt(d_e))). Passing the same object for
// both arguments yields a self Gram.
inline GramMatrix gaussian_gram(const TokenMatrix& q, const TokenMatrix& k, std::size_t dim) {
  if (&q == &k) return gaussian_gram(q, dim);
  if (q.cols() != dim || k.cols() != dim)
    throw ShapeError("gaussian_gram: token dims " + shape_str(q) + ", " + shape_str(k) +
                     " do not match d_e=" + std::to_string(dim));
  const double c = kernel_scale(dim);
  Matrix s(q.rows(), k.rows());
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < k.rows(); ++j)
      s(i, j) = std::exp(-c * squared_distance(q.row(i), k.row(j)));
  return {std::move(s), GramKind::cross};
}

// Reverse pass of G = exp(A ⊖ B): accumulates dL/dA into grad_a and dL/dB
// into grad_b. A self Gram passes the same tokens (and accumulator) twice.
inline void gaussian_gram_backward(const TokenMatrix& a, const TokenMatrix& b, const Matrix& gram,
                                   const Matrix& grad_gram, std::size_t dim, Matrix& grad_a,
                                   Matrix& grad_b) {
  require_same_shape(gram, grad_gram, "gaussian_gram_backward");
  const double c2 = 2.0 * kernel_scale(dim);
  const std::size_t d = a.cols();
  for (std::size_t i = 0; i < a.rows(); ++i) {
    for (std::size_t j = 0; j < b.rows(); ++j) {
      const double w = grad_gram(i, j) * gram(i, j) * c2;
      if (w == 0.0) continue;
      for (std::size_t k = 0; k < d; ++k) {
        const double diff = a(i, k) - b(j, k);
        grad_a(i, k) -= w * diff;
        grad_b(j, k) += w * diff;
      }
    }
  }
}

// Row-stochastic attention probabilities softmax(QKᵀ/√d_e).
inline Matrix softmax_attention_matrix(const TokenMatrix& q, const TokenMatrix& k) {
  if (q.cols() != k.cols()) throw ShapeError("softmax_attention: Q and K dims differ");
  Matrix logits = matmul_nt(q, k);
  const double inv = 1.0 / std::sqrt(static_cast<double>(q.cols()));
  for (std::size_t i = 0; i < logits.rows(); ++i) {
    auto r = logits.row(i);
    double mx = -std::numeric_limits<double>::infinity();
    for (double& x : r) {
      x *= inv;
      mx = std::max(mx, x);
    }
    double z = 0.0;
    for (double& x : r) {
      x = std::exp(x - mx);
      z += x;
    }
    for (double& x : r) x /= z;
  }
  return logits;
}

inline TokenMatrix softmax_attention(const TokenMatrix& q, const TokenMatrix& k, const TokenMatrix& v) {
  if (k.rows() != v.rows()) throw ShapeError("softmax_attention: K and V token counts differ");
  return matmul(softmax_attention_matrix(q, k), v);
}

// Unnormalized kernel attention S·V.
inline TokenMatrix exact_gaussian_attention(const TokenMatrix& q, const TokenMatrix& k,
                                            const TokenMatrix& v) {
  if (k.rows() != v.rows()) throw ShapeError("exact_gaussian_attention: K and V token counts differ");
  return matmul(gaussian_gram(q, k, q.cols()).values, v);
}

// Applies a single-head attention function independently to `heads`
// equal-width column slices and concatenates the results.
template <typename HeadFn>
TokenMatrix multi_head(const TokenMatrix& q, const TokenMatrix& k, const TokenMatrix& v,
                       std::size_t heads, HeadFn&& fn) {
  if (heads == 0 || q.cols() % heads != 0 || k.cols() != q.cols() || v.cols() % heads != 0)
    throw ShapeError("multi_head: feature dims not divisible by head count");
  const std::size_t dq = q.cols() / heads, dv = v.cols() / heads;
  TokenMatrix out(q.rows(), v.cols());
  for (std::size_t h = 0; h < heads; ++h) {
    TokenMatrix oh = fn(slice_cols(q, h * dq, dq), slice_cols(k, h * dq, dq), slice_cols(v, h * dv, dv));
    set_cols(out, h * dv, oh);
  }
  return out;
}

}  // namespace soft
