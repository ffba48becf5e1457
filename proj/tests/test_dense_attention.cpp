#include <gtest/gtest.h>

#include <cmath>

#include "soft/dense_attention.hpp"
#include "soft/linalg.hpp"
#include "soft/random.hpp"

using namespace soft;

TEST(Project, IdentityWeightsReturnInput) {
  Matrix eye = Matrix::identity(2);
  ProjectionSet proj(eye, eye, eye);
  auto p = project(eye, proj);
  EXPECT_EQ(p.q, eye);
  EXPECT_EQ(p.k, eye);
  EXPECT_EQ(p.v, eye);
}

TEST(Project, IdentityProjectionOfSingleRow) {
  Matrix x{{1, 2}};
  ProjectionSet proj(Matrix::identity(2), Matrix::identity(2));
  EXPECT_EQ(project(x, proj).q, (Matrix{{1, 2}}));
}

TEST(Project, ScalarDotProduct) {
  Matrix x{{1, 1}};
  ProjectionSet proj(Matrix{{2}, {3}}, Matrix{{1}, {1}});
  EXPECT_DOUBLE_EQ(project(x, proj).q(0, 0), 5.0);
}

TEST(Project, SharedQueryKeyStaysIdenticalAfterUpdate) {
  Rng rng(3);
  ProjectionSet proj(gaussian_matrix(4, 3, rng), gaussian_matrix(4, 3, rng));
  ASSERT_TRUE(proj.shared_qk());
  proj.wq()(1, 2) += 0.25;
  EXPECT_EQ(&proj.wq(), &proj.wk());
  Matrix x = gaussian_matrix(5, 4, rng);
  auto p = project(x, proj);
  EXPECT_EQ(p.q, p.k);
}

TEST(Project, DimensionMismatchThrows) {
  ProjectionSet proj(Matrix::identity(3), Matrix::identity(3));
  EXPECT_THROW(project(Matrix(2, 2), proj), ShapeError);
  EXPECT_THROW(ProjectionSet(Matrix(3, 2), Matrix(2, 2)), ShapeError);
}

TEST(GaussianGram, EqualRowsGiveOne) {
  Matrix q{{0.3, -1.2}};
  Matrix k{{0.3, -1.2}, {5.0, 5.0}};
  auto s = gaussian_gram(q, k, 2);
  EXPECT_EQ(s.values(0, 0), 1.0);
  EXPECT_EQ(s.kind, GramKind::cross);
}

TEST(GaussianGram, ScalarValue) {
  auto s = gaussian_gram(Matrix{{0.0}}, Matrix{{2.0}}, 1);
  EXPECT_NEAR(s.values(0, 0), std::exp(-2.0), 1e-15);
  EXPECT_NEAR(s.values(0, 0), 0.135335, 1e-6);
}

TEST(GaussianGram, SelfGramInvariants) {
  Rng rng(11);
  for (std::size_t n : {3u, 17u, 64u}) {
    Matrix q = gaussian_matrix(n, 4, rng);
    auto s = gaussian_gram(q, q, 4);
    EXPECT_EQ(s.kind, GramKind::self);
    EXPECT_LT(max_asymmetry(s.values), 1e-12);
    for (std::size_t i = 0; i < n; ++i) EXPECT_EQ(s.values(i, i), 1.0);
    for (double x : s.values.flat()) {
      EXPECT_GE(x, 0.0);
      EXPECT_LE(x, 1.0);
    }
  }
}

TEST(GaussianGram, PositiveSemiDefinite) {
  Rng rng(5);
  for (std::size_t n : {8u, 64u, 256u}) {
    // Tight tokens make the Gram close to rank deficient.
    Matrix q = gaussian_matrix(n, 3, rng, 0.3);
    auto ev = symmetric_eigenvalues(gaussian_gram(q, 3).values);
    EXPECT_GE(ev.back(), -1e-8 * static_cast<double>(n)) << "n=" << n;
  }
}

TEST(GaussianGram, ShapeErrors) {
  EXPECT_THROW(gaussian_gram(Matrix(2, 3), Matrix(2, 2), 3), ShapeError);
  EXPECT_THROW(gaussian_gram(Matrix(2, 3), 2), ShapeError);
}

TEST(GaussianGram, BackwardMatchesFiniteDifferences) {
  Rng rng(21);
  Matrix a = gaussian_matrix(3, 2, rng), b = gaussian_matrix(4, 2, rng);
  Matrix c = gaussian_matrix(3, 4, rng);  // L = sum(c ⊙ G)
  auto loss = [&](const Matrix& x, const Matrix& y) {
    Matrix g = gaussian_gram(x, y, 2).values;
    double s = 0.0;
    for (std::size_t i = 0; i < g.size(); ++i) s += c.data()[i] * g.data()[i];
    return s;
  };
  Matrix ga(3, 2), gb(4, 2);
  gaussian_gram_backward(a, b, gaussian_gram(a, b, 2).values, c, 2, ga, gb);
  const double h = 1e-6;
  for (std::size_t i = 0; i < a.size(); ++i) {
    Matrix ap = a, am = a;
    ap.data()[i] += h;
    am.data()[i] -= h;
    EXPECT_NEAR(ga.data()[i], (loss(ap, b) - loss(am, b)) / (2 * h), 1e-7);
  }
  for (std::size_t i = 0; i < b.size(); ++i) {
    Matrix bp = b, bm = b;
    bp.data()[i] += h;
    bm.data()[i] -= h;
    EXPECT_NEAR(gb.data()[i], (loss(a, bp) - loss(a, bm)) / (2 * h), 1e-7);
  }
}

TEST(SoftmaxAttention, SingleToken) {
  Matrix q{{0.5, -2.0}}, v{{3.0, 4.0}};
  EXPECT_EQ(softmax_attention_matrix(q, q), (Matrix{{1.0}}));
  EXPECT_EQ(softmax_attention(q, q, v), v);
}

TEST(SoftmaxAttention, ZeroQueriesGiveColumnMean) {
  Rng rng(2);
  Matrix z(4, 3), v = gaussian_matrix(4, 2, rng);
  Matrix out = softmax_attention(z, z, v);
  for (std::size_t j = 0; j < 2; ++j) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 4; ++i) mean += v(i, j) / 4.0;
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(out(i, j), mean, 1e-15);
  }
}

TEST(SoftmaxAttention, MatchesRowByRowEvaluation) {
  Rng rng(8);
  Matrix q = gaussian_matrix(3, 4, rng), k = gaussian_matrix(3, 4, rng), v = gaussian_matrix(3, 2, rng);
  Matrix out = softmax_attention(q, k, v);
  for (std::size_t i = 0; i < 3; ++i) {
    double w[3], z = 0.0;
    for (std::size_t j = 0; j < 3; ++j) {
      double dot = 0.0;
      for (std::size_t t = 0; t < 4; ++t) dot += q(i, t) * k(j, t);
      w[j] = std::exp(dot / 2.0);
      z += w[j];
    }
    for (std::size_t c = 0; c < 2; ++c) {
      double y = 0.0;
      for (std::size_t j = 0; j < 3; ++j) y += w[j] / z * v(j, c);
      EXPECT_NEAR(out(i, c), y, 1e-12);
    }
  }
}

TEST(SoftmaxAttention, RowsSumToOneUnderLargeLogits) {
  Rng rng(9);
  Matrix q = gaussian_matrix(16, 8, rng, 30.0);
  Matrix p = softmax_attention_matrix(q, q);
  ASSERT_TRUE(all_finite(p));
  for (double s : row_sums(p)) EXPECT_NEAR(s, 1.0, 1e-9);
}

TEST(ExactGaussianAttention, ZeroValues) {
  Rng rng(4);
  Matrix q = gaussian_matrix(5, 2, rng);
  EXPECT_EQ(exact_gaussian_attention(q, q, Matrix(5, 3)), Matrix(5, 3));
}

TEST(ExactGaussianAttention, SingleTokenReturnsValue) {
  Matrix q{{1.5, -0.5}}, v{{2.0, 7.0, -1.0}};
  EXPECT_EQ(exact_gaussian_attention(q, q, v), v);
}

TEST(ExactGaussianAttention, MatchesExplicitLoop) {
  Rng rng(12);
  Matrix q = gaussian_matrix(4, 2, rng), v = gaussian_matrix(4, 3, rng);
  Matrix out = exact_gaussian_attention(q, q, v);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t c = 0; c < 3; ++c) {
      double y = 0.0;
      for (std::size_t j = 0; j < 4; ++j) {
        const double d0 = q(i, 0) - q(j, 0), d1 = q(i, 1) - q(j, 1);
        y += std::exp(-(d0 * d0 + d1 * d1) / (2.0 * std::sqrt(2.0))) * v(j, c);
      }
      EXPECT_NEAR(out(i, c), y, 1e-12);
    }
  }
}

TEST(MultiHead, HeadsAreIndependentSlices) {
  Rng rng(6);
  Matrix q = gaussian_matrix(5, 4, rng), v = gaussian_matrix(5, 4, rng);
  Matrix out = multi_head(q, q, v, 2, [](const Matrix& a, const Matrix& b, const Matrix& c) {
    return softmax_attention(a, b, c);
  });
  Matrix h1 = softmax_attention(slice_cols(q, 2, 2), slice_cols(q, 2, 2), slice_cols(v, 2, 2));
  EXPECT_LT(max_abs_diff(slice_cols(out, 2, 2), h1), 1e-15);
  EXPECT_THROW(multi_head(q, q, v, 3, [](const Matrix& a, const Matrix&, const Matrix&) { return a; }),
               ShapeError);
}

TEST(Tokens, ValidationRejectsNonFinite) {
  Matrix x(2, 2);
  x(1, 1) = std::nan("");
  EXPECT_THROW(validate_tokens(x), ShapeError);
  EXPECT_THROW(validate_tokens(Matrix(0, 3)), ShapeError);
}
