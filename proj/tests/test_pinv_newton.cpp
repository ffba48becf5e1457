#include <gtest/gtest.h>

#include <Eigen/LU>
#include <cmath>
#include <sstream>

#include "soft/dense_attention.hpp"
#include "soft/pinv_newton.hpp"
#include "soft/random.hpp"

using namespace soft;

namespace {

Matrix random_gram(std::size_t m, std::uint64_t seed, double token_std = 1.0, std::size_t dim = 32) {
  Rng rng(seed);
  return gaussian_gram(gaussian_matrix(m, dim, rng, token_std), dim).values;
}

// Independent inverse through LU, for finite-difference oracles.
Matrix lu_inverse(const Matrix& a) { return from_eigen(Eigen::MatrixXd(as_eigen(a)).inverse()); }

}  // namespace

TEST(InitAlpha, IdentityHandEvaluation) {
  EXPECT_DOUBLE_EQ(init_alpha(Matrix::identity(1), 0.5), 2.0);
  EXPECT_DOUBLE_EQ(init_alpha(Matrix::identity(2), 0.5), 2.0);
}

TEST(InitAlpha, HugeNormStaysPositiveAndFinite) {
  Matrix a(3, 3, 1e6);
  double alpha = init_alpha(a, 0.5);
  EXPECT_GT(alpha, 0.0);
  EXPECT_TRUE(std::isfinite(alpha));
}

TEST(InitAlpha, FallsBackWhenInequalityNeverHolds) {
  // Column sums above 2 make |I - alpha A|_1 > 1 for every alpha.
  Matrix a = random_gram(16, 1, 0.2);
  const double n1 = norm1(a);
  ASSERT_GT(n1, 2.0);
  EXPECT_DOUBLE_EQ(init_alpha(a, 0.5), 2.0 / (n1 * n1));
}

TEST(InitAlpha, PicksSmallestExponent) {
  Matrix a = Matrix::diagonal(std::vector<double>{2.0, 0.5});
  // n = 0: alpha = 0.5, |I - alpha A|_1 = max(0, 0.75) <= 1.
  EXPECT_DOUBLE_EQ(init_alpha(a, 0.5), 0.5);
}

TEST(InitAlpha, DegenerateInputs) {
  EXPECT_THROW(init_alpha(Matrix(3, 3), 0.5), DegenerateInputError);
  EXPECT_THROW(init_alpha(Matrix(2, 2, 1e200), 0.5), DegenerateInputError);
  EXPECT_THROW(init_alpha(Matrix(2, 3, 1.0), 0.5), ShapeError);
}

TEST(NewtonPinv, IdentityIsAFixedPoint) {
  for (std::size_t m : {1u, 2u, 7u}) {
    auto r = newton_pinv(Matrix::identity(m), {.max_iterations = 20, .early_stop_tol = 0.0});
    EXPECT_LT(max_abs_diff(r.approx_inverse, Matrix::identity(m)), 1e-12);
    EXPECT_LT(r.final_residual(), 1e-10);
  }
}

TEST(NewtonPinv, DiagonalInverse) {
  auto r = newton_pinv(Matrix::diagonal(std::vector<double>{2.0, 0.5}));
  EXPECT_LT(max_abs_diff(r.approx_inverse, Matrix::diagonal(std::vector<double>{0.5, 2.0})), 1e-6);
}

TEST(NewtonPinv, RankDeficientAllOnes) {
  auto r = newton_pinv(Matrix{{1, 1}, {1, 1}});
  EXPECT_LT(max_abs_diff(r.approx_inverse, Matrix(2, 2, 0.25)), 1e-6);
  // Larger all-ones matrices hit the fallback alpha.
  auto r5 = newton_pinv(Matrix(5, 5, 1.0));
  EXPECT_LT(max_abs_diff(r5.approx_inverse, Matrix(5, 5, 1.0 / 25.0)), 1e-6);
}

TEST(NewtonPinv, ConvergesMonotonicallyOnGaussianGrams) {
  for (std::size_t m : {8u, 16u, 49u}) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      Matrix a = random_gram(m, 100 + seed, 0.5);
      auto r = newton_pinv(a, {.max_iterations = 20, .early_stop_tol = 0.0});
      ASSERT_EQ(r.trace.size(), 21u);
      for (std::size_t k = 1; k < r.trace.size(); ++k)
        EXPECT_LE(r.trace[k], r.trace[k - 1] + 1e-10) << "m=" << m << " k=" << k;
      EXPECT_LT(r.trace.back(), 1e-5) << "m=" << m;
      EXPECT_LT(max_asymmetry(r.approx_inverse), 1e-8);
    }
  }
}

TEST(NewtonPinv, IllConditionedGramStaysMonotoneButNeedsMoreSteps) {
  // Tight tokens give cond(A) ~ 1e3; alpha lambda_min^2 starts near 1e-6.
  Matrix a = random_gram(49, 5, 0.25);
  auto r20 = newton_pinv(a, {.max_iterations = 20, .early_stop_tol = 0.0});
  auto r40 = newton_pinv(a, {.max_iterations = 40, .early_stop_tol = 0.0});
  for (std::size_t k = 1; k < r40.trace.size(); ++k) EXPECT_LE(r40.trace[k], r40.trace[k - 1] + 1e-10);
  EXPECT_GT(r20.final_residual(), 1e-5);
  EXPECT_LT(r40.final_residual(), 1e-10);
}

TEST(NewtonPinv, AgreesWithSvdOracle) {
  for (std::size_t m : {4u, 16u, 64u}) {
    Matrix a = random_gram(m, 7 * m, 0.5);
    auto r = newton_pinv(a, {.max_iterations = 60, .early_stop_tol = 0.0});
    Matrix ref = svd_pinv_oracle(a);
    EXPECT_LT(spectral_norm(r.approx_inverse - ref) / spectral_norm(ref), 1e-4) << "m=" << m;
  }
}

TEST(NewtonPinv, EarlyStopAndIterationBudget) {
  Matrix a = random_gram(16, 3, 0.5);
  auto full = newton_pinv(a, {.max_iterations = 20, .early_stop_tol = 0.0});
  auto early = newton_pinv(a, {.max_iterations = 20, .early_stop_tol = 1e-3});
  EXPECT_EQ(full.iterations_used, 20);
  EXPECT_LT(early.iterations_used, 20);
  EXPECT_LT(early.final_residual(), 1e-3);
  auto one = newton_pinv(a, {.max_iterations = 1, .early_stop_tol = 0.0});
  EXPECT_EQ(one.iterations_used, 1);
}

TEST(NewtonPinv, OneNormResidualOption) {
  Matrix a = random_gram(12, 9, 0.5);
  auto r = newton_pinv(a, {.residual_norm = ResidualNorm::one_norm, .early_stop_tol = 0.0});
  Matrix res = matmul(matmul(a, r.approx_inverse), a) - a;
  EXPECT_NEAR(r.final_residual(), norm1(res) / norm1(a), 1e-15);
}

TEST(NewtonPinv, RejectsBadInput) {
  EXPECT_THROW(newton_pinv(Matrix{{1, 2}, {0, 1}}), DegenerateInputError);
  EXPECT_THROW(newton_pinv(Matrix(2, 3)), ShapeError);
  EXPECT_THROW(newton_pinv(Matrix::identity(2), {.max_iterations = 0}), ConfigError);
  EXPECT_THROW(newton_pinv(Matrix::identity(2), {.beta = 1.0}), ConfigError);
}

TEST(NewtonPinv, DivergenceErrorCarriesTrace) {
  DivergenceError e("x", {1.0, 0.5});
  EXPECT_EQ(e.trace().size(), 2u);
}

TEST(SvdOracle, IdentityAndRankDeficiency) {
  EXPECT_LT(max_abs_diff(svd_pinv_oracle(Matrix::identity(4)), Matrix::identity(4)), 1e-14);
  auto r = svd_pinv_detailed(Matrix::diagonal(std::vector<double>{3.0, 0.0}));
  EXPECT_EQ(r.dropped, 1u);
  EXPECT_LT(max_abs_diff(r.pinv, Matrix::diagonal(std::vector<double>{1.0 / 3.0, 0.0})), 1e-15);
}

TEST(SvdOracle, PenroseConditions) {
  Rng rng(31);
  Matrix b = gaussian_matrix(5, 3, rng);
  Matrix a = matmul_nt(b, b);  // rank-3 PSD
  Matrix x = svd_pinv_detailed(a, 1e-10).pinv;
  EXPECT_LT(max_abs(matmul(matmul(a, x), a) - a), 1e-8);
  EXPECT_LT(max_abs(matmul(matmul(x, a), x) - x), 1e-8);
  Matrix ax = matmul(a, x), xa = matmul(x, a);
  EXPECT_LT(max_abs(ax - transpose(ax)), 1e-8);
  EXPECT_LT(max_abs(xa - transpose(xa)), 1e-8);
}

TEST(SvdOracle, NonFiniteInput) {
  EXPECT_THROW(svd_pinv_oracle(Matrix(2, 2, std::nan(""))), OracleUnavailableError);
}

TEST(PinvBackward, IdentityInverse) {
  Matrix g{{1, 2}, {3, 4}};
  EXPECT_EQ(pinv_backward(Matrix::identity(2), g), g * -1.0);
}

TEST(PinvBackward, DiagonalHandEvaluation) {
  Matrix y = Matrix::diagonal(std::vector<double>{0.5, 2.0});
  EXPECT_EQ(pinv_backward(y, Matrix::identity(2)), Matrix::diagonal(std::vector<double>{-0.25, -4.0}));
}

TEST(PinvBackward, ShapeMismatch) {
  EXPECT_THROW(pinv_backward(Matrix::identity(2), Matrix::identity(3)), ShapeError);
}

TEST(PinvBackward, MatchesFiniteDifferencesOfTheInverse) {
  Rng rng(77);
  int checked = 0;
  for (int trial = 0; checked < 5 && trial < 50; ++trial) {
    Matrix a = gaussian_matrix(4, 4, rng);
    for (std::size_t i = 0; i < 4; ++i) a(i, i) += 3.0;
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(Eigen::MatrixXd(as_eigen(a)));
    const auto& s = svd.singularValues();
    if (s(0) / s(3) >= 100.0) continue;
    ++checked;
    Matrix c = gaussian_matrix(4, 4, rng);
    auto loss = [&](const Matrix& x) {
      Matrix inv = lu_inverse(x);
      double acc = 0.0;
      for (std::size_t i = 0; i < inv.size(); ++i) acc += c.data()[i] * inv.data()[i];
      return acc;
    };
    Matrix grad = pinv_backward(lu_inverse(a), c);
    const double h = 1e-6;
    for (std::size_t i = 0; i < a.size(); ++i) {
      Matrix ap = a, am = a;
      ap.data()[i] += h;
      am.data()[i] -= h;
      const double fd = (loss(ap) - loss(am)) / (2 * h);
      EXPECT_NEAR(grad.data()[i], fd, 1e-5 * std::max(1.0, std::abs(fd)));
    }
  }
  EXPECT_EQ(checked, 5);
}

TEST(PinvBackward, ClosedFormMatchesUnrolledIterations) {
  Rng rng(13);
  for (std::size_t m : {4u, 9u, 16u}) {
    Matrix a = random_gram(m, 50 + m, 0.6, 8);
    PinvConfig cfg{.max_iterations = 60, .early_stop_tol = 0.0};
    auto fwd = newton_pinv(a, cfg);
    ASSERT_LT(fwd.final_residual(), 1e-8);
    Matrix g = gaussian_matrix(m, m, rng);
    Matrix closed = pinv_backward(fwd.approx_inverse, g);
    Matrix unrolled = pinv_unrolled_backward(a, cfg, g);
    EXPECT_LT(frobenius(closed - unrolled) / frobenius(unrolled), 1e-4) << "m=" << m;
  }
}

TEST(PinvTrace, CsvExport) {
  auto r = newton_pinv(Matrix::diagonal(std::vector<double>{2.0, 0.5}), {.max_iterations = 3, .early_stop_tol = 0.0});
  std::ostringstream os;
  write_trace_csv(os, r);
  const std::string s = os.str();
  EXPECT_EQ(s.rfind("iteration,residual\n", 0), 0u);
  EXPECT_EQ(std::count(s.begin(), s.end(), '\n'), 5);
}
