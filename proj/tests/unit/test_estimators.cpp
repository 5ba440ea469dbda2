#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "oracles.hpp"
#include "shrinkopt/estimators.hpp"

using namespace shrinkopt;

namespace {

// m blocks of k isotropic Gaussian rows in dimension d.
LocalCovariances isotropic_locals(Index m, Index k, Index d, RngStream& rng) {
  std::vector<Matrix> blocks;
  for (Index i = 0; i < m; ++i) blocks.push_back(oracle::normal_matrix(k, d, rng));
  return LocalCovariances::from_data(blocks);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

// ------------------------------------------------------- shrinkage gamma

TEST(ShrinkageGamma, DirectFormula) {
  EXPECT_EQ(shrinkage_gamma(0.0, 100).gamma, 1.0);
  EXPECT_DOUBLE_EQ(shrinkage_gamma(5.0, 10).gamma, 2.0);
  const auto c = shrinkage_gamma(5.0, 10);
  EXPECT_EQ(c.d_lambda_used, 5.0);
  EXPECT_EQ(c.samples_used, 10.0);
}

TEST(ShrinkageGamma, IsotropicLargeConfiguration) {
  const double d_lambda = 150.0 / 1.01;
  const double gamma = shrinkage_gamma(d_lambda, 30000).gamma;
  EXPECT_NEAR(d_lambda, 148.5148514851485, 1e-12);
  EXPECT_NEAR(gamma, 1.0 / (1.0 - d_lambda / 30000.0), 1e-15);
  EXPECT_NEAR(gamma, 1.00498, 5e-6);
}

TEST(ShrinkageGamma, BudgetViolationErrorsUnlessClamped) {
  try {
    shrinkage_gamma(10.0, 10);
    FAIL() << "expected BudgetError";
  } catch (const BudgetError& e) {
    EXPECT_NE(std::string(e.what()).find("effective dimension exceeds local sample budget"), std::string::npos);
  }
  EXPECT_THROW(shrinkage_gamma(12.0, 10), BudgetError);
  ShrinkageOptions clamp;
  clamp.gamma_max = 50.0;
  EXPECT_EQ(shrinkage_gamma(12.0, 10, clamp).gamma, 50.0);
  EXPECT_EQ(shrinkage_gamma(9.99, 10, clamp).gamma, 50.0);
  EXPECT_DOUBLE_EQ(shrinkage_gamma(5.0, 10, clamp).gamma, 2.0);
}

// -------------------------------------------------------- local blocks

TEST(LocalCovariances, FromDataMatchesDefinition) {
  RngStream rng(1, 0);
  const Matrix a = oracle::normal_matrix(8, 3, rng);
  const Matrix b = oracle::normal_matrix(8, 3, rng);
  const auto locals = LocalCovariances::from_data(std::vector<Matrix>{a, b});
  EXPECT_EQ(locals.agents(), 2);
  EXPECT_EQ(locals.n_total(), 16);
  EXPECT_LT((locals.blocks()[1].matrix() - b.transpose() * b / 8.0).norm(), 1e-14);
  EXPECT_THROW(LocalCovariances::from_data(std::vector<Matrix>{a, oracle::normal_matrix(7, 3, rng)}),
               std::invalid_argument);
}

// -------------------------------------------------------------- average

TEST(AverageEstimator, SingleAgentAndConstantBlocks) {
  RngStream rng(2, 0);
  const SpdMatrix b(oracle::random_spd(4, rng));
  const LocalCovariances one({b}, 10);
  EXPECT_LT((estimate_resolvent_average(one, 0.5).matrix() - resolvent(b, 0.5).matrix()).norm(), 1e-14);
  const LocalCovariances same({b, b, b}, 10);
  EXPECT_LT((estimate_resolvent_average(same, 0.5).matrix() - resolvent(b, 0.5).matrix()).norm(), 1e-14);
}

TEST(AverageEstimator, InverseWishartMeanBias) {
  // E[Sigma_hat^{-1}] = k / (k - d - 1) Sigma^{-1} for Gaussian rows.
  const Index d = 50, k = 100;
  RngStream rng(3, 0);
  const auto locals = isotropic_locals(2000, k, d, rng);
  const double oracle_error = static_cast<double>(k) / static_cast<double>(k - d - 1) - 1.0;
  const double err = resolvent_relative_error(estimate_resolvent_average(locals, 1e-3),
                                              resolvent(SpdMatrix::identity(d), 1e-3));
  EXPECT_NEAR(oracle_error, 1.0408, 1e-4);
  EXPECT_NEAR(err, oracle_error, 0.1);
}

// ------------------------------------------------------------ shrinkage

TEST(ShrinkageEstimator, ZeroEffectiveDimensionIsAverage) {
  RngStream rng(4, 0);
  const auto locals = isotropic_locals(5, 20, 4, rng);
  const SpdMatrix a = estimate_resolvent_average(locals, 0.2);
  const SpdMatrix s = estimate_resolvent_shrinkage(locals, 0.2, 0.0);
  EXPECT_TRUE((a.matrix().array() == s.matrix().array()).all());
}

TEST(ShrinkageEstimator, ConvergesForLargeLocalSamples) {
  RngStream rng(5, 0);
  const Index d = 2;
  const double lambda = 1.0;
  const double d_lambda = d / (1.0 + lambda);
  Matrix mean = Matrix::Zero(d, d);
  for (int t = 0; t < 200; ++t)
    mean += estimate_resolvent_shrinkage(isotropic_locals(1, 2000, d, rng), lambda, d_lambda).matrix();
  mean /= 200.0;
  EXPECT_LT(oracle::spectral_norm(mean - 0.5 * Matrix::Identity(d, d)) / 0.5, 0.05);
}

TEST(ShrinkageEstimator, SmallRegularizerDebiasesInverseWishart) {
  const Index d = 50, k = 100;
  RngStream rng(6, 0);
  const auto locals = isotropic_locals(2000, k, d, rng);
  const SpdMatrix truth = resolvent(SpdMatrix::identity(d), 1e-3);
  // (1 - d/k) * k / (k - d - 1) = 1.0204
  const double oracle_error = (1.0 - 0.5) * 100.0 / 49.0 - 1.0;
  EXPECT_NEAR(oracle_error, 0.0204, 1e-4);
  const double shrunk = resolvent_relative_error(estimate_resolvent_small_reg(locals, 1e-3), truth);
  const double naive = resolvent_relative_error(estimate_resolvent_average(locals, 1e-3), truth);
  EXPECT_LT(shrunk, 0.1);
  EXPECT_GT(naive, 0.9);
}

TEST(ShrinkageEstimator, BudgetViolation) {
  RngStream rng(7, 0);
  const auto locals = isotropic_locals(3, 10, 4, rng);
  EXPECT_THROW(estimate_resolvent_shrinkage(locals, 0.1, 10.0), BudgetError);
  EXPECT_THROW(estimate_resolvent_small_reg(isotropic_locals(3, 4, 4, rng), 0.1), BudgetError);
}

TEST(ShrinkageEstimator, MonotoneImprovementOverAveraging) {
  const Index d = 20, m = 10;
  const double lambda = 0.1;
  const SpdMatrix truth = resolvent(SpdMatrix::identity(d), lambda);
  const double d_lambda = d / (1.0 + lambda);
  RngStream rng(8, 0);
  double previous = std::numeric_limits<double>::infinity();
  for (Index k : {2 * d, 4 * d, 8 * d}) {
    std::vector<double> shrink_err, avg_err;
    for (int t = 0; t < 20; ++t) {
      const auto locals = isotropic_locals(m, k, d, rng);
      shrink_err.push_back(resolvent_relative_error(estimate_resolvent_shrinkage(locals, lambda, d_lambda), truth));
      avg_err.push_back(resolvent_relative_error(estimate_resolvent_average(locals, lambda), truth));
    }
    const double s = median(shrink_err);
    EXPECT_LT(s, median(avg_err)) << "k=" << k;
    EXPECT_LE(s, previous) << "k=" << k;
    previous = s;
  }
}

// ------------------------------------------------------------ small reg

TEST(SmallRegEstimator, CoefficientExceedsExactOne) {
  for (double lambda : {1e-4, 1e-2, 1.0, 100.0}) {
    RngStream rng(9, 0);
    const Matrix s = oracle::random_spd(6, rng);
    const double dl = effective_dimension(SpdMatrix(s), lambda);
    EXPECT_GT(shrinkage_gamma(6.0, 30).gamma, shrinkage_gamma(dl, 30).gamma);
  }
}

TEST(SmallRegEstimator, WorseThanExactAtLargeRegularizer) {
  // Sigma = 100 C^T C, C_ij ~ U(0, 1), m = 100, d = 10, lambda = 2000.
  const Index d = 10, m = 100, k = 20;
  const double lambda = 2000.0;
  RngStream rng(10, 0);
  Matrix c(d, d);
  for (Index j = 0; j < d; ++j)
    for (Index i = 0; i < d; ++i) c(i, j) = rng.next_uniform();
  const SpdMatrix sigma(100.0 * c.transpose() * c);
  const Matrix l = sigma.cholesky_factor();
  const SpdMatrix truth = resolvent(sigma, lambda);
  const double d_lambda = effective_dimension(sigma, lambda);
  std::vector<double> small, exact;
  for (int t = 0; t < 10; ++t) {
    std::vector<Matrix> blocks;
    for (Index i = 0; i < m; ++i) blocks.push_back(oracle::normal_matrix(k, d, rng) * l.transpose());
    const auto locals = LocalCovariances::from_data(blocks);
    small.push_back(resolvent_relative_error(estimate_resolvent_small_reg(locals, lambda), truth));
    exact.push_back(resolvent_relative_error(estimate_resolvent_shrinkage(locals, lambda, d_lambda), truth));
  }
  EXPECT_GT(median(small), median(exact));
}

TEST(SmallRegEstimator, WithinFactorTwoAtSmallRegularizer) {
  const Index d = 10, m = 50, k = 40;
  const double lambda = 1e-3;
  RngStream rng(11, 0);
  const SpdMatrix truth = resolvent(SpdMatrix::identity(d), lambda);
  const double d_lambda = d / (1.0 + lambda);
  std::vector<double> small, exact;
  for (int t = 0; t < 20; ++t) {
    const auto locals = isotropic_locals(m, k, d, rng);
    small.push_back(resolvent_relative_error(estimate_resolvent_small_reg(locals, lambda), truth));
    exact.push_back(resolvent_relative_error(estimate_resolvent_shrinkage(locals, lambda, d_lambda), truth));
  }
  EXPECT_LT(median(small), 2.0 * median(exact));
}

// --------------------------------------------------------- determinantal

TEST(DeterminantalEstimator, ConstantBlocksAndSingleAgent) {
  RngStream rng(12, 0);
  const SpdMatrix b(oracle::random_spd(5, rng));
  const Matrix plain = resolvent(b, 0.3).matrix();
  const LocalCovariances same({b, b, b, b}, 10);
  EXPECT_LT((estimate_resolvent_determinantal(same, 0.3, DeterminantalMode::SelfNormalized).matrix() - plain).norm(),
            1e-13);
  const SpdMatrix scaled(1e3 * oracle::random_spd(5, rng));
  const LocalCovariances one({scaled}, 10);
  EXPECT_LT((estimate_resolvent_determinantal(one, 0.3, DeterminantalMode::SelfNormalized).matrix() -
             resolvent(scaled, 0.3).matrix())
                .norm(),
            1e-13);
}

TEST(DeterminantalEstimator, GlobalDetNormalizationFormula) {
  RngStream rng(13, 0);
  const Index d = 3;
  const double lambda = 0.4;
  std::vector<SpdMatrix> blocks;
  for (int i = 0; i < 3; ++i) blocks.emplace_back(oracle::random_spd(d, rng));
  const SpdMatrix sigma(oracle::random_spd(d, rng));
  auto det = [](const Matrix& m) {
    double p = 1.0;
    for (double e : oracle::jacobi_eigenvalues(m)) p *= e;
    return p;
  };
  Matrix expected = Matrix::Zero(d, d);
  for (const auto& b : blocks) {
    Matrix shifted = b.matrix();
    shifted.diagonal().array() += lambda;
    expected += det(shifted) * oracle::gauss_jordan_inverse(shifted);
  }
  Matrix ref = sigma.matrix();
  ref.diagonal().array() += lambda;
  expected /= 3.0 * det(ref);
  const SpdMatrix got =
      estimate_resolvent_determinantal(LocalCovariances(blocks, 10), lambda, DeterminantalMode::GlobalDet, sigma);
  EXPECT_LT((got.matrix() - expected).norm() / expected.norm(), 1e-12);
  EXPECT_THROW(estimate_resolvent_determinantal(LocalCovariances(blocks, 10), lambda, DeterminantalMode::GlobalDet),
               std::invalid_argument);
}

TEST(DeterminantalEstimator, SelfNormalizedBeatsAveragingInExpectation) {
  const Index d = 10, k = 40, m = 50;
  const double lambda = 0.1;
  RngStream rng(14, 0);
  Matrix det_mean = Matrix::Zero(d, d), avg_mean = Matrix::Zero(d, d);
  for (int t = 0; t < 500; ++t) {
    const auto locals = isotropic_locals(m, k, d, rng);
    det_mean += estimate_resolvent_determinantal(locals, lambda, DeterminantalMode::SelfNormalized).matrix();
    avg_mean += estimate_resolvent_average(locals, lambda).matrix();
  }
  const Matrix truth = Matrix::Identity(d, d) / (1.0 + lambda);
  EXPECT_LT(oracle::spectral_norm(det_mean / 500.0 - truth), oracle::spectral_norm(avg_mean / 500.0 - truth));
}

TEST(DeterminantalEstimator, PermutationEquivariant) {
  RngStream rng(15, 0);
  std::vector<SpdMatrix> blocks;
  for (int i = 0; i < 6; ++i) blocks.emplace_back(oracle::random_spd(4, rng));
  std::vector<SpdMatrix> permuted = {blocks[3], blocks[0], blocks[5], blocks[1], blocks[4], blocks[2]};
  const auto a = estimate_resolvent_determinantal(LocalCovariances(blocks, 8), 0.2, DeterminantalMode::SelfNormalized);
  const auto b =
      estimate_resolvent_determinantal(LocalCovariances(permuted, 8), 0.2, DeterminantalMode::SelfNormalized);
  EXPECT_LT((a.matrix() - b.matrix()).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(DeterminantalEstimator, LargeDeterminantsDoNotOverflow) {
  const Index d = 400;
  std::vector<SpdMatrix> blocks = {SpdMatrix::identity(d, 1e3), SpdMatrix::identity(d, 2e3)};
  const auto est = estimate_resolvent_determinantal(LocalCovariances(blocks, 1000), 1.0, DeterminantalMode::SelfNormalized);
  EXPECT_TRUE(est.matrix().allFinite());
  // The second determinant dominates by a factor of about 2^400.
  EXPECT_NEAR(est(0, 0), 1.0 / 2001.0, 1e-12);
}

TEST(LogDomainWeights, NormalizedWithoutOverflow) {
  const std::vector<double> logs = {1000.0, 1000.0 + std::log(2.0)};
  const auto w = log_domain_weights(logs);
  // 1000 + log 2 carries an absolute rounding error near 1e-13.
  EXPECT_NEAR(w[0], 1.0 / 3.0, 1e-12);
  EXPECT_NEAR(w[1], 2.0 / 3.0, 1e-12);
  EXPECT_NEAR(w[0] + w[1], 1.0, 1e-15);
  const std::vector<double> bad = {std::numeric_limits<double>::infinity(), 0.0};
  EXPECT_THROW(log_domain_weights(bad), InstabilityError);
}

// --------------------------------------------------------- error metric

TEST(RelativeError, ExactCases) {
  RngStream rng(16, 0);
  const SpdMatrix r(oracle::random_spd(5, rng));
  EXPECT_EQ(resolvent_relative_error(r, r), 0.0);
  EXPECT_NEAR(resolvent_relative_error(r.scaled(2.0), r), 1.0, 1e-14);

  Matrix e = Matrix::Zero(5, 5);
  e(1, 1) = 0.25;
  e(3, 3) = -0.125;
  const double expected = 0.25 / oracle::symmetric_spectral_norm(r.matrix());
  EXPECT_NEAR(resolvent_relative_error(SpdMatrix(r.matrix() + e), r), expected, 1e-12);
  EXPECT_THROW(resolvent_relative_error(r, SpdMatrix(Matrix::Zero(5, 5))), std::invalid_argument);
}
