#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <limits>

#include "oracles.hpp"
#include "shrinkopt/data_io.hpp"
#include "shrinkopt/distributed.hpp"

using namespace shrinkopt;

namespace {

LossProblem gaussian_ridge(Index n, Index d, double lambda, RngStream& rng) {
  const Matrix a = oracle::normal_matrix(n, d, rng);
  const Matrix w = oracle::normal_matrix(d, 1, rng) / std::sqrt(static_cast<double>(d));
  return RidgeProblem(a, a * w + oracle::normal_matrix(n, 1, rng), lambda);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

LineSearchConfig fixed_step() {
  LineSearchConfig c;
  c.enabled = false;
  return c;
}

}  // namespace

// ------------------------------------------------------------ sharding

TEST(ShardedProblem, EqualDisjointTruncatedShards) {
  RngStream rng(1, 0);
  const Matrix a = oracle::normal_matrix(103, 4, rng);
  const LossProblem p = RidgeProblem(a, Matrix::Zero(103, 1), 0.1);
  const ShardedProblem s(p, 10);
  EXPECT_EQ(s.agents(), 10);
  EXPECT_EQ(s.rows_per_shard(), 10);
  EXPECT_EQ(s.n_total(), 100);
  EXPECT_EQ(rows_of(s.global()), 100);
  for (Index i = 0; i < 10; ++i) {
    const auto& shard = std::get<RidgeProblem>(s.shard(i));
    EXPECT_TRUE((shard.features().array() == a.middleRows(10 * i, 10).array()).all());
  }
  EXPECT_THROW(ShardedProblem(p, 104), std::invalid_argument);
  EXPECT_THROW(ShardedProblem(p, 0), std::invalid_argument);
  EXPECT_THROW(ShardedProblem(p, 10, 11), std::invalid_argument);
}

TEST(EstimatorSpec, NamesAndRoles) {
  for (auto kind : {EstimatorKind::Shrinkage, EstimatorKind::Average, EstimatorKind::Determinantal,
                    EstimatorKind::SmallReg, EstimatorKind::FirstAgent, EstimatorKind::Identity})
    EXPECT_EQ(parse_estimator_kind(estimator_name(kind)), kind);
  EXPECT_FALSE(parse_estimator_kind("giant"));
  EXPECT_THROW(EstimatorSpec::first_agent().validate(false), std::invalid_argument);
  EXPECT_NO_THROW(EstimatorSpec::first_agent().validate(true));
  EXPECT_THROW(EstimatorSpec::shrinkage(DLambdaSource::fixed(-1.0)).validate(false), std::invalid_argument);
}

// ------------------------------------------------- local effective dimension

TEST(LocalEffectiveDimension, IsotropicShardAndLimits) {
  const Index d = 6;
  const Matrix a = std::sqrt(static_cast<double>(d)) * Matrix::Identity(d, d);  // A^T A / k = I
  const LossProblem shard = RidgeProblem(a, Matrix::Zero(d, 1), 0.5);
  const Matrix x = Matrix::Zero(d, 1);
  EXPECT_NEAR(local_effective_dimension(shard, x, 0.5), d / 1.5, 1e-12);
  EXPECT_LT(local_effective_dimension(shard, x, 1e14), 1e-12);
}

TEST(LocalEffectiveDimension, MatchesAssembledHessian) {
  RngStream rng(2, 0);
  const Matrix a = oracle::normal_matrix(40, 5, rng);
  Vector y(40);
  for (Index i = 0; i < 40; ++i) y(i) = rng.next_uniform() < 0.5 ? -1.0 : 1.0;
  const LossProblem shard = LogisticProblem(a, y, 0.1);
  const Matrix x = oracle::normal_matrix(5, 1, rng);
  // Assemble (1/k) sum s(1-s) a a^T by hand.
  Matrix h = Matrix::Zero(5, 5);
  for (Index i = 0; i < 40; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-y(i) * a.row(i).dot(x.col(0))));
    h += s * (1.0 - s) * a.row(i).transpose() * a.row(i);
  }
  h /= 40.0;
  double expected = 0.0;
  for (double e : oracle::jacobi_eigenvalues(h)) expected += e / (e + 0.03);
  EXPECT_NEAR(local_effective_dimension(shard, x, 0.03), expected, 1e-10);
}

// ----------------------------------------------------------- line search

TEST(LineSearch, ExactNewtonStepOnQuadratic) {
  RngStream rng(3, 0);
  const LossProblem p = gaussian_ridge(30, 4, 0.1, rng);
  const Matrix x = oracle::normal_matrix(4, 1, rng);
  const Matrix g = gradient(p, x);
  const Matrix dir = hessian(p, x).solve(g);
  const auto r = backtracking_line_search([&](const Matrix& z) { return objective(p, z); }, x, dir, g,
                                          objective(p, x), LineSearchConfig{});
  EXPECT_EQ(r.eta, 1.0);
  EXPECT_EQ(r.probes, 1);
  EXPECT_FALSE(r.armijo_failed);
}

TEST(LineSearch, AcceptedStepSatisfiesArmijo) {
  RngStream rng(4, 0);
  // Strong curvature along the gradient forces several halvings.
  Matrix a = 30.0 * oracle::normal_matrix(50, 3, rng);
  const LossProblem p = RidgeProblem(a, oracle::normal_matrix(50, 1, rng), 1e-3);
  const Matrix x = oracle::normal_matrix(3, 1, rng);
  const Matrix g = gradient(p, x);
  const double f = objective(p, x);
  LineSearchConfig cfg;
  const auto r = backtracking_line_search([&](const Matrix& z) { return objective(p, z); }, x, g, g, f, cfg);
  EXPECT_FALSE(r.armijo_failed);
  EXPECT_LT(r.eta, 1.0);
  EXPECT_LE(objective(p, x - r.eta * g), f - cfg.c1 * r.eta * g.squaredNorm());
  // The previous (doubled) step must have failed.
  EXPECT_GT(objective(p, x - 2.0 * r.eta * g), f - cfg.c1 * 2.0 * r.eta * g.squaredNorm());
}

TEST(LineSearch, AscentDirectionSetsWarning) {
  RngStream rng(5, 0);
  const LossProblem p = gaussian_ridge(20, 3, 0.1, rng);
  const Matrix x = oracle::normal_matrix(3, 1, rng);
  const Matrix g = gradient(p, x);
  LineSearchConfig cfg;
  const auto r = backtracking_line_search([&](const Matrix& z) { return objective(p, z); }, x, -g, g,
                                          objective(p, x), cfg);
  EXPECT_TRUE(r.armijo_failed);
  EXPECT_EQ(r.probes, cfg.max_halvings + 1);
  EXPECT_EQ(r.eta, std::pow(0.5, cfg.max_halvings));
}

// ------------------------------------------------------------ newton round

TEST(NewtonRound, SingleAgentAverageIsExactNewton) {
  RngStream rng(6, 0);
  const ShardedProblem s(gaussian_ridge(60, 5, 0.1, rng), 1);
  Cluster cluster(s);
  const auto r = newton_round(cluster, Matrix::Zero(5, 1), EstimatorSpec::average(), LineSearchConfig{});
  EXPECT_LT(gradient(s.global(), r.x_next).norm(), 1e-10);
  EXPECT_EQ(r.line_search.eta, 1.0);
}

TEST(NewtonRound, ZeroDLambdaShrinkageEqualsAverageBitwise) {
  RngStream rng(7, 0);
  const Matrix a = oracle::normal_matrix(20, 4, rng);
  const Matrix b = oracle::normal_matrix(20, 1, rng);
  Matrix rep_a(80, 4), rep_b(80, 1);
  for (int i = 0; i < 4; ++i) {
    rep_a.middleRows(20 * i, 20) = a;
    rep_b.middleRows(20 * i, 20) = b;
  }
  const ShardedProblem s(RidgeProblem(rep_a, rep_b, 0.2), 4);
  const Matrix x = oracle::normal_matrix(4, 1, rng);
  Cluster c1(s), c2(s);
  const auto avg = newton_round(c1, x, EstimatorSpec::average(), LineSearchConfig{});
  const auto shr = newton_round(c2, x, EstimatorSpec::shrinkage(DLambdaSource::fixed(0.0)), LineSearchConfig{});
  EXPECT_TRUE((avg.direction.array() == shr.direction.array()).all());
  EXPECT_TRUE((avg.x_next.array() == shr.x_next.array()).all());
}

TEST(NewtonRound, BudgetViolationNamesAgent) {
  RngStream rng(8, 0);
  const ShardedProblem s(gaussian_ridge(40, 4, 0.1, rng), 4);
  Cluster cluster(s);
  try {
    newton_round(cluster, Matrix::Zero(4, 1), EstimatorSpec::shrinkage(DLambdaSource::fixed(10.0)), LineSearchConfig{});
    FAIL() << "expected BudgetError";
  } catch (const BudgetError& e) {
    EXPECT_NE(std::string(e.what()).find("agent 0"), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("effective dimension exceeds local sample budget"), std::string::npos);
  }
}

TEST(NewtonRound, NonPositiveDefiniteLocalSystemFails) {
  Matrix a = Matrix::Ones(10, 2);
  a(0, 0) = std::numeric_limits<double>::quiet_NaN();
  const ShardedProblem s(RidgeProblem(a, Matrix::Zero(10, 1), 0.1), 2);
  Cluster cluster(s);
  EXPECT_THROW(newton_round(cluster, Matrix::Zero(2, 1), EstimatorSpec::average(), LineSearchConfig{}), LinalgError);
}

// --------------------------------------------------- communication accounting

TEST(Communication, FourRoundsPerFixedStepIterationPlusProbes) {
  RngStream rng(9, 0);
  const ShardedProblem s(gaussian_ridge(200, 5, 0.05, rng), 5);
  Cluster fixed(s);
  Matrix x = Matrix::Zero(5, 1);
  for (int t = 1; t <= 3; ++t) {
    const auto r = newton_round(fixed, x, EstimatorSpec::shrinkage(), fixed_step());
    EXPECT_EQ(r.rounds_used, 4);
    EXPECT_EQ(fixed.stats().rounds, 4 * t);
    x = r.x_next;
  }
  Cluster searched(s);
  const auto r = newton_round(searched, Matrix::Zero(5, 1), EstimatorSpec::average(), LineSearchConfig{});
  EXPECT_EQ(r.rounds_used, 4 + r.line_search.probes);
}

TEST(Communication, OnlyDimensionSizedMessagesCrossTheBoundary) {
  RngStream rng(10, 0);
  const Index d = 6, c = 2, n = 3000;
  const Matrix a = oracle::normal_matrix(n, d, rng);
  const ShardedProblem s(RidgeProblem(a, oracle::normal_matrix(n, c, rng), 0.1), 3);
  Cluster cluster(s);
  newton_round(cluster, Matrix::Zero(d, c), EstimatorSpec::determinantal(), LineSearchConfig{});
  distributed_pcg(cluster, Matrix::Zero(d, c), EstimatorSpec::shrinkage(), PcgConfig{});
  // A d x c block plus at most one scalar; raw shards (1000 x 6) never move.
  EXPECT_LE(cluster.stats().max_message_words, d * c + 1);
  EXPECT_GT(cluster.stats().words, 0);
}

TEST(Communication, PcgRoundCounts) {
  RngStream rng(11, 0);
  const ShardedProblem s(gaussian_ridge(300, 8, 0.05, rng), 3);
  Cluster pre(s);
  const auto r = distributed_pcg(pre, Matrix::Zero(8, 1), EstimatorSpec::average(), PcgConfig{});
  EXPECT_EQ(r.rounds_used, 4 + 4 * r.iterations);
  Cluster plain(s);
  const auto q = distributed_pcg(plain, Matrix::Zero(8, 1), EstimatorSpec::identity(), PcgConfig{});
  EXPECT_EQ(q.rounds_used, 2 + 2 * q.iterations);
}

// ------------------------------------------------------------------- PCG

TEST(Pcg, PerfectPreconditionerConvergesInOneIteration) {
  RngStream rng(12, 0);
  const ShardedProblem s(gaussian_ridge(50, 6, 0.1, rng), 1);
  Cluster cluster(s);
  const auto r = distributed_pcg(cluster, Matrix::Zero(6, 1), EstimatorSpec::average(), PcgConfig{});
  EXPECT_EQ(r.iterations, 1);
  EXPECT_LE(r.residual_history.back(), 1e-10);
}

TEST(Pcg, StepMatchesExplicitSolve) {
  RngStream rng(13, 0);
  const Index d = 12;
  const ShardedProblem s(gaussian_ridge(600, d, 0.01, rng), 20);
  for (const auto& spec : {EstimatorSpec::average(), EstimatorSpec::shrinkage(), EstimatorSpec::first_agent(),
                           EstimatorSpec::identity(), EstimatorSpec::determinantal()}) {
    Cluster cluster(s);
    const Matrix v = oracle::normal_matrix(d, 1, rng);
    const auto r = distributed_pcg(cluster, v, spec, PcgConfig{});
    const Matrix h = hessian(s.global(), v).matrix();
    const Matrix b = gradient(s.global(), v);
    EXPECT_LE((h * r.step - b).norm() / b.norm(), 1e-8) << estimator_name(spec.kind);
    EXPECT_LT((r.step - oracle::gauss_jordan_inverse(h) * b).norm() / r.step.norm(), 1e-7);
    for (std::size_t i = 1; i < r.residual_history.size(); ++i) EXPECT_GE(r.residual_history[i], 0.0);
  }
}

TEST(Pcg, BreakdownOnNonFiniteCurvature) {
  RngStream rng(14, 0);
  Matrix b = oracle::normal_matrix(20, 1, rng);
  b(3) = std::numeric_limits<double>::quiet_NaN();
  const ShardedProblem s(RidgeProblem(oracle::normal_matrix(20, 3, rng), b, 0.1), 2);
  Cluster cluster(s);
  EXPECT_THROW(distributed_pcg(cluster, Matrix::Zero(3, 1), EstimatorSpec::identity(), PcgConfig{}), PcgBreakdown);
}

// ---------------------------------------------------------------- drivers

TEST(RunNewton, SingleAgentQuadraticIsTextbookNewton) {
  RngStream rng(15, 0);
  const ShardedProblem s(gaussian_ridge(80, 5, 0.1, rng), 1);
  const auto traj = run_newton(s, EstimatorSpec::average(), StoppingConfig{});
  EXPECT_TRUE(traj.converged);
  EXPECT_EQ(traj.stop_reason, StopReason::GapReached);
  ASSERT_GE(traj.rounds.size(), 2u);
  EXPECT_LE(traj.rounds.size(), 3u);
  EXPECT_TRUE(std::isnan(traj.rounds[0].contraction_ratio));
  const auto ref = reference_optimum(s.global());
  const double initial = optimality_gap(s.global(), ref, Matrix::Zero(5, 1));
  EXPECT_LT(std::pow(10.0, traj.rounds[1].log10_gap), 1e-20 * initial);
}

TEST(RunNewton, DeterministicTrajectories) {
  RngStream rng(16, 0);
  const ShardedProblem s(gaussian_ridge(400, 8, 0.01, rng), 8);
  for (const auto& spec : {EstimatorSpec::shrinkage(), EstimatorSpec::determinantal()}) {
    const auto a = run_newton(s, spec, StoppingConfig{});
    const auto b = run_newton(s, spec, StoppingConfig{});
    EXPECT_TRUE(same_numbers(a, b));
  }
  const auto c = run_inexact_newton(s, EstimatorSpec::first_agent(), PcgConfig{}, StoppingConfig{});
  const auto e = run_inexact_newton(s, EstimatorSpec::first_agent(), PcgConfig{}, StoppingConfig{});
  EXPECT_TRUE(same_numbers(c, e));
  EXPECT_TRUE(c.converged);
  EXPECT_GT(c.rounds.back().inner_iterations, 0);
}

TEST(RunNewton, RoundCountersAreCumulative) {
  RngStream rng(17, 0);
  const ShardedProblem s(gaussian_ridge(400, 8, 0.01, rng), 8);
  const auto traj = run_newton(s, EstimatorSpec::average(), StoppingConfig{1e-10, 50}, fixed_step());
  for (std::size_t i = 1; i < traj.rounds.size(); ++i)
    EXPECT_EQ(traj.rounds[i].communication_rounds - traj.rounds[i - 1].communication_rounds, 4);
}

TEST(RunNewton, ShrinkageContractsFasterThanAveraging) {
  const Index d = 50, m = 100, k = 10 * d;
  std::vector<double> shrink, avg;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    RngStream rng(100 + seed, 0);
    const ShardedProblem s(gaussian_ridge(m * k, d, 0.01, rng), m);
    const StoppingConfig stop{1e-10, 1};
    shrink.push_back(run_newton(s, EstimatorSpec::shrinkage(), stop).rounds[1].contraction_ratio);
    avg.push_back(run_newton(s, EstimatorSpec::average(), stop).rounds[1].contraction_ratio);
  }
  EXPECT_LT(median(shrink), median(avg));
}

TEST(RunNewton, LogisticFreshBatchesOnRealData) {
  Dataset ds = standardize(load_libsvm(std::string(FIXTURE_DIR) + "/breast_cancer.libsvm"));
  const LossProblem p = LogisticProblem(ds.features, to_sign_labels(ds.labels), 0.01);
  const ShardedProblem s(p, 2, 10);
  EXPECT_EQ(s.rows_per_batch(), 28);
  for (const auto& spec : {EstimatorSpec::shrinkage(), EstimatorSpec::average(), EstimatorSpec::determinantal()}) {
    const auto traj = run_newton(s, spec, StoppingConfig{1e-30, 25});
    // Ten batches, so the run stops after ten steps instead of recycling.
    EXPECT_EQ(traj.rounds.size(), 11u) << estimator_name(spec.kind);
    EXPECT_EQ(traj.stop_reason, StopReason::MaxIterations);
    EXPECT_LT(traj.rounds.back().objective, traj.rounds.front().objective);
    for (const auto& r : traj.rounds) EXPECT_TRUE(std::isfinite(r.objective));
  }
}
