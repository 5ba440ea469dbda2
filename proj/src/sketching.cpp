#include "shrinkopt/sketching.hpp"

#include <chrono>
#include <cmath>
#include <limits>

namespace shrinkopt {

std::string ihs_variant_name(IhsVariant v) {
  switch (v) {
    case IhsVariant::Plain: return "plain";
    case IhsVariant::ShrinkageExact: return "shrinkage-exact";
    case IhsVariant::ShrinkageApprox: return "shrinkage-approx";
  }
  return "unknown";
}

std::optional<IhsVariant> parse_ihs_variant(const std::string& name) {
  for (auto v : {IhsVariant::Plain, IhsVariant::ShrinkageExact, IhsVariant::ShrinkageApprox})
    if (ihs_variant_name(v) == name) return v;
  return std::nullopt;
}

Matrix sketch(const Matrix& a, Index sketch_size, RngStream& stream) {
  if (sketch_size < 1) throw std::invalid_argument("sketch: sketch size must be positive");
  const Matrix s = gaussian_matrix(sketch_size, a.rows(), 1.0 / std::sqrt(static_cast<double>(sketch_size)), stream);
  return s * a;
}

namespace {

SpdMatrix sketched_gram(const Matrix& sa, Index original_rows) {
  Matrix gram = Matrix::Zero(sa.cols(), sa.cols());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(sa.transpose(), 1.0 / static_cast<double>(original_rows));
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return SpdMatrix(gram);
}

}  // namespace

double sketched_effective_dimension(const Matrix& sketched_features, Index original_rows, double lambda) {
  return effective_dimension(sketched_gram(sketched_features, original_rows), lambda);
}

SketchedSystem::SketchedSystem(Matrix sketched_features, Index original_rows, double lambda,
                               IhsVariant variant, std::optional<double> d_lambda)
    : sketched_(std::move(sketched_features)),
      original_rows_(original_rows),
      lambda_(lambda),
      variant_(variant),
      d_lambda_(d_lambda) {
  if (original_rows_ < 1) throw std::invalid_argument("SketchedSystem: original row count must be positive");
  if (!(lambda_ > 0.0)) throw std::invalid_argument("SketchedSystem: lambda must be positive");
  covariance_ = sketched_gram(sketched_, original_rows_);
  d_lambda_tilde_ = effective_dimension(covariance_, lambda_);
  const double m = static_cast<double>(sketch_size());
  switch (variant_) {
    case IhsVariant::Plain: gamma_ = 1.0; break;
    case IhsVariant::ShrinkageExact:
      if (!d_lambda_) throw std::invalid_argument("shrinkage-exact needs the exact effective dimension");
      gamma_ = shrinkage_gamma(*d_lambda_, m).gamma;
      break;
    case IhsVariant::ShrinkageApprox: gamma_ = shrinkage_gamma(d_lambda_tilde_, m).gamma; break;
  }
  Matrix shrunk = gamma_ * covariance_.matrix();
  shrunk.diagonal().array() += lambda_;
  system_ = SpdMatrix(shrunk);
}

Matrix SketchedSystem::direction(const Matrix& g) const { return system_.solve(g); }

Matrix ihs_direction(const SketchedSystem& system, const Matrix& g) { return system.direction(g); }

double data_effective_dimension(const RidgeProblem& ridge) {
  const Matrix h = ridge.data_hessian(Matrix::Zero(ridge.dim(), ridge.outputs()));
  return effective_dimension(SpdMatrix(h), ridge.lambda());
}

Trajectory run_ihs_trial(const RidgeProblem& ridge, const ReferenceOptimum& reference,
                         Index sketch_size, IhsVariant variant, const IhsOptions& options,
                         double exact_d_lambda, RngStream stream) {
  const LossProblem problem = ridge;
  const auto start = std::chrono::steady_clock::now();
  const std::optional<double> exact =
      variant == IhsVariant::ShrinkageExact ? std::optional<double>(exact_d_lambda) : std::nullopt;
  auto make_system = [&] {
    return SketchedSystem(sketch(ridge.features(), sketch_size, stream), ridge.rows(), ridge.lambda(),
                          variant, exact);
  };
  std::optional<SketchedSystem> system;
  system.emplace(make_system());

  Trajectory traj;
  Matrix x = Matrix::Zero(ridge.dim(), ridge.outputs());
  auto record = [&](int iteration, const Matrix* previous, double eta, bool warning) {
    RoundRecord rec;
    rec.iteration = iteration;
    rec.iterate_norm = x.norm();
    rec.objective = objective(problem, x);
    rec.log10_gap = log10_gap(optimality_gap(problem, reference, x));
    rec.gradient_norm = gradient(problem, x).norm();
    rec.step_size = eta;
    rec.communication_rounds = 0;
    rec.elapsed_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (previous) {
      const double before = (*previous - reference.x).norm();
      rec.contraction_ratio = before > 0.0 ? (x - reference.x).norm() / before : 0.0;
    } else {
      rec.contraction_ratio = std::numeric_limits<double>::quiet_NaN();
    }
    rec.line_search_warning = warning;
    traj.rounds.push_back(rec);
  };
  record(0, nullptr, 0.0, false);

  for (int t = 0;; ++t) {
    if (optimality_gap(problem, reference, x) <= options.stopping.gap_tol) {
      traj.converged = true;
      traj.stop_reason = StopReason::GapReached;
      break;
    }
    if (t >= options.stopping.max_iterations) {
      traj.stop_reason = StopReason::MaxIterations;
      break;
    }
    if (options.refresh_sketch && t > 0) system.emplace(make_system());
    const Matrix g = gradient(problem, x);
    const double f = objective(problem, x);
    const Matrix dir = system->direction(g);
    const auto ls = backtracking_line_search([&](const Matrix& trial) { return objective(problem, trial); },
                                             x, dir, g, f, options.line_search);
    const Matrix previous = x;
    x = x - ls.eta * dir;
    record(t + 1, &previous, ls.eta, ls.armijo_failed);
  }
  return traj;
}

std::vector<Trajectory> run_ihs(const RidgeProblem& ridge, Index sketch_size, IhsVariant variant,
                                const IhsOptions& options, int trials, const RngStream& stream) {
  const ReferenceOptimum reference = reference_optimum(LossProblem(ridge));
  const double exact = variant == IhsVariant::ShrinkageExact ? data_effective_dimension(ridge) : 0.0;
  std::vector<Trajectory> out;
  out.reserve(static_cast<std::size_t>(trials));
  for (int t = 0; t < trials; ++t)
    out.push_back(run_ihs_trial(ridge, reference, sketch_size, variant, options, exact,
                                stream.derive(static_cast<std::uint64_t>(t))));
  return out;
}

}  // namespace shrinkopt
