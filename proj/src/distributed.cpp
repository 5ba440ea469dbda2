#include "shrinkopt/distributed.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace shrinkopt {

namespace {

double frobenius_dot(const Matrix& a, const Matrix& b) { return (a.array() * b.array()).sum(); }

}  // namespace

// ------------------------------------------------------------ ShardedProblem

ShardedProblem::ShardedProblem(const LossProblem& full, Index agents, Index batches)
    : global_(full), batches_(batches) {
  if (agents < 1) throw std::invalid_argument("ShardedProblem: need at least one agent");
  if (batches < 1) throw std::invalid_argument("ShardedProblem: need at least one batch");
  const Index n = rows_of(full);
  if (agents > n) throw std::invalid_argument("ShardedProblem: more agents than rows");
  rows_per_shard_ = n / agents;
  if (rows_per_shard_ / batches_ < 1)
    throw std::invalid_argument("ShardedProblem: fresh batches would be empty");
  global_ = row_slice(full, 0, rows_per_shard_ * agents);
  shards_.reserve(static_cast<std::size_t>(agents));
  for (Index i = 0; i < agents; ++i) shards_.push_back(row_slice(full, i * rows_per_shard_, rows_per_shard_));
}

// ------------------------------------------------------------ EstimatorSpec

std::string estimator_name(EstimatorKind kind) {
  switch (kind) {
    case EstimatorKind::Shrinkage: return "shrinkage";
    case EstimatorKind::Average: return "average";
    case EstimatorKind::Determinantal: return "determinantal";
    case EstimatorKind::SmallReg: return "small-reg";
    case EstimatorKind::FirstAgent: return "first-agent";
    case EstimatorKind::Identity: return "cg";
  }
  return "unknown";
}

std::optional<EstimatorKind> parse_estimator_kind(const std::string& name) {
  for (auto kind : {EstimatorKind::Shrinkage, EstimatorKind::Average, EstimatorKind::Determinantal,
                    EstimatorKind::SmallReg, EstimatorKind::FirstAgent, EstimatorKind::Identity})
    if (estimator_name(kind) == name) return kind;
  return std::nullopt;
}

void EstimatorSpec::validate(bool as_preconditioner) const {
  if (!as_preconditioner && (kind == EstimatorKind::FirstAgent || kind == EstimatorKind::Identity))
    throw std::invalid_argument(estimator_name(kind) + " is only valid as a PCG preconditioner");
  if (kind == EstimatorKind::Shrinkage && d_lambda.kind != DLambdaSource::Kind::LocalEmpirical &&
      !(d_lambda.value >= 0.0))
    throw std::invalid_argument("shrinkage needs a nonnegative effective dimension");
}

// ------------------------------------------------------------------- Worker

Worker::Worker(Index index, LossProblem shard, Index batches)
    : index_(index), shard_(std::move(shard)), batches_(batches) {}

double Worker::data_objective(const Matrix& x) const {
  return std::visit([&](const auto& q) { return q.data_objective(x); }, shard_);
}

Matrix Worker::data_gradient(const Matrix& x) const {
  return std::visit([&](const auto& q) -> Matrix { return q.data_gradient(x); }, shard_);
}

Matrix Worker::data_hessian_vector_product(const Matrix& x, const Matrix& v) const {
  return std::visit([&](const auto& q) -> Matrix { return q.data_hessian_vector_product(x, v); }, shard_);
}

LossProblem Worker::batch_problem(Index batch) const {
  if (batches_ == 1) return shard_;
  if (batch < 0 || batch >= batches_) throw std::out_of_range("fresh batches exhausted");
  const Index per = rows_of(shard_) / batches_;
  return row_slice(shard_, batch * per, per);
}

const Matrix& Worker::batch_hessian(const Matrix& x, Index batch) const {
  if (is_quadratic(shard_) && cached_batch_ == batch) return cached_hessian_;
  if (batches_ == 1) {
    cached_hessian_ = std::visit([&](const auto& q) -> Matrix { return q.data_hessian(x); }, shard_);
  } else {
    const LossProblem p = batch_problem(batch);
    cached_hessian_ = std::visit([&](const auto& q) -> Matrix { return q.data_hessian(x); }, p);
  }
  cached_batch_ = batch;
  cached_eigenvalues_.reset();
  return cached_hessian_;
}

double Worker::local_effective_dimension(const Matrix& x, double lambda, Index batch) const {
  const Matrix& h = batch_hessian(x, batch);
  if (!cached_eigenvalues_) cached_eigenvalues_ = symmetric_eigenvalues(SpdMatrix(h));
  return effective_dimension_from_eigenvalues(*cached_eigenvalues_, lambda);
}

Worker::Prepared Worker::prepare(const Matrix& x, const EstimatorSpec& spec, double lambda, Index batch) {
  Prepared out;
  const Matrix& h = batch_hessian(x, batch);
  const double samples = static_cast<double>(batches_ == 1 ? rows_of(shard_) : rows_of(shard_) / batches_);
  switch (spec.kind) {
    case EstimatorKind::Shrinkage:
      out.d_lambda = spec.d_lambda.kind == DLambdaSource::Kind::LocalEmpirical
                         ? local_effective_dimension(x, lambda, batch)
                         : spec.d_lambda.value;
      out.gamma = shrinkage_gamma(out.d_lambda, samples).gamma;
      break;
    case EstimatorKind::SmallReg:
      out.d_lambda = static_cast<double>(h.rows());
      out.gamma = shrinkage_gamma(out.d_lambda, samples).gamma;
      break;
    default:
      out.gamma = 1.0;
  }
  Matrix system = out.gamma * h;
  system.diagonal().array() += lambda;
  system_.emplace(system);
  if (spec.kind == EstimatorKind::Determinantal) out.log_det = log_det_spd(*system_);
  else system_->cholesky_factor();
  return out;
}

Matrix Worker::local_solve(const Matrix& rhs) const {
  if (!system_) throw std::logic_error("Worker::local_solve before prepare");
  return system_->solve(rhs);
}

// ------------------------------------------------------------------ Cluster

Cluster::Cluster(const ShardedProblem& problem)
    : dim_(problem.dim()),
      outputs_(problem.outputs()),
      lambda_(problem.lambda()),
      n_total_(problem.n_total()) {
  workers_.reserve(static_cast<std::size_t>(problem.agents()));
  for (Index i = 0; i < problem.agents(); ++i) workers_.emplace_back(i, problem.shard(i), problem.batches());
  quadratic_ = is_quadratic(problem.global());
}

void Cluster::charge(std::int64_t message_words, std::int64_t messages) {
  stats_.rounds += 1;
  stats_.words += message_words * messages;
  stats_.max_message_words = std::max(stats_.max_message_words, message_words);
}

GradientReport Cluster::evaluate(const Matrix& x) {
  const std::int64_t block = static_cast<std::int64_t>(dim_ * outputs_);
  const auto m = static_cast<std::int64_t>(workers_.size());
  charge(block, m);      // broadcast x
  charge(block + 1, m);  // gather local gradient and objective
  Matrix grad = Matrix::Zero(dim_, outputs_);
  double f = 0.0;
  for (const auto& w : workers_) {
    grad += w.data_gradient(x);
    f += w.data_objective(x);
  }
  grad /= static_cast<double>(m);
  f /= static_cast<double>(m);
  grad += lambda_ * x;
  f += 0.5 * lambda_ * x.squaredNorm();
  return {grad, f};
}

double Cluster::probe_objective(const Matrix& x) {
  charge(static_cast<std::int64_t>(dim_ * outputs_), static_cast<std::int64_t>(workers_.size()));
  double f = 0.0;
  for (const auto& w : workers_) f += w.data_objective(x);
  return f / static_cast<double>(workers_.size()) + 0.5 * lambda_ * x.squaredNorm();
}

Matrix Cluster::hessian_product(const Matrix& at, const Matrix& p) {
  const std::int64_t block = static_cast<std::int64_t>(dim_ * outputs_);
  const auto m = static_cast<std::int64_t>(workers_.size());
  charge(block, m);
  charge(block, m);
  Matrix sum = Matrix::Zero(dim_, outputs_);
  for (const auto& w : workers_) sum += w.data_hessian_vector_product(at, p);
  return sum / static_cast<double>(m) + lambda_ * p;
}

bool Cluster::prepared_for(const EstimatorSpec& spec, Index batch) const {
  return prepared_spec_ && prepared_spec_->kind == spec.kind &&
         prepared_spec_->d_lambda.kind == spec.d_lambda.kind &&
         prepared_spec_->d_lambda.value == spec.d_lambda.value && prepared_batch_ == batch;
}

void Cluster::prepare(const Matrix& x, const EstimatorSpec& spec, Index batch) {
  prepared_spec_.reset();
  log_dets_.assign(workers_.size(), 0.0);
  d_lambdas_.assign(workers_.size(), 0.0);
  if (spec.kind != EstimatorKind::Identity) {
    const std::size_t count = spec.kind == EstimatorKind::FirstAgent ? 1 : workers_.size();
    for (std::size_t i = 0; i < count; ++i) {
      try {
        const auto prep = workers_[i].prepare(x, spec, lambda_, batch);
        log_dets_[i] = prep.log_det;
        d_lambdas_[i] = prep.d_lambda;
      } catch (const BudgetError& e) {
        throw BudgetError("agent " + std::to_string(i) + ": " + e.what());
      } catch (const LinalgError& e) {
        throw LinalgError("agent " + std::to_string(i) + ": local system " + e.what());
      }
    }
  }
  prepared_spec_ = spec;
  prepared_batch_ = batch;
}

Matrix Cluster::apply_estimator(const Matrix& r) {
  if (!prepared_spec_) throw std::logic_error("Cluster::apply_estimator before prepare");
  const EstimatorKind kind = prepared_spec_->kind;
  if (kind == EstimatorKind::Identity) return r;

  const std::int64_t block = static_cast<std::int64_t>(dim_ * outputs_);
  const auto m = static_cast<std::int64_t>(workers_.size());
  if (kind == EstimatorKind::FirstAgent) {
    charge(block, 1);
    charge(block, 1);
    return workers_.front().local_solve(r);
  }

  charge(block, m);
  // Determinantal replies also carry the local log-determinant.
  charge(kind == EstimatorKind::Determinantal ? block + 1 : block, m);
  Matrix out = Matrix::Zero(dim_, outputs_);
  if (kind == EstimatorKind::Determinantal) {
    const auto weights = log_domain_weights(log_dets_);
    for (std::size_t i = 0; i < workers_.size(); ++i) out += weights[i] * workers_[i].local_solve(r);
    return out;
  }
  for (const auto& w : workers_) out += w.local_solve(r);
  return out / static_cast<double>(m);
}

// -------------------------------------------------------------- line search

LineSearchResult backtracking_line_search(const std::function<double(const Matrix&)>& probe,
                                          const Matrix& x, const Matrix& direction,
                                          const Matrix& grad, double f_x,
                                          const LineSearchConfig& config) {
  LineSearchResult out;
  out.eta = config.eta0;
  if (!config.enabled) return out;
  const double slope = frobenius_dot(grad, direction);
  double eta = config.eta0;
  for (int k = 0; k <= config.max_halvings; ++k) {
    const double f_trial = probe(x - eta * direction);
    ++out.probes;
    if (f_trial <= f_x - config.c1 * eta * slope) {
      out.eta = eta;
      return out;
    }
    if (k < config.max_halvings) eta *= config.shrink;
  }
  out.eta = eta;
  out.armijo_failed = true;
  return out;
}

// ---------------------------------------------------------------- records

double log10_gap(double gap) {
  return std::log10(std::max(gap, std::numeric_limits<double>::min()));
}

namespace {

bool same_double(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

}  // namespace

bool same_numbers(const Trajectory& a, const Trajectory& b) {
  if (a.converged != b.converged || a.stop_reason != b.stop_reason || a.rounds.size() != b.rounds.size())
    return false;
  for (std::size_t i = 0; i < a.rounds.size(); ++i) {
    const auto& x = a.rounds[i];
    const auto& y = b.rounds[i];
    if (x.iteration != y.iteration || !same_double(x.iterate_norm, y.iterate_norm) ||
        !same_double(x.objective, y.objective) || !same_double(x.log10_gap, y.log10_gap) ||
        !same_double(x.gradient_norm, y.gradient_norm) || !same_double(x.step_size, y.step_size) ||
        x.communication_rounds != y.communication_rounds ||
        !same_double(x.contraction_ratio, y.contraction_ratio) ||
        x.inner_iterations != y.inner_iterations || x.line_search_warning != y.line_search_warning)
      return false;
  }
  return true;
}

// ------------------------------------------------------------- algorithms

double local_effective_dimension(const LossProblem& shard, const Matrix& x, double lambda) {
  const Matrix h = std::visit([&](const auto& q) -> Matrix { return q.data_hessian(x); }, shard);
  return effective_dimension(SpdMatrix(h), lambda);
}

namespace {

void ensure_prepared(Cluster& cluster, bool quadratic, const Matrix& x, const EstimatorSpec& spec,
                     Index batch) {
  // Quadratic Hessians do not depend on x, so one factorization serves every round.
  if (!quadratic || !cluster.prepared_for(spec, batch)) cluster.prepare(x, spec, batch);
}

}  // namespace

NewtonRoundResult newton_round(Cluster& cluster, const Matrix& x, const EstimatorSpec& spec,
                               const LineSearchConfig& line_search, Index batch) {
  spec.validate(false);
  const auto rounds_before = cluster.stats().rounds;
  NewtonRoundResult out;
  const GradientReport report = cluster.evaluate(x);
  out.gradient = report.gradient;
  out.objective = report.objective;
  ensure_prepared(cluster, cluster.quadratic(), x, spec, batch);
  out.direction = cluster.apply_estimator(report.gradient);
  out.line_search = backtracking_line_search([&](const Matrix& trial) { return cluster.probe_objective(trial); },
                                             x, out.direction, report.gradient, report.objective, line_search);
  out.x_next = x - out.line_search.eta * out.direction;
  out.rounds_used = cluster.stats().rounds - rounds_before;
  return out;
}

PcgResult distributed_pcg(Cluster& cluster, const Matrix& v, const EstimatorSpec& spec,
                          const PcgConfig& config, Index batch) {
  spec.validate(true);
  const auto rounds_before = cluster.stats().rounds;
  PcgResult out;
  const GradientReport report = cluster.evaluate(v);
  out.gradient = report.gradient;
  out.objective = report.objective;
  const Matrix& b = report.gradient;
  out.step = Matrix::Zero(b.rows(), b.cols());
  out.residual_history.push_back(1.0);
  const double b_norm = b.norm();
  if (b_norm == 0.0) {
    out.residual_history.back() = 0.0;
    out.rounds_used = cluster.stats().rounds - rounds_before;
    return out;
  }

  ensure_prepared(cluster, cluster.quadratic(), v, spec, batch);
  Matrix r = b;
  Matrix z = cluster.apply_estimator(r);
  Matrix p = z;
  double rho = frobenius_dot(r, z);
  for (int t = 1; t <= config.t_max; ++t) {
    if (r.norm() / b_norm <= config.tol) break;
    const Matrix omega = cluster.hessian_product(v, p);
    const double curvature = frobenius_dot(omega, p);
    if (!(curvature > 0.0)) throw PcgBreakdown("PCG breakdown");
    const double alpha = rho / curvature;
    out.step += alpha * p;
    r -= alpha * omega;
    ++out.iterations;
    out.residual_history.push_back(r.norm() / b_norm);
    z = cluster.apply_estimator(r);
    const double rho_next = frobenius_dot(z, r);
    p = z + (rho_next / rho) * p;
    rho = rho_next;
  }
  out.rounds_used = cluster.stats().rounds - rounds_before;
  return out;
}

namespace {

class TrajectoryRecorder {
 public:
  explicit TrajectoryRecorder(const ShardedProblem& problem)
      : problem_(problem), reference_(reference_optimum(problem.global())),
        start_(std::chrono::steady_clock::now()) {}

  double gap(const Matrix& x) const { return optimality_gap(problem_.global(), reference_, x); }

  void record(Trajectory& traj, int iteration, const Matrix& x, const Matrix* previous, double step,
              std::int64_t rounds, int inner, bool warning) const {
    RoundRecord rec;
    rec.iteration = iteration;
    rec.iterate_norm = x.norm();
    rec.objective = objective(problem_.global(), x);
    rec.log10_gap = log10_gap(gap(x));
    rec.gradient_norm = gradient(problem_.global(), x).norm();
    rec.step_size = step;
    rec.communication_rounds = rounds;
    rec.elapsed_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    if (previous) {
      const double before = (*previous - reference_.x).norm();
      rec.contraction_ratio = before > 0.0 ? (x - reference_.x).norm() / before : 0.0;
    } else {
      rec.contraction_ratio = std::numeric_limits<double>::quiet_NaN();
    }
    rec.inner_iterations = inner;
    rec.line_search_warning = warning;
    traj.rounds.push_back(rec);
  }

 private:
  const ShardedProblem& problem_;
  ReferenceOptimum reference_;
  std::chrono::steady_clock::time_point start_;
};

int iteration_budget(const ShardedProblem& problem, const StoppingConfig& stopping) {
  // Fresh batches are never recycled.
  if (problem.batches() > 1) return std::min<int>(stopping.max_iterations, static_cast<int>(problem.batches()));
  return stopping.max_iterations;
}

template <typename StepFn>
Trajectory drive(const ShardedProblem& problem, const StoppingConfig& stopping, StepFn step) {
  Cluster cluster(problem);
  TrajectoryRecorder recorder(problem);
  Trajectory traj;
  Matrix x = Matrix::Zero(problem.dim(), problem.outputs());
  recorder.record(traj, 0, x, nullptr, 0.0, 0, 0, false);
  const int budget = iteration_budget(problem, stopping);
  for (int t = 0;; ++t) {
    if (recorder.gap(x) <= stopping.gap_tol) {
      traj.converged = true;
      traj.stop_reason = StopReason::GapReached;
      break;
    }
    if (t >= budget) {
      traj.stop_reason = StopReason::MaxIterations;
      break;
    }
    const Index batch = problem.batches() > 1 ? t : 0;
    const auto result = step(cluster, x, batch);
    const Matrix previous = x;
    x = result.x_next;
    recorder.record(traj, t + 1, x, &previous, result.eta, cluster.stats().rounds, result.inner,
                    result.warning);
  }
  return traj;
}

struct StepOutcome {
  Matrix x_next;
  double eta;
  int inner;
  bool warning;
};

}  // namespace

Trajectory run_newton(const ShardedProblem& problem, const EstimatorSpec& spec,
                      const StoppingConfig& stopping, const LineSearchConfig& line_search) {
  spec.validate(false);
  return drive(problem, stopping, [&](Cluster& cluster, const Matrix& x, Index batch) {
    auto r = newton_round(cluster, x, spec, line_search, batch);
    return StepOutcome{std::move(r.x_next), r.line_search.eta, 0, r.line_search.armijo_failed};
  });
}

Trajectory run_inexact_newton(const ShardedProblem& problem, const EstimatorSpec& spec,
                              const PcgConfig& pcg, const StoppingConfig& stopping,
                              const LineSearchConfig& line_search) {
  spec.validate(true);
  return drive(problem, stopping, [&](Cluster& cluster, const Matrix& x, Index batch) {
    const auto solve = distributed_pcg(cluster, x, spec, pcg, batch);
    const auto ls = backtracking_line_search(
        [&](const Matrix& trial) { return cluster.probe_objective(trial); }, x, solve.step,
        solve.gradient, solve.objective, line_search);
    return StepOutcome{x - ls.eta * solve.step, ls.eta, solve.iterations, ls.armijo_failed};
  });
}

}  // namespace shrinkopt
