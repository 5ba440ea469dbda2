#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "shrinkopt/estimators.hpp"
#include "shrinkopt/linalg.hpp"
#include "shrinkopt/losses.hpp"

namespace shrinkopt {

class PcgBreakdown : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ------------------------------------------------------------ problem split

/// A loss split into m disjoint contiguous row blocks of floor(n/m) rows each.
/// Trailing rows beyond m * floor(n/m) are dropped. With `batches` > 1 each
/// shard is further cut into that many equal fresh batches, one per Newton
/// iteration, used for the local Hessians.
class ShardedProblem {
 public:
  ShardedProblem(const LossProblem& full, Index agents, Index batches = 1);

  Index agents() const { return static_cast<Index>(shards_.size()); }
  Index rows_per_shard() const { return rows_per_shard_; }
  Index n_total() const { return rows_per_shard_ * agents(); }
  Index dim() const { return dim_of(global_); }
  Index outputs() const { return outputs_of(global_); }
  double lambda() const { return lambda_of(global_); }
  Index batches() const { return batches_; }
  Index rows_per_batch() const { return rows_per_shard_ / batches_; }

  const LossProblem& shard(Index i) const { return shards_.at(static_cast<std::size_t>(i)); }
  /// The truncated global problem; used for reference optima and monitoring only.
  const LossProblem& global() const { return global_; }

 private:
  LossProblem global_;
  std::vector<LossProblem> shards_;
  Index rows_per_shard_;
  Index batches_;
};

// ------------------------------------------------------------- estimators

enum class EstimatorKind { Shrinkage, Average, Determinantal, SmallReg, FirstAgent, Identity };

struct DLambdaSource {
  enum class Kind { Exact, LocalEmpirical, Fixed };
  Kind kind = Kind::LocalEmpirical;
  double value = 0.0;

  static DLambdaSource exact(double v) { return {Kind::Exact, v}; }
  static DLambdaSource local() { return {Kind::LocalEmpirical, 0.0}; }
  static DLambdaSource fixed(double v) { return {Kind::Fixed, v}; }
};

struct EstimatorSpec {
  EstimatorKind kind = EstimatorKind::Shrinkage;
  DLambdaSource d_lambda = DLambdaSource::local();

  static EstimatorSpec shrinkage(DLambdaSource src = DLambdaSource::local()) {
    return {EstimatorKind::Shrinkage, src};
  }
  static EstimatorSpec average() { return {EstimatorKind::Average, {}}; }
  static EstimatorSpec determinantal() { return {EstimatorKind::Determinantal, {}}; }
  static EstimatorSpec small_reg() { return {EstimatorKind::SmallReg, {}}; }
  static EstimatorSpec first_agent() { return {EstimatorKind::FirstAgent, {}}; }
  static EstimatorSpec identity() { return {EstimatorKind::Identity, {}}; }

  /// Throws std::invalid_argument when the spec is not usable in this role.
  void validate(bool as_preconditioner) const;
};

std::string estimator_name(EstimatorKind kind);
std::optional<EstimatorKind> parse_estimator_kind(const std::string& name);

// ------------------------------------------------------ simulated cluster

struct CommStats {
  std::int64_t rounds = 0;
  std::int64_t words = 0;
  /// Largest single message between one worker and the coordinator.
  std::int64_t max_message_words = 0;
};

/// One simulated worker. Its shard is private; every public method returns
/// d x c matrices or scalars only.
class Worker {
 public:
  Worker(Index index, LossProblem shard, Index batches);

  Index index() const { return index_; }
  Index rows() const { return rows_of(shard_); }

  double data_objective(const Matrix& x) const;
  Matrix data_gradient(const Matrix& x) const;
  Matrix data_hessian_vector_product(const Matrix& x, const Matrix& v) const;
  /// d_{lambda,i} = tr(H_i (H_i + lambda I)^{-1}) of the unregularized local Hessian
  /// on the given batch.
  double local_effective_dimension(const Matrix& x, double lambda, Index batch = 0) const;

  struct Prepared {
    double d_lambda = 0.0;
    double gamma = 1.0;
    double log_det = 0.0;
  };
  /// Factors (gamma_i H_i + lambda I) for the estimator at x on the given batch.
  Prepared prepare(const Matrix& x, const EstimatorSpec& spec, double lambda, Index batch);
  /// Applies the prepared local inverse.
  Matrix local_solve(const Matrix& rhs) const;

 private:
  Index index_;
  LossProblem shard_;
  Index batches_;
  std::optional<SpdMatrix> system_;
  // Cached data Hessian and eigenvalues for quadratic losses, keyed by batch.
  mutable std::optional<Index> cached_batch_;
  mutable Matrix cached_hessian_;
  mutable std::optional<Vector> cached_eigenvalues_;

  const Matrix& batch_hessian(const Matrix& x, Index batch) const;
  LossProblem batch_problem(Index batch) const;
};

struct GradientReport {
  Matrix gradient;  // (1/m) sum grad f_i + lambda x
  double objective = 0.0;
};

/// Coordinator plus m workers. All worker traffic goes through these methods,
/// which charge communication rounds:
///   evaluate           broadcast x, gather gradients and objectives   2 rounds
///   apply_estimator    broadcast r, gather local solves               2 rounds
///   hessian_product    broadcast p, gather Hessian-vector products    2 rounds
///   probe_objective    line-search trial, gather objectives           1 round
class Cluster {
 public:
  explicit Cluster(const ShardedProblem& problem);

  Index agents() const { return static_cast<Index>(workers_.size()); }
  Index dim() const { return dim_; }
  Index outputs() const { return outputs_; }
  double lambda() const { return lambda_; }
  Index n_total() const { return n_total_; }
  bool quadratic() const { return quadratic_; }
  const CommStats& stats() const { return stats_; }

  GradientReport evaluate(const Matrix& x);
  double probe_objective(const Matrix& x);
  Matrix hessian_product(const Matrix& at, const Matrix& p);

  /// Local work only: each worker factors its system for `spec` at x.
  /// Throws BudgetError naming the first agent whose budget is violated.
  void prepare(const Matrix& x, const EstimatorSpec& spec, Index batch = 0);
  bool prepared_for(const EstimatorSpec& spec, Index batch) const;

  /// Combines local solves against r according to the prepared spec.
  Matrix apply_estimator(const Matrix& r);

  /// Effective dimensions reported by the last prepare() (scalars only).
  const std::vector<double>& local_effective_dimensions() const { return d_lambdas_; }

 private:
  std::vector<Worker> workers_;
  Index dim_;
  Index outputs_;
  double lambda_;
  Index n_total_;
  bool quadratic_ = true;
  CommStats stats_;
  std::optional<EstimatorSpec> prepared_spec_;
  Index prepared_batch_ = -1;
  std::vector<double> log_dets_;
  std::vector<double> d_lambdas_;

  void charge(std::int64_t message_words, std::int64_t messages);
};

// ------------------------------------------------------------ line search

struct LineSearchConfig {
  bool enabled = true;
  double c1 = 1e-4;
  double shrink = 0.5;
  int max_halvings = 30;
  double eta0 = 1.0;
};

struct LineSearchResult {
  double eta = 1.0;
  int probes = 0;
  bool armijo_failed = false;
};

/// Largest eta = eta0 shrink^k with f(x - eta dir) <= f(x) - c1 eta <grad, dir>.
/// Each call to `probe` is one trial evaluation.
LineSearchResult backtracking_line_search(const std::function<double(const Matrix&)>& probe,
                                          const Matrix& x, const Matrix& direction,
                                          const Matrix& grad, double f_x,
                                          const LineSearchConfig& config);

// ---------------------------------------------------------- trajectories

enum class StopReason { GapReached, MaxIterations };

struct RoundRecord {
  int iteration = 0;
  double iterate_norm = 0.0;
  double objective = 0.0;
  double log10_gap = 0.0;
  double gradient_norm = 0.0;
  double step_size = 0.0;
  std::int64_t communication_rounds = 0;
  double elapsed_seconds = 0.0;
  /// ||x_{t+1} - x*|| / ||x_t - x*||; NaN on the initial record.
  double contraction_ratio = 0.0;
  int inner_iterations = 0;
  bool line_search_warning = false;
};

struct Trajectory {
  std::vector<RoundRecord> rounds;
  bool converged = false;
  StopReason stop_reason = StopReason::MaxIterations;
};

/// Equality on every recorded number except wall time.
bool same_numbers(const Trajectory& a, const Trajectory& b);

struct StoppingConfig {
  double gap_tol = 1e-10;
  int max_iterations = 100;
};

struct PcgConfig {
  double tol = 1e-10;
  int t_max = 200;
};

// ------------------------------------------------------------ algorithms

double local_effective_dimension(const LossProblem& shard, const Matrix& x, double lambda);

struct NewtonRoundResult {
  Matrix x_next;
  Matrix direction;
  Matrix gradient;
  double objective = 0.0;
  LineSearchResult line_search;
  std::int64_t rounds_used = 0;
};

/// One iteration of distributed Newton with the estimator in `spec`.
NewtonRoundResult newton_round(Cluster& cluster, const Matrix& x, const EstimatorSpec& spec,
                               const LineSearchConfig& line_search, Index batch = 0);

struct PcgResult {
  Matrix step;
  int iterations = 0;
  std::vector<double> residual_history;  // ||r_t|| / ||b||, starting at 1
  Matrix gradient;                       // b = grad f(v)
  double objective = 0.0;                // f(v)
  std::int64_t rounds_used = 0;
};

/// Distributed preconditioned CG for H(v) step = grad f(v), preconditioned by
/// the combined local inverses of `spec`.
PcgResult distributed_pcg(Cluster& cluster, const Matrix& v, const EstimatorSpec& spec,
                          const PcgConfig& config, Index batch = 0);

Trajectory run_newton(const ShardedProblem& problem, const EstimatorSpec& spec,
                      const StoppingConfig& stopping, const LineSearchConfig& line_search = {});

Trajectory run_inexact_newton(const ShardedProblem& problem, const EstimatorSpec& spec,
                              const PcgConfig& pcg, const StoppingConfig& stopping,
                              const LineSearchConfig& line_search = {});

/// log10 of a gap, floored at the smallest normal double.
double log10_gap(double gap);

}  // namespace shrinkopt
