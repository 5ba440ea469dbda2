#pragma once

#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "shrinkopt/linalg.hpp"

namespace shrinkopt {

/// Effective dimension is not below the sample budget, so no finite shrinkage
/// coefficient exists.
class BudgetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Determinantal weights or normalization left the representable range.
class InstabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// gamma = 1 / (1 - d_lambda_used / samples_used).
struct ShrinkageCoefficient {
  double gamma = 1.0;
  double d_lambda_used = 0.0;
  double samples_used = 1.0;
};

struct ShrinkageOptions {
  /// When set, budget violations clamp gamma to this value instead of throwing.
  std::optional<double> gamma_max;
};

ShrinkageCoefficient shrinkage_gamma(double d_lambda, double samples,
                                     const ShrinkageOptions& options = {});

/// Per-agent empirical covariances (m/n) A_i^T A_i with equal block sizes.
class LocalCovariances {
 public:
  LocalCovariances(std::vector<SpdMatrix> blocks, Index samples_per_block);

  /// Builds A_i^T A_i / k for each row block A_i (all blocks must have k rows).
  static LocalCovariances from_data(std::span<const Matrix> blocks);

  const std::vector<SpdMatrix>& blocks() const { return blocks_; }
  Index agents() const { return static_cast<Index>(blocks_.size()); }
  Index samples_per_block() const { return samples_per_block_; }
  Index n_total() const { return samples_per_block_ * agents(); }
  Index dim() const { return dim_; }

 private:
  std::vector<SpdMatrix> blocks_;
  Index samples_per_block_;
  Index dim_;
};

enum class DeterminantalMode { SelfNormalized, GlobalDet };

/// (1/m) sum_i (B_i + lambda I)^{-1}
SpdMatrix estimate_resolvent_average(const LocalCovariances& locals, double lambda);

/// (1/m) sum_i (gamma B_i + lambda I)^{-1}, gamma = 1/(1 - m d_lambda / n).
SpdMatrix estimate_resolvent_shrinkage(const LocalCovariances& locals, double lambda,
                                       double d_lambda, const ShrinkageOptions& options = {});

/// Shrinkage estimator with d_lambda replaced by the dimension d.
SpdMatrix estimate_resolvent_small_reg(const LocalCovariances& locals, double epsilon);

/// Determinant-weighted average of local resolvents, weights taken in the log
/// domain. GlobalDet divides by m det(Sigma + lambda I) and needs `reference`.
SpdMatrix estimate_resolvent_determinantal(const LocalCovariances& locals, double lambda,
                                           DeterminantalMode mode,
                                           const std::optional<SpdMatrix>& reference = {});

/// ||estimate - reference||_2 / ||reference||_2
double resolvent_relative_error(const SpdMatrix& estimate, const SpdMatrix& reference);

/// Normalized weights exp(l_i - max_j l_j) / sum_k exp(l_k - max_j l_j).
std::vector<double> log_domain_weights(std::span<const double> log_values);

}  // namespace shrinkopt
