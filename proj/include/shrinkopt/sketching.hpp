#pragma once

#include <optional>
#include <string>
#include <vector>

#include "shrinkopt/distributed.hpp"
#include "shrinkopt/linalg.hpp"
#include "shrinkopt/losses.hpp"
#include "shrinkopt/rng.hpp"

namespace shrinkopt {

enum class IhsVariant { Plain, ShrinkageExact, ShrinkageApprox };

std::string ihs_variant_name(IhsVariant v);
std::optional<IhsVariant> parse_ihs_variant(const std::string& name);

/// S A with S an m x n matrix of i.i.d. Normal(0, 1/m) entries.
Matrix sketch(const Matrix& a, Index sketch_size, RngStream& stream);

/// Sketched ridge Hessian H_S = (SA)^T (SA) / n + lambda I, optionally shrunk to
/// gamma (H_S - lambda I) + lambda I with gamma = 1 / (1 - d / m).
class SketchedSystem {
 public:
  /// `d_lambda` is the exact effective dimension of A^T A / n; required for
  /// ShrinkageExact. ShrinkageApprox computes it from the sketch.
  SketchedSystem(Matrix sketched_features, Index original_rows, double lambda, IhsVariant variant,
                 std::optional<double> d_lambda = std::nullopt);

  const Matrix& sketched_features() const { return sketched_; }
  Index sketch_size() const { return sketched_.rows(); }
  Index original_rows() const { return original_rows_; }
  double lambda() const { return lambda_; }
  IhsVariant variant() const { return variant_; }
  std::optional<double> d_lambda() const { return d_lambda_; }
  double d_lambda_tilde() const { return d_lambda_tilde_; }
  double gamma() const { return gamma_; }

  /// (SA)^T (SA) / n, the sketched covariance without the lambda shift.
  const SpdMatrix& sketched_covariance() const { return covariance_; }
  /// gamma (H_S - lambda I) + lambda I
  const SpdMatrix& system() const { return system_; }

  /// Solves the (shrunk) sketched system against g.
  Matrix direction(const Matrix& g) const;

 private:
  Matrix sketched_;
  Index original_rows_;
  double lambda_;
  IhsVariant variant_;
  std::optional<double> d_lambda_;
  double d_lambda_tilde_;
  double gamma_ = 1.0;
  SpdMatrix covariance_;
  SpdMatrix system_;
};

/// tr(C (C + lambda I)^{-1}) with C = (SA)^T (SA) / n.
double sketched_effective_dimension(const Matrix& sketched_features, Index original_rows, double lambda);

Matrix ihs_direction(const SketchedSystem& system, const Matrix& g);

struct IhsOptions {
  StoppingConfig stopping{1e-8, 200};
  LineSearchConfig line_search{};
  /// Draw a new sketch every iteration instead of once per trial.
  bool refresh_sketch = false;
};

/// One IHS run per trial from x0 = 0; trial t draws its sketch from stream.derive(t).
std::vector<Trajectory> run_ihs(const RidgeProblem& ridge, Index sketch_size, IhsVariant variant,
                                const IhsOptions& options, int trials, const RngStream& stream);

/// Single trial with a caller-supplied stream.
Trajectory run_ihs_trial(const RidgeProblem& ridge, const ReferenceOptimum& reference,
                         Index sketch_size, IhsVariant variant, const IhsOptions& options,
                         double exact_d_lambda, RngStream stream);

/// d_lambda(A^T A / n)
double data_effective_dimension(const RidgeProblem& ridge);

}  // namespace shrinkopt
