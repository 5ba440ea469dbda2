#pragma once

#include <stdexcept>
#include <variant>

#include "shrinkopt/linalg.hpp"

namespace shrinkopt {

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, double gradient_norm)
      : std::runtime_error(what), gradient_norm_(gradient_norm) {}
  double gradient_norm() const { return gradient_norm_; }

 private:
  double gradient_norm_;
};

// Both problem types split into an unregularized data term (what a worker
// evaluates on its shard) and lambda/2 ||x||_F^2 added on top. Iterates are
// d x c matrices; logistic problems always have c == 1.

/// f(x) = ||Ax - b||_F^2 / (2n) + lambda ||x||_F^2 / 2, b may have several columns.
class RidgeProblem {
 public:
  RidgeProblem(Matrix features, Matrix targets, double lambda);

  const Matrix& features() const { return features_; }
  const Matrix& targets() const { return targets_; }
  double lambda() const { return lambda_; }
  Index rows() const { return features_.rows(); }
  Index dim() const { return features_.cols(); }
  Index outputs() const { return targets_.cols(); }

  double data_objective(const Matrix& x) const;
  Matrix data_gradient(const Matrix& x) const;
  /// A^T A / n; independent of x.
  Matrix data_hessian(const Matrix& x) const;
  Matrix data_hessian_vector_product(const Matrix& x, const Matrix& v) const;

 private:
  Matrix features_;
  Matrix targets_;
  double lambda_;

  void check_iterate(const Matrix& x) const;
};

/// f(x) = (1/n) sum_i log(1 + exp(-y_i a_i^T x)) + lambda ||x||^2 / 2, y_i in {-1, +1}.
class LogisticProblem {
 public:
  LogisticProblem(Matrix features, Vector labels, double lambda);

  const Matrix& features() const { return features_; }
  const Vector& labels() const { return labels_; }
  double lambda() const { return lambda_; }
  Index rows() const { return features_.rows(); }
  Index dim() const { return features_.cols(); }
  Index outputs() const { return 1; }

  double data_objective(const Matrix& x) const;
  Matrix data_gradient(const Matrix& x) const;
  /// (1/n) sum_i s_i (1 - s_i) a_i a_i^T with s_i the sigmoid of the margin.
  Matrix data_hessian(const Matrix& x) const;
  Matrix data_hessian_vector_product(const Matrix& x, const Matrix& v) const;

 private:
  Matrix features_;
  Vector labels_;
  double lambda_;

  void check_iterate(const Matrix& x) const;
  Vector curvature_weights(const Matrix& x) const;
};

using LossProblem = std::variant<RidgeProblem, LogisticProblem>;

double objective(const LossProblem& p, const Matrix& x);
Matrix gradient(const LossProblem& p, const Matrix& x);
SpdMatrix hessian(const LossProblem& p, const Matrix& x);
/// H(x) v computed without forming H.
Matrix hessian_vector_product(const LossProblem& p, const Matrix& x, const Matrix& v);

double lambda_of(const LossProblem& p);
Index dim_of(const LossProblem& p);
Index outputs_of(const LossProblem& p);
Index rows_of(const LossProblem& p);
bool is_quadratic(const LossProblem& p);

/// Same loss type and lambda restricted to rows [begin, begin + count).
LossProblem row_slice(const LossProblem& p, Index begin, Index count);

/// log(1 + exp(z)) without overflow.
double softplus(double z);
double sigmoid(double z);

struct ReferenceOptimum {
  Matrix x;
  double objective = 0.0;
  int newton_iterations = 0;
};

struct ReferenceOptions {
  double gradient_tol = 1e-13;
  int max_iterations = 200;
};

/// Ridge: closed-form solve. Logistic: damped Newton with the exact Hessian.
ReferenceOptimum reference_optimum(const LossProblem& p, const ReferenceOptions& options = {});

/// f(x) - f(x*). For ridge the exact quadratic identity
/// (1/2) <x - x*, H (x - x*)> is used, which avoids cancellation.
double optimality_gap(const LossProblem& p, const ReferenceOptimum& ref, const Matrix& x);

}  // namespace shrinkopt
