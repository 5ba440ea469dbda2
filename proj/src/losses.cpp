#include "shrinkopt/losses.hpp"

#include <cmath>
#include <string>

namespace shrinkopt {

double softplus(double z) {
  if (z > 0.0) return z + std::log1p(std::exp(-z));
  return std::log1p(std::exp(z));
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// ---------------------------------------------------------------- ridge

RidgeProblem::RidgeProblem(Matrix features, Matrix targets, double lambda)
    : features_(std::move(features)), targets_(std::move(targets)), lambda_(lambda) {
  if (features_.rows() != targets_.rows())
    throw ShapeError("RidgeProblem: features have " + std::to_string(features_.rows()) +
                     " rows but targets have " + std::to_string(targets_.rows()));
  if (targets_.cols() < 1) throw ShapeError("RidgeProblem: targets need at least one column");
  if (!(lambda_ > 0.0)) throw std::invalid_argument("RidgeProblem: lambda must be positive");
  if (features_.rows() < 1) throw ShapeError("RidgeProblem: no rows");
}

void RidgeProblem::check_iterate(const Matrix& x) const {
  if (x.rows() != dim() || x.cols() != outputs())
    throw ShapeError("RidgeProblem: iterate must be " + std::to_string(dim()) + "x" +
                     std::to_string(outputs()));
}

double RidgeProblem::data_objective(const Matrix& x) const {
  check_iterate(x);
  return (features_ * x - targets_).squaredNorm() / (2.0 * static_cast<double>(rows()));
}

Matrix RidgeProblem::data_gradient(const Matrix& x) const {
  check_iterate(x);
  return features_.transpose() * (features_ * x - targets_) / static_cast<double>(rows());
}

Matrix RidgeProblem::data_hessian(const Matrix& x) const {
  check_iterate(x);
  Matrix gram = Matrix::Zero(dim(), dim());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(features_.transpose(),
                                                  1.0 / static_cast<double>(rows()));
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return gram;
}

Matrix RidgeProblem::data_hessian_vector_product(const Matrix& x, const Matrix& v) const {
  check_iterate(x);
  if (v.rows() != dim()) throw ShapeError("RidgeProblem: direction has wrong row count");
  return features_.transpose() * (features_ * v) / static_cast<double>(rows());
}

// ------------------------------------------------------------- logistic

LogisticProblem::LogisticProblem(Matrix features, Vector labels, double lambda)
    : features_(std::move(features)), labels_(std::move(labels)), lambda_(lambda) {
  if (features_.rows() != labels_.size())
    throw ShapeError("LogisticProblem: features have " + std::to_string(features_.rows()) +
                     " rows but " + std::to_string(labels_.size()) + " labels");
  for (Index i = 0; i < labels_.size(); ++i)
    if (labels_(i) != 1.0 && labels_(i) != -1.0)
      throw std::invalid_argument("LogisticProblem: labels must be -1 or +1");
  if (!(lambda_ > 0.0)) throw std::invalid_argument("LogisticProblem: lambda must be positive");
  if (features_.rows() < 1) throw ShapeError("LogisticProblem: no rows");
}

void LogisticProblem::check_iterate(const Matrix& x) const {
  if (x.rows() != dim() || x.cols() != 1)
    throw ShapeError("LogisticProblem: iterate must be " + std::to_string(dim()) + "x1");
}

double LogisticProblem::data_objective(const Matrix& x) const {
  check_iterate(x);
  const Vector margins = labels_.cwiseProduct(features_ * x.col(0));
  double total = 0.0;
  for (Index i = 0; i < margins.size(); ++i) total += softplus(-margins(i));
  return total / static_cast<double>(rows());
}

Matrix LogisticProblem::data_gradient(const Matrix& x) const {
  check_iterate(x);
  const Vector margins = labels_.cwiseProduct(features_ * x.col(0));
  // d/dz softplus(-z) = -sigmoid(-z)
  Vector coeff(margins.size());
  for (Index i = 0; i < margins.size(); ++i) coeff(i) = -labels_(i) * sigmoid(-margins(i));
  return features_.transpose() * coeff / static_cast<double>(rows());
}

Vector LogisticProblem::curvature_weights(const Matrix& x) const {
  const Vector margins = features_ * x.col(0);
  Vector w(margins.size());
  for (Index i = 0; i < margins.size(); ++i) {
    const double s = sigmoid(margins(i));
    w(i) = s * (1.0 - s);
  }
  return w;
}

Matrix LogisticProblem::data_hessian(const Matrix& x) const {
  check_iterate(x);
  const Vector w = curvature_weights(x);
  const Matrix scaled = w.cwiseSqrt().asDiagonal() * features_;
  Matrix gram = Matrix::Zero(dim(), dim());
  gram.selfadjointView<Eigen::Lower>().rankUpdate(scaled.transpose(),
                                                  1.0 / static_cast<double>(rows()));
  gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
  return gram;
}

Matrix LogisticProblem::data_hessian_vector_product(const Matrix& x, const Matrix& v) const {
  check_iterate(x);
  if (v.rows() != dim()) throw ShapeError("LogisticProblem: direction has wrong row count");
  const Vector w = curvature_weights(x);
  return features_.transpose() * (w.asDiagonal() * (features_ * v)) / static_cast<double>(rows());
}

// ------------------------------------------------------------- dispatch

double lambda_of(const LossProblem& p) {
  return std::visit([](const auto& q) { return q.lambda(); }, p);
}
Index dim_of(const LossProblem& p) {
  return std::visit([](const auto& q) { return q.dim(); }, p);
}
Index outputs_of(const LossProblem& p) {
  return std::visit([](const auto& q) { return q.outputs(); }, p);
}
Index rows_of(const LossProblem& p) {
  return std::visit([](const auto& q) { return q.rows(); }, p);
}
bool is_quadratic(const LossProblem& p) { return std::holds_alternative<RidgeProblem>(p); }

double objective(const LossProblem& p, const Matrix& x) {
  return std::visit([&](const auto& q) { return q.data_objective(x) + 0.5 * q.lambda() * x.squaredNorm(); },
                    p);
}

Matrix gradient(const LossProblem& p, const Matrix& x) {
  return std::visit([&](const auto& q) -> Matrix { return q.data_gradient(x) + q.lambda() * x; }, p);
}

SpdMatrix hessian(const LossProblem& p, const Matrix& x) {
  return std::visit(
      [&](const auto& q) {
        Matrix h = q.data_hessian(x);
        h.diagonal().array() += q.lambda();
        return SpdMatrix(h);
      },
      p);
}

Matrix hessian_vector_product(const LossProblem& p, const Matrix& x, const Matrix& v) {
  return std::visit(
      [&](const auto& q) -> Matrix { return q.data_hessian_vector_product(x, v) + q.lambda() * v; }, p);
}

LossProblem row_slice(const LossProblem& p, Index begin, Index count) {
  if (begin < 0 || count < 1 || begin + count > rows_of(p))
    throw ShapeError("row_slice: range outside the problem");
  if (const auto* r = std::get_if<RidgeProblem>(&p))
    return RidgeProblem(r->features().middleRows(begin, count), r->targets().middleRows(begin, count),
                        r->lambda());
  const auto& l = std::get<LogisticProblem>(p);
  return LogisticProblem(l.features().middleRows(begin, count), l.labels().segment(begin, count),
                         l.lambda());
}

// ------------------------------------------------------------ reference

ReferenceOptimum reference_optimum(const LossProblem& p, const ReferenceOptions& options) {
  const Index d = dim_of(p);
  const Index c = outputs_of(p);
  if (const auto* r = std::get_if<RidgeProblem>(&p)) {
    const SpdMatrix h = hessian(p, Matrix::Zero(d, c));
    const Matrix rhs = r->features().transpose() * r->targets() / static_cast<double>(r->rows());
    ReferenceOptimum out;
    out.x = h.solve(rhs);
    out.objective = objective(p, out.x);
    return out;
  }

  Matrix x = Matrix::Zero(d, 1);
  double f = objective(p, x);
  double best_gnorm = INFINITY;
  for (int iter = 0; iter < options.max_iterations; ++iter) {
    const Matrix g = gradient(p, x);
    const double gnorm = g.norm();
    best_gnorm = std::min(best_gnorm, gnorm);
    if (gnorm < options.gradient_tol) return {x, f, iter};
    const Matrix step = hessian(p, x).solve(g);
    double eta = 1.0;
    Matrix trial = x - step;
    double f_trial = objective(p, trial);
    const double slope = (g.array() * step.array()).sum();
    int halvings = 0;
    while (f_trial > f - 1e-4 * eta * slope && halvings < 60) {
      eta *= 0.5;
      trial = x - eta * step;
      f_trial = objective(p, trial);
      ++halvings;
    }
    if (halvings == 60 || trial == x) {
      // No representable progress left; accept if rounding is the only obstacle.
      if (gnorm < 1e-10) return {x, f, iter};
      throw ConvergenceError("reference_optimum: line search stalled at gradient norm " +
                                 std::to_string(gnorm),
                             gnorm);
    }
    x = trial;
    f = f_trial;
  }
  const double gnorm = gradient(p, x).norm();
  if (gnorm < options.gradient_tol) return {x, f, options.max_iterations};
  throw ConvergenceError("reference_optimum: no convergence after " +
                             std::to_string(options.max_iterations) + " iterations, gradient norm " +
                             std::to_string(gnorm),
                         gnorm);
}

double optimality_gap(const LossProblem& p, const ReferenceOptimum& ref, const Matrix& x) {
  if (is_quadratic(p)) {
    const Matrix diff = x - ref.x;
    const Matrix hd = hessian_vector_product(p, x, diff);
    return std::max(0.5 * (diff.array() * hd.array()).sum(), 0.0);
  }
  return std::max(objective(p, x) - ref.objective, 0.0);
}

}  // namespace shrinkopt
