#include "shrinkopt/linalg.hpp"

#include <algorithm>
#include <cmath>

namespace shrinkopt {

SpdMatrix::SpdMatrix(const Matrix& m) : cache_(std::make_shared<FactorCache>()) {
  if (m.rows() != m.cols()) throw LinalgError("SpdMatrix: input is not square");
  entries_ = 0.5 * (m + m.transpose());
}

SpdMatrix SpdMatrix::identity(Index dim, double scale) {
  return SpdMatrix(scale * Matrix::Identity(dim, dim));
}

SpdMatrix SpdMatrix::diagonal(const Vector& diag) { return SpdMatrix(Matrix(diag.asDiagonal())); }

void SpdMatrix::factorize() const {
  std::call_once(cache_->once, [this] {
    if (!entries_.allFinite()) {
      cache_->failed = true;
      return;
    }
    Eigen::LLT<Matrix> llt(entries_);
    if (llt.info() != Eigen::Success) {
      cache_->failed = true;
      return;
    }
    // LLT only signals failure on a non-positive pivot; a zero or NaN pivot
    // can still slip through, so check the diagonal explicitly.
    Matrix lower = llt.matrixL();
    for (Index i = 0; i < lower.rows(); ++i) {
      if (!(lower(i, i) > 0.0) || !std::isfinite(lower(i, i))) {
        cache_->failed = true;
        return;
      }
    }
    cache_->lower = std::move(lower);
    cache_->llt = std::move(llt);
  });
}

bool SpdMatrix::is_positive_definite() const {
  factorize();
  return !cache_->failed;
}

const Matrix& SpdMatrix::cholesky_factor() const {
  factorize();
  if (cache_->failed) throw LinalgError("not positive definite");
  return *cache_->lower;
}

Matrix SpdMatrix::solve(const Matrix& rhs) const {
  factorize();
  if (cache_->failed) throw LinalgError("not positive definite");
  if (rhs.rows() != dim()) throw LinalgError("SpdMatrix::solve: dimension mismatch");
  return cache_->llt->solve(rhs);
}

SpdMatrix SpdMatrix::shifted(double shift) const {
  Matrix m = entries_;
  m.diagonal().array() += shift;
  return SpdMatrix(m);
}

SpdMatrix SpdMatrix::scaled(double scale) const { return SpdMatrix(scale * entries_); }

SpdMatrix resolvent(const SpdMatrix& s, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("resolvent: lambda must be positive");
  const SpdMatrix shifted = s.shifted(lambda);
  return SpdMatrix(shifted.solve(Matrix::Identity(s.dim(), s.dim())));
}

Vector symmetric_eigenvalues(const SpdMatrix& s) {
  if (s.dim() == 0) return Vector(0);
  require_finite(s.matrix(), "symmetric_eigenvalues");
  Eigen::SelfAdjointEigenSolver<Matrix> solver(s.matrix(), Eigen::EigenvaluesOnly);
  if (solver.info() != Eigen::Success) throw LinalgError("eigendecomposition failed");
  return solver.eigenvalues();
}

double effective_dimension_from_eigenvalues(const Vector& eigenvalues, double lambda) {
  if (!(lambda > 0.0)) throw std::invalid_argument("effective_dimension: lambda must be positive");
  double total = 0.0;
  for (Index i = 0; i < eigenvalues.size(); ++i) {
    // Rounding can leave tiny negative eigenvalues on singular PSD inputs.
    const double sigma = std::max(eigenvalues(i), 0.0);
    total += sigma / (sigma + lambda);
  }
  return total;
}

double effective_dimension(const SpdMatrix& s, double lambda) {
  return effective_dimension_from_eigenvalues(symmetric_eigenvalues(s), lambda);
}

double spectral_norm(const Matrix& m) {
  require_finite(m, "spectral_norm");
  if (m.size() == 0) return 0.0;
  if (m.rows() == m.cols() && m == m.transpose()) {
    Eigen::SelfAdjointEigenSolver<Matrix> solver(m, Eigen::EigenvaluesOnly);
    if (solver.info() != Eigen::Success) throw LinalgError("eigendecomposition failed");
    return solver.eigenvalues().cwiseAbs().maxCoeff();
  }

  const Matrix gram = m.transpose() * m;
  const double scale = gram.diagonal().maxCoeff();
  if (scale == 0.0) return 0.0;
  Vector v = Vector::Ones(gram.cols()) / std::sqrt(static_cast<double>(gram.cols()));
  // Deterministic perturbation so the start vector is not orthogonal to the
  // top singular vector for structured inputs.
  for (Index i = 0; i < v.size(); ++i) v(i) += 1e-3 * std::sin(1.0 + static_cast<double>(i));
  v.normalize();
  double estimate = v.dot(gram * v);
  for (int iter = 0; iter < 20000; ++iter) {
    Vector w = gram * v;
    const double norm = w.norm();
    if (norm == 0.0) break;
    v = w / norm;
    const double next = v.dot(gram * v);
    if (std::abs(next - estimate) <= 1e-15 * std::abs(next)) {
      estimate = next;
      return std::sqrt(estimate);
    }
    estimate = next;
  }
  // Slow convergence (clustered top singular values): fall back to the
  // symmetric eigenproblem of the Gram matrix.
  Eigen::SelfAdjointEigenSolver<Matrix> solver(gram, Eigen::EigenvaluesOnly);
  return std::sqrt(std::max(solver.eigenvalues().maxCoeff(), 0.0));
}

double log_det_spd(const SpdMatrix& s) {
  const Matrix& lower = s.cholesky_factor();
  double total = 0.0;
  for (Index i = 0; i < lower.rows(); ++i) total += std::log(lower(i, i));
  return 2.0 * total;
}

Matrix gaussian_matrix(Index rows, Index cols, double scale, RngStream& stream) {
  Matrix out(rows, cols);
  for (Index j = 0; j < cols; ++j)
    for (Index i = 0; i < rows; ++i) out(i, j) = scale * stream.next_normal();
  return out;
}

void require_finite(const Matrix& m, const std::string& what) {
  if (!m.allFinite()) throw LinalgError(what + ": non-finite entries");
}

}  // namespace shrinkopt
