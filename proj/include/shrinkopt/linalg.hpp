#pragma once

#include <Eigen/Dense>

#include <memory>
#include <mutex>
#include <optional>
#include <stdexcept>
#include <string>

#include "shrinkopt/rng.hpp"

namespace shrinkopt {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using Index = Eigen::Index;

/// Raised when a Cholesky factorization fails or an input is not finite.
class LinalgError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense symmetric positive (semi)definite matrix.
///
/// Construction symmetrizes the input as (M + M^T)/2, so entries(i,j) == entries(j,i)
/// holds exactly. The Cholesky factor is computed lazily, at most once, and shared
/// between copies; the value itself is immutable.
class SpdMatrix {
 public:
  SpdMatrix() : SpdMatrix(Matrix(0, 0)) {}
  explicit SpdMatrix(const Matrix& m);

  static SpdMatrix identity(Index dim, double scale = 1.0);
  static SpdMatrix diagonal(const Vector& diag);

  Index dim() const { return entries_.rows(); }
  const Matrix& matrix() const { return entries_; }
  double operator()(Index i, Index j) const { return entries_(i, j); }

  /// Lower-triangular Cholesky factor L with L L^T = entries.
  /// Throws LinalgError("not positive definite") on failure.
  const Matrix& cholesky_factor() const;
  bool is_positive_definite() const;

  Matrix solve(const Matrix& rhs) const;

  /// this + shift * I
  SpdMatrix shifted(double shift) const;
  /// scale * this
  SpdMatrix scaled(double scale) const;

 private:
  struct FactorCache {
    std::once_flag once;
    std::optional<Eigen::LLT<Matrix>> llt;
    std::optional<Matrix> lower;
    bool failed = false;
  };

  Matrix entries_;
  std::shared_ptr<FactorCache> cache_;

  void factorize() const;
};

/// (S + lambda I)^{-1} computed by a Cholesky solve against the identity.
SpdMatrix resolvent(const SpdMatrix& s, double lambda);

/// Ascending eigenvalues of a symmetric matrix.
Vector symmetric_eigenvalues(const SpdMatrix& s);

/// tr(S (S + lambda I)^{-1}) = sum_i sigma_i / (sigma_i + lambda).
double effective_dimension(const SpdMatrix& s, double lambda);
/// Same formula from precomputed eigenvalues.
double effective_dimension_from_eigenvalues(const Vector& eigenvalues, double lambda);

/// Largest singular value. Symmetric inputs use an eigendecomposition, others
/// use power iteration on M^T M.
double spectral_norm(const Matrix& m);

/// log det S = 2 sum_i log L_ii from the Cholesky factor.
double log_det_spd(const SpdMatrix& s);

/// rows x cols matrix of i.i.d. Normal(0, scale^2) draws, filled column-major.
Matrix gaussian_matrix(Index rows, Index cols, double scale, RngStream& stream);

/// Throws LinalgError when any entry is NaN or infinite.
void require_finite(const Matrix& m, const std::string& what);

}  // namespace shrinkopt
