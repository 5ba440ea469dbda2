#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "shrinkopt/linalg.hpp"
#include "shrinkopt/rng.hpp"

namespace shrinkopt {

class ParseError : public std::runtime_error {
 public:
  ParseError(const std::string& what, std::size_t line)
      : std::runtime_error("line " + std::to_string(line) + ": " + what), line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

struct DatasetMeta {
  std::string source;
  bool standardized = false;
  std::vector<Index> zero_variance_columns;
  std::optional<std::uint64_t> permutation_seed;
};

/// Dense feature rows with one label (class id or regression response) per row.
struct Dataset {
  Matrix features;
  Vector labels;
  DatasetMeta meta;

  Index rows() const { return features.rows(); }
  Index dim() const { return features.cols(); }
};

/// LIBSVM text: "label idx:val idx:val ...", 1-based strictly ascending indices,
/// missing entries zero, blank lines skipped, '#' rejected.
Dataset parse_libsvm(std::string_view text, std::string source = "<memory>");
Dataset load_libsvm(const std::string& path);
/// Writes nonzero entries with 17 significant digits.
std::string write_libsvm(const Dataset& ds);

/// Centers every column and scales by the population (1/n) standard deviation.
/// Zero-variance columns are centered only and listed in meta.
Dataset standardize(const Dataset& ds);

/// Sorted distinct label values.
std::vector<double> distinct_classes(const Vector& labels);
/// n x c indicator matrix, columns in sorted class order. Needs at least two classes.
Matrix one_hot(const Vector& labels);
/// Maps a two-class label vector to -1 / +1 (smaller class -> -1).
Vector to_sign_labels(const Vector& labels);

class CovarianceSpec {
 public:
  enum class Kind { IdentityScaled, RandomGram, PowerLaw };

  /// c I
  static CovarianceSpec identity_scaled(Index dim, double c);
  /// scale C^T C with C_ij ~ U(0, 1)
  static CovarianceSpec random_gram(Index dim, double scale);
  /// diag(1, 2^-p, 3^-p, ...)
  static CovarianceSpec power_law(Index dim, double exponent);

  Kind kind() const { return kind_; }
  Index dim() const { return dim_; }
  double parameter() const { return parameter_; }

  /// Draws C from `stream` for RandomGram; adds 1e-8 I if the result is not SPD.
  SpdMatrix materialize(RngStream& stream) const;

 private:
  CovarianceSpec(Kind kind, Index dim, double parameter) : kind_(kind), dim_(dim), parameter_(parameter) {}
  Kind kind_;
  Index dim_;
  double parameter_;
};

/// n rows i.i.d. Normal(0, sigma) as L z with L the Cholesky factor of sigma.
Matrix sample_gaussian_rows(Index n, const SpdMatrix& sigma, RngStream& stream);
Dataset synth_gaussian(Index n, const SpdMatrix& sigma, RngStream& stream);
Dataset synth_gaussian(Index n, const CovarianceSpec& spec, RngStream& stream);

/// Responses A w + noise, w ~ Normal(0, I/d), noise ~ Normal(0, noise_std^2).
Vector synth_linear_targets(const Matrix& features, double noise_std, RngStream& stream);

/// Deterministic Fisher-Yates permutation of 0..n-1.
std::vector<Index> random_permutation(Index n, RngStream& stream);

struct SplitDataset {
  Dataset data;  // permuted and truncated to agents * rows_per_agent rows
  Index agents = 0;
  Index rows_per_agent = 0;

  Matrix block_features(Index i) const { return data.features.middleRows(i * rows_per_agent, rows_per_agent); }
  Vector block_labels(Index i) const { return data.labels.segment(i * rows_per_agent, rows_per_agent); }
};

/// Random row permutation, truncation to m floor(n/m) rows, contiguous equal blocks.
SplitDataset permute_and_split(const Dataset& ds, Index agents, RngStream& stream);

}  // namespace shrinkopt
