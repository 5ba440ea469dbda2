#include "shrinkopt/estimators.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace shrinkopt {

ShrinkageCoefficient shrinkage_gamma(double d_lambda, double samples,
                                     const ShrinkageOptions& options) {
  if (!(d_lambda >= 0.0)) throw std::invalid_argument("shrinkage_gamma: negative effective dimension");
  if (!(samples > 0.0)) throw std::invalid_argument("shrinkage_gamma: samples must be positive");
  if (d_lambda >= samples) {
    if (options.gamma_max) return {*options.gamma_max, d_lambda, samples};
    throw BudgetError("effective dimension exceeds local sample budget (d_lambda=" +
                      std::to_string(d_lambda) + ", samples=" + std::to_string(samples) + ")");
  }
  double gamma = 1.0 / (1.0 - d_lambda / samples);
  if (options.gamma_max) gamma = std::min(gamma, *options.gamma_max);
  return {gamma, d_lambda, samples};
}

LocalCovariances::LocalCovariances(std::vector<SpdMatrix> blocks, Index samples_per_block)
    : blocks_(std::move(blocks)), samples_per_block_(samples_per_block) {
  if (blocks_.empty()) throw std::invalid_argument("LocalCovariances: need at least one agent");
  if (samples_per_block_ < 1) throw std::invalid_argument("LocalCovariances: empty blocks");
  dim_ = blocks_.front().dim();
  for (const auto& b : blocks_)
    if (b.dim() != dim_) throw std::invalid_argument("LocalCovariances: dimension mismatch");
}

LocalCovariances LocalCovariances::from_data(std::span<const Matrix> blocks) {
  if (blocks.empty()) throw std::invalid_argument("LocalCovariances: need at least one agent");
  const Index k = blocks.front().rows();
  std::vector<SpdMatrix> covs;
  covs.reserve(blocks.size());
  for (const auto& a : blocks) {
    if (a.rows() != k) throw std::invalid_argument("LocalCovariances: unequal block sizes");
    Matrix gram = Matrix::Zero(a.cols(), a.cols());
    gram.selfadjointView<Eigen::Lower>().rankUpdate(a.transpose(), 1.0 / static_cast<double>(k));
    gram.triangularView<Eigen::StrictlyUpper>() = gram.transpose();
    covs.emplace_back(gram);
  }
  return LocalCovariances(std::move(covs), k);
}

namespace {

SpdMatrix scaled_resolvent_mean(const LocalCovariances& locals, double scale, double lambda) {
  const Index d = locals.dim();
  Matrix sum = Matrix::Zero(d, d);
  for (const auto& block : locals.blocks())
    sum += resolvent(block.scaled(scale), lambda).matrix();
  return SpdMatrix(sum / static_cast<double>(locals.agents()));
}

}  // namespace

SpdMatrix estimate_resolvent_average(const LocalCovariances& locals, double lambda) {
  return scaled_resolvent_mean(locals, 1.0, lambda);
}

SpdMatrix estimate_resolvent_shrinkage(const LocalCovariances& locals, double lambda,
                                       double d_lambda, const ShrinkageOptions& options) {
  // m d_lambda / n < 1 is the same as d_lambda < n/m.
  const auto coef = shrinkage_gamma(d_lambda, static_cast<double>(locals.samples_per_block()), options);
  return scaled_resolvent_mean(locals, coef.gamma, lambda);
}

SpdMatrix estimate_resolvent_small_reg(const LocalCovariances& locals, double epsilon) {
  return estimate_resolvent_shrinkage(locals, epsilon, static_cast<double>(locals.dim()));
}

std::vector<double> log_domain_weights(std::span<const double> log_values) {
  if (log_values.empty()) return {};
  const double top = *std::max_element(log_values.begin(), log_values.end());
  if (!std::isfinite(top)) throw InstabilityError("determinantal weights: non-finite log-determinant");
  std::vector<double> w(log_values.size());
  double total = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) {
    w[i] = std::exp(log_values[i] - top);
    total += w[i];
  }
  for (auto& x : w) x /= total;
  return w;
}

SpdMatrix estimate_resolvent_determinantal(const LocalCovariances& locals, double lambda,
                                           DeterminantalMode mode,
                                           const std::optional<SpdMatrix>& reference) {
  const Index d = locals.dim();
  const auto m = static_cast<std::size_t>(locals.agents());
  std::vector<double> log_dets(m);
  std::vector<SpdMatrix> local_resolvents;
  local_resolvents.reserve(m);
  for (std::size_t i = 0; i < m; ++i) {
    const SpdMatrix shifted = locals.blocks()[i].shifted(lambda);
    log_dets[i] = log_det_spd(shifted);
    local_resolvents.emplace_back(shifted.solve(Matrix::Identity(d, d)));
  }

  const double top = *std::max_element(log_dets.begin(), log_dets.end());
  Matrix sum = Matrix::Zero(d, d);
  double weight_total = 0.0;
  for (std::size_t i = 0; i < m; ++i) {
    const double w = std::exp(log_dets[i] - top);
    sum += w * local_resolvents[i].matrix();
    weight_total += w;
  }

  if (mode == DeterminantalMode::SelfNormalized) return SpdMatrix(sum / weight_total);

  if (!reference) throw std::invalid_argument("global-det determinantal mode needs the reference covariance");
  if (reference->dim() != d) throw std::invalid_argument("reference covariance dimension mismatch");
  const double log_ref = log_det_spd(reference->shifted(lambda));
  const double factor = std::exp(top - log_ref - std::log(static_cast<double>(m)));
  if (!std::isfinite(factor) || factor == 0.0)
    throw InstabilityError("global-det normalization out of floating-point range");
  return SpdMatrix(factor * sum);
}

double resolvent_relative_error(const SpdMatrix& estimate, const SpdMatrix& reference) {
  if (estimate.dim() != reference.dim())
    throw std::invalid_argument("resolvent_relative_error: dimension mismatch");
  const double ref_norm = spectral_norm(reference.matrix());
  if (ref_norm == 0.0) throw std::invalid_argument("resolvent_relative_error: zero reference");
  return spectral_norm(estimate.matrix() - reference.matrix()) / ref_norm;
}

}  // namespace shrinkopt
