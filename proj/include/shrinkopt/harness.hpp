#pragma once

#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "shrinkopt/data_io.hpp"
#include "shrinkopt/distributed.hpp"
#include "shrinkopt/estimators.hpp"
#include "shrinkopt/sketching.hpp"

namespace shrinkopt {

/// Invalid configuration; the message names the offending field as "section.key".
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ExperimentKind { Resolvent, Newton, InexactNewton, Ihs };

std::string experiment_name(ExperimentKind kind);
std::optional<ExperimentKind> parse_experiment_kind(const std::string& name);

enum class LossKind { Ridge, Logistic };

struct DataConfig {
  enum class Source { Synthetic, Libsvm };
  enum class Targets { Raw, OneHot };

  Source source = Source::Synthetic;
  std::string path;             // libsvm
  bool standardize = true;      // libsvm
  Targets targets = Targets::Raw;

  Index rows = 1000;            // synthetic
  Index dim = 10;
  CovarianceSpec::Kind covariance = CovarianceSpec::Kind::IdentityScaled;
  double covariance_parameter = 1.0;
  double noise = 1.0;

  CovarianceSpec covariance_spec() const;
};

struct ExperimentConfig {
  ExperimentKind experiment = ExperimentKind::Resolvent;
  DataConfig data;
  LossKind loss = LossKind::Ridge;
  double lambda = 0.0;
  /// Number of agents, or the sketch size for IHS.
  Index agents = 1;
  /// Fresh Hessian batches per shard (1 = use all local data every iteration).
  Index batches = 1;
  std::vector<std::string> estimators;
  DLambdaSource::Kind d_lambda = DLambdaSource::Kind::LocalEmpirical;
  double d_lambda_value = 0.0;
  DeterminantalMode determinantal_mode = DeterminantalMode::SelfNormalized;
  int trials = 10;
  std::uint64_t seed = 0;
  StoppingConfig stopping{};
  PcgConfig pcg{};
  LineSearchConfig line_search{};
  std::vector<Index> local_samples;  // resolvent sweep
  bool refresh_sketch = false;
  int threads = 1;
  std::string out_csv;
  std::string out_svg;
};

/// Sectioned key = value text. Required: experiment.kind, data.source, problem.lambda.
ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
/// Throws ConfigError on inconsistent fields.
void validate_config(const ExperimentConfig& config);

/// One (trial, estimator) curve. NaN y values mark points where the estimator was skipped.
struct TrialCurve {
  std::string estimator;
  int trial = 0;
  std::vector<double> x;
  std::vector<double> y;
  bool skipped = false;
  std::string skip_reason;
  Trajectory trajectory;  // empty for resolvent experiments
};

struct SeriesRow {
  double x = 0.0;
  std::string estimator;
  double median = 0.0;
  double q20 = 0.0;
  double q80 = 0.0;
  int skipped = 0;  // trials without a value at this x
};

struct AggregatedSeries {
  std::string x_label;
  std::string y_label;
  std::vector<std::string> estimators;
  std::vector<double> x;
  std::vector<SeriesRow> rows;  // ordered by x, then estimator order
};

struct ExperimentResult {
  AggregatedSeries series;
  std::vector<TrialCurve> curves;  // ordered by (estimator, trial)
};

ExperimentResult run_experiment(const ExperimentConfig& config);

/// Linear interpolation at x; holds the first/last value outside the curve.
double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x);
/// Linear-interpolated quantile of sorted finite values (q in [0, 1]).
double quantile_sorted(const std::vector<double>& sorted, double q);

AggregatedSeries aggregate(const std::vector<TrialCurve>& curves, const std::vector<std::string>& estimators,
                           int trials, std::string x_label, std::string y_label);

std::string format_csv(const AggregatedSeries& series);
AggregatedSeries parse_csv(const std::string& text);
std::string format_svg(const AggregatedSeries& series);

void emit_csv(const AggregatedSeries& series, const std::string& path);
void emit_svg(const AggregatedSeries& series, const std::string& path);

}  // namespace shrinkopt
