#include "shrinkopt/harness.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <thread>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

namespace shrinkopt {

namespace pt = boost::property_tree;

namespace {

constexpr std::uint64_t kCovarianceTag = 0xFFFFFFFF00000001ULL;
constexpr std::uint64_t kDataTag = 0xFFFFFFFF00000002ULL;

const double kNaN = std::numeric_limits<double>::quiet_NaN();

std::string trim(const std::string& s) {
  const auto begin = s.find_first_not_of(" \t");
  if (begin == std::string::npos) return "";
  const auto end = s.find_last_not_of(" \t");
  return s.substr(begin, end - begin + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// Reads typed fields out of the ini tree and reports the first bad one by name.
class FieldReader {
 public:
  explicit FieldReader(const pt::ptree& tree) : tree_(tree) {
    for (const auto& [section, body] : tree_) {
      if (body.empty() && !body.data().empty())
        throw ConfigError(section + ": keys must appear inside a [section]");
    }
  }

  bool has(const std::string& section, const std::string& key) const {
    mark(section, key);
    const auto s = tree_.get_child_optional(pt::ptree::path_type(section, '\0'));
    return s && s->get_child_optional(pt::ptree::path_type(key, '\0'));
  }

  std::string text(const std::string& section, const std::string& key) const {
    mark(section, key);
    return tree_.get_child(pt::ptree::path_type(section, '\0'))
        .get<std::string>(pt::ptree::path_type(key, '\0'));
  }

  std::string text_or(const std::string& section, const std::string& key, const std::string& fallback) const {
    return has(section, key) ? text(section, key) : fallback;
  }

  std::string required(const std::string& section, const std::string& key) const {
    if (!has(section, key)) throw ConfigError(section + "." + key + ": required field is missing");
    return text(section, key);
  }

  double real(const std::string& section, const std::string& key, double fallback) const {
    if (!has(section, key)) return fallback;
    return parse_real(section, key, text(section, key));
  }

  template <typename Int>
  Int integer(const std::string& section, const std::string& key, Int fallback) const {
    if (!has(section, key)) return fallback;
    return parse_integer<Int>(section, key, text(section, key));
  }

  bool boolean(const std::string& section, const std::string& key, bool fallback) const {
    if (!has(section, key)) return fallback;
    const std::string v = text(section, key);
    if (v == "true" || v == "yes" || v == "1") return true;
    if (v == "false" || v == "no" || v == "0") return false;
    throw ConfigError(section + "." + key + ": expected true or false, got '" + v + "'");
  }

  static double parse_real(const std::string& section, const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size() || !std::isfinite(out))
      throw ConfigError(section + "." + key + ": expected a number, got '" + v + "'");
    return out;
  }

  template <typename Int>
  static Int parse_integer(const std::string& section, const std::string& key, const std::string& v) {
    Int out{};
    const auto r = std::from_chars(v.data(), v.data() + v.size(), out);
    if (v.empty() || r.ec != std::errc() || r.ptr != v.data() + v.size())
      throw ConfigError(section + "." + key + ": expected an integer, got '" + v + "'");
    return out;
  }

  /// Rejects keys nobody asked for, which are almost always typos.
  void reject_unknown() const {
    for (const auto& [section, body] : tree_)
      for (const auto& [key, value] : body)
        if (!known_.count(section + "." + key)) throw ConfigError(section + "." + key + ": unknown field");
  }

 private:
  const pt::ptree& tree_;
  mutable std::set<std::string> known_;

  void mark(const std::string& section, const std::string& key) const { known_.insert(section + "." + key); }
};

std::optional<CovarianceSpec::Kind> parse_covariance_kind(const std::string& s) {
  if (s == "identity_scaled") return CovarianceSpec::Kind::IdentityScaled;
  if (s == "random_gram") return CovarianceSpec::Kind::RandomGram;
  if (s == "power_law") return CovarianceSpec::Kind::PowerLaw;
  return std::nullopt;
}

}  // namespace

std::string experiment_name(ExperimentKind kind) {
  switch (kind) {
    case ExperimentKind::Resolvent: return "resolvent";
    case ExperimentKind::Newton: return "newton";
    case ExperimentKind::InexactNewton: return "inexact-newton";
    case ExperimentKind::Ihs: return "ihs";
  }
  return "unknown";
}

std::optional<ExperimentKind> parse_experiment_kind(const std::string& name) {
  for (auto k : {ExperimentKind::Resolvent, ExperimentKind::Newton, ExperimentKind::InexactNewton,
                 ExperimentKind::Ihs})
    if (experiment_name(k) == name) return k;
  return std::nullopt;
}

CovarianceSpec DataConfig::covariance_spec() const {
  switch (covariance) {
    case CovarianceSpec::Kind::IdentityScaled: return CovarianceSpec::identity_scaled(dim, covariance_parameter);
    case CovarianceSpec::Kind::RandomGram: return CovarianceSpec::random_gram(dim, covariance_parameter);
    case CovarianceSpec::Kind::PowerLaw: return CovarianceSpec::power_law(dim, covariance_parameter);
  }
  throw std::logic_error("unknown covariance kind");
}

// ------------------------------------------------------------------ config

ExperimentConfig parse_config(const std::string& text) {
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError("line " + std::to_string(e.line()) + ": " + e.message());
  }
  const FieldReader f(tree);
  ExperimentConfig c;

  const std::string kind = f.required("experiment", "kind");
  const auto experiment = parse_experiment_kind(kind);
  if (!experiment) throw ConfigError("experiment.kind: unknown experiment '" + kind + "'");
  c.experiment = *experiment;
  c.trials = f.integer<int>("experiment", "trials", 10);
  c.seed = f.integer<std::uint64_t>("experiment", "seed", 0);
  c.threads = f.integer<int>("experiment", "threads", 1);

  const std::string source = f.required("data", "source");
  if (source == "synthetic") {
    c.data.source = DataConfig::Source::Synthetic;
  } else if (source == "libsvm") {
    c.data.source = DataConfig::Source::Libsvm;
  } else {
    throw ConfigError("data.source: expected synthetic or libsvm, got '" + source + "'");
  }
  c.data.path = f.text_or("data", "path", "");
  c.data.standardize = f.boolean("data", "standardize", true);
  const std::string targets = f.text_or("data", "targets", "raw");
  if (targets == "raw") c.data.targets = DataConfig::Targets::Raw;
  else if (targets == "one-hot") c.data.targets = DataConfig::Targets::OneHot;
  else throw ConfigError("data.targets: expected raw or one-hot, got '" + targets + "'");
  c.data.rows = f.integer<Index>("data", "rows", 1000);
  c.data.dim = f.integer<Index>("data", "dim", 10);
  const std::string cov = f.text_or("data", "covariance", "identity_scaled");
  const auto cov_kind = parse_covariance_kind(cov);
  if (!cov_kind) throw ConfigError("data.covariance: unknown covariance '" + cov + "'");
  c.data.covariance = *cov_kind;
  c.data.covariance_parameter = f.real("data", "covariance_parameter", 1.0);
  c.data.noise = f.real("data", "noise", 1.0);

  const std::string loss = f.text_or("problem", "loss", "ridge");
  if (loss == "ridge") c.loss = LossKind::Ridge;
  else if (loss == "logistic") c.loss = LossKind::Logistic;
  else throw ConfigError("problem.loss: expected ridge or logistic, got '" + loss + "'");
  c.lambda = FieldReader::parse_real("problem", "lambda", f.required("problem", "lambda"));
  c.agents = f.integer<Index>("problem", "agents", 1);
  c.batches = f.integer<Index>("problem", "batches", 1);
  if (c.experiment == ExperimentKind::Ihs) c.agents = f.integer<Index>("sketch", "size", 4 * c.data.dim);
  c.refresh_sketch = f.boolean("sketch", "refresh", false);

  const std::string default_list = c.experiment == ExperimentKind::Ihs ? "plain, shrinkage-approx"
                                                                        : "shrinkage, average";
  c.estimators = split_list(f.text_or("estimators", "list", default_list));
  const std::string dl = f.text_or("estimators", "d_lambda",
                                   c.experiment == ExperimentKind::Resolvent ? "exact" : "local");
  if (dl == "local") {
    c.d_lambda = DLambdaSource::Kind::LocalEmpirical;
  } else if (dl == "exact") {
    c.d_lambda = DLambdaSource::Kind::Exact;
  } else {
    c.d_lambda = DLambdaSource::Kind::Fixed;
    c.d_lambda_value = FieldReader::parse_real("estimators", "d_lambda", dl);
  }
  const std::string mode = f.text_or("estimators", "determinantal_mode", "self-normalized");
  if (mode == "self-normalized") c.determinantal_mode = DeterminantalMode::SelfNormalized;
  else if (mode == "global-det") c.determinantal_mode = DeterminantalMode::GlobalDet;
  else throw ConfigError("estimators.determinantal_mode: expected self-normalized or global-det, got '" + mode + "'");

  if (f.has("sweep", "local_samples")) {
    for (const auto& item : split_list(f.text("sweep", "local_samples")))
      c.local_samples.push_back(FieldReader::parse_integer<Index>("sweep", "local_samples", item));
  } else {
    for (Index mult : {2, 4, 8, 16}) c.local_samples.push_back(mult * c.data.dim);
  }

  const double default_gap = c.experiment == ExperimentKind::Ihs ? 1e-8 : 1e-10;
  c.stopping.gap_tol = f.real("stopping", "gap_tol", default_gap);
  c.stopping.max_iterations = f.integer<int>("stopping", "max_iterations", 100);
  c.pcg.tol = f.real("pcg", "tol", 1e-10);
  c.pcg.t_max = f.integer<int>("pcg", "t_max", 200);
  c.line_search.enabled = f.boolean("line_search", "enabled", true);
  c.line_search.c1 = f.real("line_search", "c1", 1e-4);
  c.line_search.shrink = f.real("line_search", "shrink", 0.5);
  c.line_search.max_halvings = f.integer<int>("line_search", "max_halvings", 30);
  c.line_search.eta0 = f.real("line_search", "eta0", 1.0);
  c.out_csv = f.text_or("output", "csv", "");
  c.out_svg = f.text_or("output", "svg", "");

  f.reject_unknown();
  validate_config(c);
  return c;
}

ExperimentConfig load_config(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path);
  std::ostringstream buf;
  buf << in.rdbuf();
  ExperimentConfig c = parse_config(buf.str());
  // Dataset paths are relative to the config file.
  if (c.data.source == DataConfig::Source::Libsvm && !c.data.path.empty() &&
      std::filesystem::path(c.data.path).is_relative())
    c.data.path = (std::filesystem::path(path).parent_path() / c.data.path).lexically_normal().string();
  return c;
}

void validate_config(const ExperimentConfig& c) {
  if (c.trials < 1) throw ConfigError("experiment.trials: must be at least 1");
  if (c.threads < 1) throw ConfigError("experiment.threads: must be at least 1");
  if (!(c.lambda > 0.0)) throw ConfigError("problem.lambda: must be positive");
  if (c.agents < 1)
    throw ConfigError(c.experiment == ExperimentKind::Ihs ? "sketch.size: must be at least 1"
                                                          : "problem.agents: must be at least 1");
  if (c.batches < 1) throw ConfigError("problem.batches: must be at least 1");
  if (c.estimators.empty()) throw ConfigError("estimators.list: at least one estimator is required");
  if (c.data.source == DataConfig::Source::Libsvm && c.data.path.empty())
    throw ConfigError("data.path: required for libsvm data");
  if (c.data.source == DataConfig::Source::Synthetic) {
    if (c.data.dim < 1) throw ConfigError("data.dim: must be at least 1");
    if (c.experiment != ExperimentKind::Resolvent && c.data.rows < 1)
      throw ConfigError("data.rows: must be at least 1");
    try {
      (void)c.data.covariance_spec();
    } catch (const std::invalid_argument& e) {
      throw ConfigError(std::string("data.covariance_parameter: ") + e.what());
    }
    if (!(c.data.noise >= 0.0)) throw ConfigError("data.noise: must be nonnegative");
  }
  if (c.stopping.max_iterations < 0) throw ConfigError("stopping.max_iterations: must be nonnegative");
  if (!(c.stopping.gap_tol > 0.0)) throw ConfigError("stopping.gap_tol: must be positive");
  if (!(c.pcg.tol > 0.0)) throw ConfigError("pcg.tol: must be positive");
  if (c.pcg.t_max < 1) throw ConfigError("pcg.t_max: must be at least 1");
  if (!(c.line_search.c1 > 0.0 && c.line_search.c1 < 1.0)) throw ConfigError("line_search.c1: must lie in (0, 1)");
  if (!(c.line_search.shrink > 0.0 && c.line_search.shrink < 1.0))
    throw ConfigError("line_search.shrink: must lie in (0, 1)");
  if (c.line_search.max_halvings < 0) throw ConfigError("line_search.max_halvings: must be nonnegative");
  if (!(c.line_search.eta0 > 0.0)) throw ConfigError("line_search.eta0: must be positive");
  if (c.d_lambda == DLambdaSource::Kind::Fixed && !(c.d_lambda_value >= 0.0))
    throw ConfigError("estimators.d_lambda: must be local, exact or a nonnegative number");

  std::set<std::string> seen;
  for (const auto& name : c.estimators) {
    if (!seen.insert(name).second) throw ConfigError("estimators.list: duplicate entry '" + name + "'");
    switch (c.experiment) {
      case ExperimentKind::Ihs:
        if (!parse_ihs_variant(name))
          throw ConfigError("estimators.list: unknown IHS variant '" + name + "'");
        break;
      case ExperimentKind::Resolvent: {
        const auto kind = parse_estimator_kind(name);
        if (!kind || *kind == EstimatorKind::FirstAgent || *kind == EstimatorKind::Identity)
          throw ConfigError("estimators.list: '" + name + "' is not a resolvent estimator");
        break;
      }
      case ExperimentKind::Newton:
      case ExperimentKind::InexactNewton: {
        const auto kind = parse_estimator_kind(name);
        if (!kind) throw ConfigError("estimators.list: unknown estimator '" + name + "'");
        if (c.experiment == ExperimentKind::Newton &&
            (*kind == EstimatorKind::FirstAgent || *kind == EstimatorKind::Identity))
          throw ConfigError("estimators.list: '" + name + "' is only valid for inexact-newton");
        break;
      }
    }
  }

  if (c.determinantal_mode == DeterminantalMode::GlobalDet && c.experiment != ExperimentKind::Resolvent)
    throw ConfigError("estimators.determinantal_mode: global-det needs the population covariance (resolvent only)");

  switch (c.experiment) {
    case ExperimentKind::Resolvent:
      if (c.data.source != DataConfig::Source::Synthetic)
        throw ConfigError("data.source: resolvent experiments need synthetic data");
      if (c.d_lambda == DLambdaSource::Kind::LocalEmpirical)
        throw ConfigError("estimators.d_lambda: resolvent experiments take exact or a number");
      if (c.local_samples.empty()) throw ConfigError("sweep.local_samples: must not be empty");
      for (Index k : c.local_samples)
        if (k < 1) throw ConfigError("sweep.local_samples: entries must be positive");
      break;
    case ExperimentKind::Ihs:
      if (c.loss != LossKind::Ridge) throw ConfigError("problem.loss: IHS supports ridge only");
      break;
    default:
      if (c.loss == LossKind::Logistic && c.data.targets == DataConfig::Targets::OneHot)
        throw ConfigError("data.targets: one-hot targets need ridge loss");
      break;
  }
}

// --------------------------------------------------------- aggregation

double interpolate(const std::vector<double>& xs, const std::vector<double>& ys, double x) {
  if (xs.empty()) return kNaN;
  if (x <= xs.front()) return ys.front();
  if (x >= xs.back()) return ys.back();
  const auto it = std::lower_bound(xs.begin(), xs.end(), x);
  const auto hi = static_cast<std::size_t>(it - xs.begin());
  if (xs[hi] == x) return ys[hi];
  const std::size_t lo = hi - 1;
  const double t = (x - xs[lo]) / (xs[hi] - xs[lo]);
  return ys[lo] + t * (ys[hi] - ys[lo]);
}

double quantile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) return kNaN;
  const double pos = q * static_cast<double>(sorted.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, sorted.size() - 1);
  return sorted[lo] + (pos - static_cast<double>(lo)) * (sorted[hi] - sorted[lo]);
}

AggregatedSeries aggregate(const std::vector<TrialCurve>& curves, const std::vector<std::string>& estimators,
                           int trials, std::string x_label, std::string y_label) {
  AggregatedSeries out;
  out.x_label = std::move(x_label);
  out.y_label = std::move(y_label);
  out.estimators = estimators;
  std::set<double> grid;
  for (const auto& c : curves)
    if (!c.skipped) grid.insert(c.x.begin(), c.x.end());
  out.x.assign(grid.begin(), grid.end());

  for (double x : out.x) {
    for (const auto& name : estimators) {
      std::vector<double> values;
      for (const auto& c : curves) {
        if (c.estimator != name || c.skipped) continue;
        const double v = interpolate(c.x, c.y, x);
        if (std::isfinite(v)) values.push_back(v);
      }
      std::sort(values.begin(), values.end());
      SeriesRow row;
      row.x = x;
      row.estimator = name;
      row.skipped = trials - static_cast<int>(values.size());
      row.median = quantile_sorted(values, 0.5);
      row.q20 = quantile_sorted(values, 0.2);
      row.q80 = quantile_sorted(values, 0.8);
      out.rows.push_back(row);
    }
  }
  return out;
}

// ------------------------------------------------------------- execution

namespace {

struct PreparedData {
  std::optional<SpdMatrix> sigma;  // synthetic population covariance
  std::optional<Dataset> dataset;  // libsvm, standardized if requested
};

PreparedData prepare_data(const ExperimentConfig& c, const RngStream& root) {
  PreparedData out;
  if (c.data.source == DataConfig::Source::Synthetic) {
    RngStream cov_stream = root.derive(kCovarianceTag);
    out.sigma = c.data.covariance_spec().materialize(cov_stream);
  } else {
    Dataset ds = load_libsvm(c.data.path);
    if (c.data.standardize) ds = standardize(ds);
    out.dataset = std::move(ds);
  }
  return out;
}

Matrix regression_targets(const ExperimentConfig& c, const Vector& labels) {
  if (c.data.targets == DataConfig::Targets::OneHot) return one_hot(labels);
  return labels;
}

LossProblem make_problem(const ExperimentConfig& c, Matrix features, const Vector& labels) {
  if (c.loss == LossKind::Ridge) return RidgeProblem(std::move(features), regression_targets(c, labels), c.lambda);
  return LogisticProblem(std::move(features), to_sign_labels(labels), c.lambda);
}

/// Synthetic responses; logistic labels are the signs of the linear responses.
Dataset synthetic_dataset(const ExperimentConfig& c, const SpdMatrix& sigma, const RngStream& stream) {
  RngStream feature_stream = stream.derive(0);
  RngStream target_stream = stream.derive(1);
  Dataset ds;
  ds.features = sample_gaussian_rows(c.data.rows, sigma, feature_stream);
  ds.labels = synth_linear_targets(ds.features, c.data.noise, target_stream);
  if (c.loss == LossKind::Logistic) ds.labels = ds.labels.unaryExpr([](double v) { return v > 0.0 ? 1.0 : -1.0; });
  ds.meta.source = "synthetic";
  return ds;
}

bool is_skippable(const std::exception_ptr& e, std::string& reason) {
  try {
    std::rethrow_exception(e);
  } catch (const BudgetError& err) {
    reason = err.what();
  } catch (const InstabilityError& err) {
    reason = err.what();
  } catch (const LinalgError& err) {
    reason = err.what();
  } catch (const PcgBreakdown& err) {
    reason = err.what();
  } catch (...) {
    return false;
  }
  return true;
}

std::vector<TrialCurve> resolvent_trial(const ExperimentConfig& c, const PreparedData& data, int trial,
                                        const RngStream& root) {
  const SpdMatrix& sigma = *data.sigma;
  const SpdMatrix reference = resolvent(sigma, c.lambda);
  const double d_exact = c.d_lambda == DLambdaSource::Kind::Fixed ? c.d_lambda_value
                                                                  : effective_dimension(sigma, c.lambda);
  const RngStream trial_stream = root.derive(static_cast<std::uint64_t>(trial));

  std::vector<TrialCurve> curves(c.estimators.size());
  for (std::size_t e = 0; e < curves.size(); ++e) {
    curves[e].estimator = c.estimators[e];
    curves[e].trial = trial;
  }
  for (Index k : c.local_samples) {
    RngStream s = trial_stream.derive(static_cast<std::uint64_t>(k));
    const Matrix rows = sample_gaussian_rows(c.agents * k, sigma, s);
    std::vector<Matrix> blocks;
    blocks.reserve(static_cast<std::size_t>(c.agents));
    for (Index i = 0; i < c.agents; ++i) blocks.push_back(rows.middleRows(i * k, k));
    const LocalCovariances locals = LocalCovariances::from_data(blocks);
    for (std::size_t e = 0; e < curves.size(); ++e) {
      double err = kNaN;
      try {
        const EstimatorKind kind = *parse_estimator_kind(c.estimators[e]);
        std::optional<SpdMatrix> estimate;
        switch (kind) {
          case EstimatorKind::Average: estimate = estimate_resolvent_average(locals, c.lambda); break;
          case EstimatorKind::Shrinkage: estimate = estimate_resolvent_shrinkage(locals, c.lambda, d_exact); break;
          case EstimatorKind::SmallReg: estimate = estimate_resolvent_small_reg(locals, c.lambda); break;
          case EstimatorKind::Determinantal:
            estimate = estimate_resolvent_determinantal(locals, c.lambda, c.determinantal_mode, sigma);
            break;
          default: throw std::logic_error("not a resolvent estimator");
        }
        err = resolvent_relative_error(*estimate, reference);
      } catch (...) {
        std::string reason;
        if (!is_skippable(std::current_exception(), reason)) throw;
        if (curves[e].skip_reason.empty()) curves[e].skip_reason = reason;
      }
      curves[e].x.push_back(static_cast<double>(k));
      curves[e].y.push_back(err);
    }
  }
  return curves;
}

TrialCurve from_trajectory(const std::string& name, int trial, Trajectory traj, bool rounds_axis) {
  TrialCurve curve;
  curve.estimator = name;
  curve.trial = trial;
  for (const auto& r : traj.rounds) {
    curve.x.push_back(rounds_axis ? static_cast<double>(r.communication_rounds) : static_cast<double>(r.iteration));
    curve.y.push_back(r.log10_gap);
  }
  curve.trajectory = std::move(traj);
  return curve;
}

TrialCurve skipped_curve(const std::string& name, int trial, std::string reason) {
  TrialCurve curve;
  curve.estimator = name;
  curve.trial = trial;
  curve.skipped = true;
  curve.skip_reason = std::move(reason);
  return curve;
}

std::vector<TrialCurve> newton_trial(const ExperimentConfig& c, const PreparedData& data, int trial,
                                     const RngStream& root) {
  const RngStream trial_stream = root.derive(static_cast<std::uint64_t>(trial));
  Dataset ds;
  if (data.sigma) {
    ds = synthetic_dataset(c, *data.sigma, trial_stream);
  } else {
    RngStream perm = trial_stream.derive(0);
    ds = permute_and_split(*data.dataset, c.agents, perm).data;
  }
  const LossProblem problem = make_problem(c, ds.features, ds.labels);
  const ShardedProblem sharded(problem, c.agents, c.batches);

  double d_exact = c.d_lambda_value;
  if (c.d_lambda == DLambdaSource::Kind::Exact) {
    if (data.sigma) {
      d_exact = effective_dimension(*data.sigma, c.lambda);
    } else {
      const Matrix zero = Matrix::Zero(sharded.dim(), sharded.outputs());
      d_exact = local_effective_dimension(sharded.global(), zero, c.lambda);
    }
  }
  DLambdaSource source = DLambdaSource::local();
  if (c.d_lambda == DLambdaSource::Kind::Exact) source = DLambdaSource::exact(d_exact);
  if (c.d_lambda == DLambdaSource::Kind::Fixed) source = DLambdaSource::fixed(d_exact);

  std::vector<TrialCurve> curves;
  for (const auto& name : c.estimators) {
    EstimatorSpec spec{*parse_estimator_kind(name), source};
    try {
      Trajectory traj = c.experiment == ExperimentKind::Newton
                            ? run_newton(sharded, spec, c.stopping, c.line_search)
                            : run_inexact_newton(sharded, spec, c.pcg, c.stopping, c.line_search);
      curves.push_back(from_trajectory(name, trial, std::move(traj), true));
    } catch (...) {
      std::string reason;
      if (!is_skippable(std::current_exception(), reason)) throw;
      curves.push_back(skipped_curve(name, trial, reason));
    }
  }
  return curves;
}

struct IhsInstance {
  std::optional<RidgeProblem> ridge;
  ReferenceOptimum reference;
  double d_exact = 0.0;
};

IhsInstance prepare_ihs(const ExperimentConfig& c, const PreparedData& data, const RngStream& root) {
  IhsInstance inst;
  if (data.sigma) {
    const Dataset ds = synthetic_dataset(c, *data.sigma, root.derive(kDataTag));
    inst.ridge.emplace(ds.features, regression_targets(c, ds.labels), c.lambda);
  } else {
    inst.ridge.emplace(data.dataset->features, regression_targets(c, data.dataset->labels), c.lambda);
  }
  inst.reference = reference_optimum(LossProblem(*inst.ridge));
  inst.d_exact = c.d_lambda == DLambdaSource::Kind::Fixed ? c.d_lambda_value : data_effective_dimension(*inst.ridge);
  return inst;
}

std::vector<TrialCurve> ihs_trial(const ExperimentConfig& c, const IhsInstance& inst, int trial,
                                  const RngStream& root) {
  IhsOptions options;
  options.stopping = c.stopping;
  options.line_search = c.line_search;
  options.refresh_sketch = c.refresh_sketch;
  const RngStream trial_stream = root.derive(static_cast<std::uint64_t>(trial));
  std::vector<TrialCurve> curves;
  for (const auto& name : c.estimators) {
    try {
      // Every variant sees the same sketch within a trial.
      Trajectory traj = run_ihs_trial(*inst.ridge, inst.reference, c.agents, *parse_ihs_variant(name), options,
                                      inst.d_exact, trial_stream);
      curves.push_back(from_trajectory(name, trial, std::move(traj), false));
    } catch (...) {
      std::string reason;
      if (!is_skippable(std::current_exception(), reason)) throw;
      curves.push_back(skipped_curve(name, trial, reason));
    }
  }
  return curves;
}

template <typename Fn>
std::vector<std::vector<TrialCurve>> run_trials(int trials, int threads, Fn fn) {
  std::vector<std::vector<TrialCurve>> results(static_cast<std::size_t>(trials));
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(trials));
  std::atomic<int> next{0};
  auto work = [&] {
    for (int t = next++; t < trials; t = next++) {
      try {
        results[static_cast<std::size_t>(t)] = fn(t);
      } catch (...) {
        errors[static_cast<std::size_t>(t)] = std::current_exception();
      }
    }
  };
  const int pool = std::max(1, std::min(threads, trials));
  if (pool == 1) {
    work();
  } else {
    std::vector<std::thread> workers;
    for (int i = 0; i < pool; ++i) workers.emplace_back(work);
    for (auto& w : workers) w.join();
  }
  for (const auto& e : errors)
    if (e) std::rethrow_exception(e);
  return results;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentConfig& config) {
  validate_config(config);
  const RngStream root(config.seed, 0);
  const PreparedData data = prepare_data(config, root);

  std::vector<std::vector<TrialCurve>> per_trial;
  std::string x_label = "communication rounds";
  std::string y_label = "log10 optimality gap";
  switch (config.experiment) {
    case ExperimentKind::Resolvent:
      x_label = "local samples per agent";
      y_label = "relative spectral error";
      per_trial = run_trials(config.trials, config.threads,
                             [&](int t) { return resolvent_trial(config, data, t, root); });
      break;
    case ExperimentKind::Newton:
    case ExperimentKind::InexactNewton:
      per_trial = run_trials(config.trials, config.threads,
                             [&](int t) { return newton_trial(config, data, t, root); });
      break;
    case ExperimentKind::Ihs: {
      x_label = "iteration";
      const IhsInstance inst = prepare_ihs(config, data, root);
      per_trial = run_trials(config.trials, config.threads, [&](int t) { return ihs_trial(config, inst, t, root); });
      break;
    }
  }

  ExperimentResult out;
  for (std::size_t e = 0; e < config.estimators.size(); ++e)
    for (auto& trial : per_trial) out.curves.push_back(std::move(trial[e]));
  out.series = aggregate(out.curves, config.estimators, config.trials, x_label, y_label);
  return out;
}

// ---------------------------------------------------------------- output

namespace {

std::string number(double v) {
  if (std::isnan(v)) return "nan";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string short_number(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

std::string xml_escape(const std::string& s) {
  std::string out;
  for (char ch : s) {
    switch (ch) {
      case '&': out += "&amp;"; break;
      case '<': out += "&lt;"; break;
      case '>': out += "&gt;"; break;
      case '"': out += "&quot;"; break;
      default: out += ch;
    }
  }
  return out;
}

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path);
  out << content;
  if (!out) throw std::runtime_error("error writing " + path);
}

double parse_field(const std::string& field, std::size_t line) {
  if (field == "nan") return kNaN;
  double v = 0.0;
  const auto r = std::from_chars(field.data(), field.data() + field.size(), v);
  if (field.empty() || r.ec != std::errc() || r.ptr != field.data() + field.size())
    throw std::runtime_error("csv line " + std::to_string(line) + ": bad number '" + field + "'");
  return v;
}

}  // namespace

std::string format_csv(const AggregatedSeries& series) {
  std::string out = "x,estimator,median,q20,q80,skipped\n";
  for (const auto& r : series.rows) {
    out += number(r.x) + "," + r.estimator + "," + number(r.median) + "," + number(r.q20) + "," +
           number(r.q80) + "," + std::to_string(r.skipped) + "\n";
  }
  return out;
}

AggregatedSeries parse_csv(const std::string& text) {
  AggregatedSeries out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  if (!std::getline(in, line) || line != "x,estimator,median,q20,q80,skipped")
    throw std::runtime_error("csv: unexpected header");
  ++line_no;
  std::set<double> xs;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::stringstream ls(line);
    std::string field;
    while (std::getline(ls, field, ',')) fields.push_back(field);
    if (fields.size() != 6) throw std::runtime_error("csv line " + std::to_string(line_no) + ": expected 6 fields");
    SeriesRow r;
    r.x = parse_field(fields[0], line_no);
    r.estimator = fields[1];
    r.median = parse_field(fields[2], line_no);
    r.q20 = parse_field(fields[3], line_no);
    r.q80 = parse_field(fields[4], line_no);
    r.skipped = static_cast<int>(parse_field(fields[5], line_no));
    xs.insert(r.x);
    if (std::find(out.estimators.begin(), out.estimators.end(), r.estimator) == out.estimators.end())
      out.estimators.push_back(r.estimator);
    out.rows.push_back(r);
  }
  out.x.assign(xs.begin(), xs.end());
  return out;
}

std::string format_svg(const AggregatedSeries& series) {
  constexpr double width = 720, height = 480, left = 80, right = 180, top = 30, bottom = 60;
  const double plot_w = width - left - right, plot_h = height - top - bottom;
  static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

  double x_min = std::numeric_limits<double>::infinity(), x_max = -x_min;
  double y_min = x_min, y_max = -x_min;
  for (const auto& r : series.rows) {
    for (double v : {r.median, r.q20, r.q80}) {
      if (!std::isfinite(v)) continue;
      y_min = std::min(y_min, v);
      y_max = std::max(y_max, v);
    }
    x_min = std::min(x_min, r.x);
    x_max = std::max(x_max, r.x);
  }
  if (!std::isfinite(x_min)) x_min = 0, x_max = 1;
  if (!std::isfinite(y_min)) y_min = 0, y_max = 1;
  if (x_max == x_min) x_max = x_min + 1;
  if (y_max == y_min) y_max = y_min + 1;
  auto px = [&](double x) { return left + (x - x_min) / (x_max - x_min) * plot_w; };
  auto py = [&](double y) { return top + (y_max - y) / (y_max - y_min) * plot_h; };

  std::ostringstream svg;
  svg << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n"
      << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
      << "\" viewBox=\"0 0 " << width << " " << height << "\">\n"
      << "<rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height << "\" fill=\"white\"/>\n"
      << "<g stroke=\"black\" stroke-width=\"1\">\n"
      << "<line x1=\"" << left << "\" y1=\"" << top + plot_h << "\" x2=\"" << left + plot_w << "\" y2=\""
      << top + plot_h << "\"/>\n"
      << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + plot_h << "\"/>\n"
      << "</g>\n<g font-family=\"sans-serif\" font-size=\"11\">\n";
  for (int i = 0; i <= 4; ++i) {
    const double xv = x_min + (x_max - x_min) * i / 4.0;
    const double yv = y_min + (y_max - y_min) * i / 4.0;
    svg << "<text x=\"" << px(xv) << "\" y=\"" << top + plot_h + 16 << "\" text-anchor=\"middle\">"
        << short_number(xv) << "</text>\n"
        << "<text x=\"" << left - 6 << "\" y=\"" << py(yv) + 4 << "\" text-anchor=\"end\">" << short_number(yv)
        << "</text>\n";
  }
  svg << "<text x=\"" << left + plot_w / 2 << "\" y=\"" << height - 15 << "\" text-anchor=\"middle\">"
      << xml_escape(series.x_label) << "</text>\n"
      << "<text transform=\"translate(18," << top + plot_h / 2 << ") rotate(-90)\" text-anchor=\"middle\">"
      << xml_escape(series.y_label) << "</text>\n</g>\n";

  for (std::size_t e = 0; e < series.estimators.size(); ++e) {
    const std::string& name = series.estimators[e];
    const char* color = palette[e % (sizeof palette / sizeof *palette)];
    std::vector<const SeriesRow*> rows;
    for (const auto& r : series.rows)
      if (r.estimator == name && std::isfinite(r.median)) rows.push_back(&r);
    if (rows.size() > 1) {
      svg << "<polygon fill=\"" << color << "\" fill-opacity=\"0.15\" stroke=\"none\" points=\"";
      for (const auto* r : rows) svg << px(r->x) << "," << py(r->q80) << " ";
      for (auto it = rows.rbegin(); it != rows.rend(); ++it) svg << px((*it)->x) << "," << py((*it)->q20) << " ";
      svg << "\"/>\n";
    }
    svg << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" data-estimator=\""
        << xml_escape(name) << "\" points=\"";
    for (const auto* r : rows) svg << px(r->x) << "," << py(r->median) << " ";
    svg << "\"/>\n";
    const double ly = top + 10 + 20.0 * static_cast<double>(e);
    svg << "<line x1=\"" << left + plot_w + 15 << "\" y1=\"" << ly << "\" x2=\"" << left + plot_w + 40 << "\" y2=\""
        << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n"
        << "<text x=\"" << left + plot_w + 46 << "\" y=\"" << ly + 4
        << "\" font-family=\"sans-serif\" font-size=\"12\">" << xml_escape(name) << "</text>\n";
  }
  svg << "</svg>\n";
  return svg.str();
}

void emit_csv(const AggregatedSeries& series, const std::string& path) {
  if (series.rows.empty()) throw std::invalid_argument("emit_csv: empty series");
  write_file(path, format_csv(series));
}

void emit_svg(const AggregatedSeries& series, const std::string& path) {
  if (series.rows.empty()) throw std::invalid_argument("emit_svg: empty series");
  write_file(path, format_svg(series));
}

}  // namespace shrinkopt
