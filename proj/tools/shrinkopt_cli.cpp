// Command-line driver: shrinkopt <resolvent|newton|inexact-newton|ihs> --config FILE [options]

#include <cstdint>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "shrinkopt/harness.hpp"

namespace {

constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Options {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> trials;
  std::optional<int> threads;
  std::string out_csv;
  std::string out_svg;
};

int run(shrinkopt::ExperimentKind kind, const Options& opts) {
  using namespace shrinkopt;
  ExperimentConfig config;
  try {
    config = load_config(opts.config);
    if (config.experiment != kind)
      throw ConfigError("experiment.kind: config describes '" + experiment_name(config.experiment) +
                        "' but the '" + experiment_name(kind) + "' subcommand was used");
    if (opts.seed) config.seed = *opts.seed;
    if (opts.trials) config.trials = *opts.trials;
    if (opts.threads) config.threads = *opts.threads;
    if (!opts.out_csv.empty()) config.out_csv = opts.out_csv;
    if (!opts.out_svg.empty()) config.out_svg = opts.out_svg;
    validate_config(config);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  }

  try {
    const ExperimentResult result = run_experiment(config);
    for (const auto& curve : result.curves)
      if (curve.skipped)
        std::cerr << "skipped " << curve.estimator << " (trial " << curve.trial << "): " << curve.skip_reason << "\n";
    if (config.out_csv.empty()) {
      std::cout << format_csv(result.series);
    } else {
      emit_csv(result.series, config.out_csv);
    }
    if (!config.out_svg.empty()) emit_svg(result.series, config.out_svg);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kRuntimeError;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Shrinkage-debiased distributed second-order optimization experiments"};
  app.require_subcommand(1);

  Options opts;
  std::optional<shrinkopt::ExperimentKind> chosen;
  for (auto kind : {shrinkopt::ExperimentKind::Resolvent, shrinkopt::ExperimentKind::Newton,
                    shrinkopt::ExperimentKind::InexactNewton, shrinkopt::ExperimentKind::Ihs}) {
    auto* sub = app.add_subcommand(shrinkopt::experiment_name(kind), "Run a " + shrinkopt::experiment_name(kind) +
                                                                         " experiment");
    sub->add_option("--config", opts.config, "Experiment config file")->required();
    sub->add_option("--seed", opts.seed, "Override experiment.seed");
    sub->add_option("--trials", opts.trials, "Override experiment.trials");
    sub->add_option("--threads", opts.threads, "Worker threads for trials (results do not depend on it)");
    sub->add_option("--out-csv", opts.out_csv, "CSV output path (stdout when unset)");
    sub->add_option("--out-svg", opts.out_svg, "SVG output path");
    sub->callback([&chosen, kind] { chosen = kind; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kConfigError;
  }
  return run(*chosen, opts);
}
