// Command-line front end: seeded generation of synthetic panels, model
// fitting, empirical-Bayes grid sweeps, evaluation and imputation. All
// outputs are reproducible from (inputs, config, seed); wall-clock fields in
// the manifest are the only entries that vary between reruns.

#include <chrono>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "edgeless/edgeless.hpp"

namespace fs = std::filesystem;
using namespace edgeless;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitRuntime = 3;

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double lap() {
    const auto now = std::chrono::steady_clock::now();
    const double s = std::chrono::duration<double>(now - start_).count();
    start_ = now;
    return s;
  }

 private:
  std::chrono::steady_clock::time_point start_;
};

struct CommonArgs {
  std::string output_dir = ".";
  std::optional<std::uint64_t> seed;
  int jobs = 0;
  IngestOptions ingest;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool with_ingest) {
  cmd->add_option("--output-dir", args.output_dir, "Directory for result files");
  cmd->add_option("--seed", args.seed, "Seed override (defaults to the config seed)");
  cmd->add_option("--jobs", args.jobs,
                  "Worker threads (0 = LC_THREADS env var or hardware default)");
  if (with_ingest) {
    cmd->add_flag("--transpose", args.ingest.transpose,
                  "Treat CSV rows as series and columns as observations");
    cmd->add_flag("--log-returns", args.ingest.log_returns,
                  "Convert prices to logarithmic returns before fitting");
    cmd->add_flag("--standardize", args.ingest.standardize,
                  "Standardize each series over its observed cells");
  }
}

json load_json(const std::string& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(path + ": " + e.what());
  }
}

void write_manifest(const std::string& dir, const std::string& command, const json& config,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    std::uint64_t seed, const StageClock& clock) {
  write_file(dir + "/manifest.json",
             manifest_json(command, config, inputs, seed, clock).dump(2) + "\n");
}

json posterior_document(const Hyperparameters& hyper, const FitResult& result) {
  json j;
  j["hyperparameters"] = to_json(hyper);
  j["state"] = to_json(result.state);
  j["labels"] = result.labels;
  j["k_hat"] = result.k_hat;
  j["elbo"] = result.elbo();
  j["converged"] = result.converged;
  j["restart_index"] = result.restart_index;
  return j;
}

int cmd_generate(const std::string& config_path, CommonArgs& args) {
  Stopwatch clock_total;
  StageClock clock;
  const json config_json = load_json(config_path);
  GeneratorConfig config = generator_config_from_json(config_json);
  if (args.seed) config.seed = *args.seed;

  const SyntheticInstance inst = generate(config);
  clock.add("generate", clock_total.lap());

  fs::create_directories(args.output_dir);
  write_dataset_csv(inst.dataset, args.output_dir + "/data.csv");
  write_file(args.output_dir + "/truth.json", truth_to_json(inst, config).dump(2) + "\n");
  clock.add("write", clock_total.lap());
  write_manifest(args.output_dir, "generate", to_json(config),
                 {{config_path, digest_file(config_path)}}, config.seed, clock);
  std::cout << "generated " << inst.dataset.time_steps() << "x" << inst.dataset.series_count()
            << " panel with " << inst.true_k << " communities -> " << args.output_dir << "\n";
  return 0;
}

struct FitInputs {
  Dataset dataset;
  Hyperparameters hyper;
  FitConfig fit_config;
};

FitInputs load_fit_inputs(const std::string& input_path, const std::string& config_path,
                          const CommonArgs& args) {
  FitInputs in;
  const json config_json = load_json(config_path);
  in.hyper = hyperparameters_from_json(config_json.at("hyperparameters"));
  in.fit_config = config_json.contains("fit") ? fit_config_from_json(config_json.at("fit"))
                                              : FitConfig{};
  if (args.seed) in.fit_config.seed = *args.seed;
  in.dataset = ingest(input_path, args.ingest);
  return in;
}

int cmd_fit(const std::string& input_path, const std::string& config_path, CommonArgs& args) {
  Stopwatch clock_total;
  StageClock clock;
  FitInputs in = load_fit_inputs(input_path, config_path, args);
  clock.add("ingest", clock_total.lap());

  const auto report = validate(in.dataset, in.hyper);
  if (!report.ok) {
    json err = json{{"error", "validation failed"}, {"details", report.errors}};
    std::cerr << err.dump() << "\n";
    return kExitValidation;
  }
  for (const auto& w : report.warnings) std::cerr << "warning: " << w << "\n";

  const FitResult result = fit(in.dataset, in.hyper, in.fit_config, args.jobs);
  clock.add("fit", clock_total.lap());

  fs::create_directories(args.output_dir);
  write_file(args.output_dir + "/labels.csv",
             labels_to_csv(in.dataset.series_ids, result.labels));
  write_file(args.output_dir + "/posterior.json",
             posterior_document(in.hyper, result).dump() + "\n");
  write_file(args.output_dir + "/elbo_trace.csv", elbo_trace_to_csv(result.elbo_trace));
  clock.add("write", clock_total.lap());

  json config_snapshot{{"hyperparameters", to_json(in.hyper)}, {"fit", to_json(in.fit_config)}};
  write_manifest(args.output_dir, "fit", config_snapshot,
                 {{input_path, digest_file(input_path)}, {config_path, digest_file(config_path)}},
                 in.fit_config.seed, clock);
  std::cout << "fit converged=" << (result.converged ? "yes" : "no") << " elbo=" << result.elbo()
            << " k_hat=" << result.k_hat << " -> " << args.output_dir << "\n";
  return 0;
}

int cmd_sweep(const std::string& input_path, const std::string& config_path, CommonArgs& args) {
  Stopwatch clock_total;
  StageClock clock;
  FitInputs in = load_fit_inputs(input_path, config_path, args);
  const json config_json = load_json(config_path);
  if (!config_json.contains("sweep"))
    throw std::invalid_argument(config_path + ": missing \"sweep\" section");
  const json& sj = config_json.at("sweep");
  SweepSpec spec;
  spec.p_grid = sj.at("p_grid").get<std::vector<int>>();
  spec.w_inverse_grid = sj.at("w_inverse_grid").get<std::vector<double>>();
  spec.strategy = sweep_strategy_from_string(sj.value("strategy", "joint"));
  spec.restarts = sj.value("restarts", spec.restarts);
  spec.validate();
  clock.add("ingest", clock_total.lap());

  validate_or_throw(in.dataset, in.hyper);
  const SweepResult result = run_sweep(in.dataset, in.hyper, in.fit_config, spec, args.jobs);
  clock.add("sweep", clock_total.lap());

  fs::create_directories(args.output_dir);
  write_file(args.output_dir + "/sweep.csv", sweep_to_csv(result));
  if (result.best_fit) {
    const auto& best_cell = result.cells[result.best_cell];
    Hyperparameters best_hyper = in.hyper;
    best_hyper.p = best_cell.p;
    best_hyper.prior_precision = best_cell.w_inverse;
    write_file(args.output_dir + "/best_labels.csv",
               labels_to_csv(in.dataset.series_ids, result.best_fit->labels));
    write_file(args.output_dir + "/best_posterior.json",
               posterior_document(best_hyper, *result.best_fit).dump() + "\n");
    write_file(args.output_dir + "/best_elbo_trace.csv",
               elbo_trace_to_csv(result.best_fit->elbo_trace));
  }
  clock.add("write", clock_total.lap());

  json sweep_snapshot{{"p_grid", spec.p_grid},
                      {"w_inverse_grid", spec.w_inverse_grid},
                      {"strategy", to_string(spec.strategy)},
                      {"restarts", spec.restarts}};
  json config_snapshot{{"hyperparameters", to_json(in.hyper)},
                       {"fit", to_json(in.fit_config)},
                       {"sweep", std::move(sweep_snapshot)}};
  write_manifest(args.output_dir, "sweep", config_snapshot,
                 {{input_path, digest_file(input_path)}, {config_path, digest_file(config_path)}},
                 in.fit_config.seed, clock);
  const auto& best = result.cells.at(result.best_cell);
  std::cout << "sweep best: p=" << best.p << " w_inverse=" << best.w_inverse
            << " elbo=" << best.elbo << " k_hat=" << best.k_hat << " -> " << args.output_dir
            << "\n";
  return 0;
}

int cmd_evaluate_labels(const std::string& labels_path, const std::string& truth_path,
                        const std::string& output_path) {
  const auto fitted = labels_from_csv(labels_path);
  const json truth = load_json(truth_path);
  const std::vector<int> true_labels = truth.at("labels").get<std::vector<int>>();
  if (fitted.size() != true_labels.size())
    throw std::invalid_argument("label file and truth sidecar disagree on series count");
  std::vector<int> fitted_labels(fitted.size());
  for (std::size_t i = 0; i < fitted.size(); ++i) fitted_labels[i] = fitted[i].second;

  std::vector<bool> seen_label(fitted.size() + 2, false);
  int k_hat = 0;
  for (int label : fitted_labels)
    if (label >= 0 && label < static_cast<int>(seen_label.size()) && !seen_label[label]) {
      seen_label[label] = true;
      ++k_hat;
    }

  json report{{"nmi", nmi(true_labels, fitted_labels)},
              {"k_hat", k_hat},
              {"k_hat_error", k_hat - truth.at("K").get<int>()}};
  write_file(output_path, report.dump(2) + "\n");
  std::cout << "nmi=" << report["nmi"] << " k_hat_error=" << report["k_hat_error"] << " -> "
            << output_path << "\n";
  return 0;
}

int cmd_evaluate_holdout(const std::string& input_path, const std::string& config_path,
                         double train_fraction, int folds, const std::string& output_path,
                         CommonArgs& args) {
  FitInputs in = load_fit_inputs(input_path, config_path, args);
  validate_or_throw(in.dataset, in.hyper);
  HoldoutSpec spec;
  spec.train_fraction = train_fraction;
  spec.folds = folds;
  const EvaluationReport report =
      holdout_protocol(in.dataset, in.hyper, in.fit_config, spec, in.fit_config.seed, args.jobs);
  json j = to_json(report);
  j.erase("nmi");          // no ground-truth labels in the holdout protocol
  j.erase("k_hat_error");
  write_file(output_path, j.dump(2) + "\n");
  std::cout << "rmse loadings=" << report.rmse_loadings_prediction
            << " community=" << report.rmse_community_mean_prediction
            << " global=" << report.rmse_global_mean_prediction << " -> " << output_path << "\n";
  return 0;
}

int cmd_impute(const std::string& input_path, const std::string& posterior_path,
               const std::string& mode, const std::string& output_path, CommonArgs& args) {
  const Dataset data = ingest(input_path, args.ingest);
  const json doc = load_json(posterior_path);
  const PosteriorState state = posterior_state_from_json(doc.at("state"));
  if (state.series_count() != data.series_count() ||
      static_cast<int>(state.q_factors.size()) != data.time_steps())
    throw std::invalid_argument("posterior shape does not match the input dataset");

  std::vector<std::pair<int, int>> cells;
  for (int i = 0; i < data.series_count(); ++i)
    for (int t = 0; t < data.time_steps(); ++t)
      if (!data.mask(t, i)) cells.emplace_back(t, i);

  const ImputeMode impute_mode =
      mode == "community" ? ImputeMode::kCommunityMean : ImputeMode::kLoadings;
  const VectorXd values = impute(state, cells, impute_mode);

  std::string out = "timestamp,series_id,value\n";
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [t, i] = cells[c];
    out += (t < static_cast<int>(data.timestamps.size()) ? data.timestamps[t]
                                                         : std::to_string(t + 1)) +
           "," + data.series_ids[i] + "," + format_double(values[c]) + "\n";
  }
  write_file(output_path, out);
  std::cout << "imputed " << cells.size() << " cells -> " << output_path << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Community detection for interdependent signals without observed edges"};
  app.require_subcommand(1);

  CommonArgs gen_args, fit_args, sweep_args, eval_args, impute_args;
  std::string gen_config, fit_input, fit_config, sweep_input, sweep_config;
  std::string eval_labels, eval_truth, eval_input, eval_config, eval_output = "report.json";
  std::string impute_input, impute_posterior, impute_mode = "loadings",
              impute_output = "imputed.csv";
  bool eval_holdout = false;
  double train_fraction = 0.5;
  int folds = 10;

  auto* generate_cmd = app.add_subcommand("generate", "Generate a synthetic panel + truth sidecar");
  generate_cmd->add_option("--config", gen_config, "Generator config JSON")->required();
  add_common(generate_cmd, gen_args, false);

  auto* fit_cmd = app.add_subcommand("fit", "Fit the model to a CSV panel");
  fit_cmd->add_option("--input", fit_input, "Input CSV")->required();
  fit_cmd->add_option("--config", fit_config, "Config JSON (hyperparameters + fit)")->required();
  add_common(fit_cmd, fit_args, true);

  auto* sweep_cmd = app.add_subcommand("sweep", "Grid sweep over p and the prior precision");
  sweep_cmd->add_option("--input", sweep_input, "Input CSV")->required();
  sweep_cmd->add_option("--config", sweep_config, "Config JSON (hyperparameters + fit + sweep)")
      ->required();
  add_common(sweep_cmd, sweep_args, true);

  auto* eval_cmd = app.add_subcommand("evaluate", "Score labels against truth, or run holdout CV");
  eval_cmd->add_option("--labels", eval_labels, "Fitted labels CSV");
  eval_cmd->add_option("--truth", eval_truth, "Truth sidecar JSON");
  eval_cmd->add_flag("--holdout", eval_holdout, "Run the two-stage holdout protocol");
  eval_cmd->add_option("--input", eval_input, "Input CSV (holdout mode)");
  eval_cmd->add_option("--config", eval_config, "Config JSON (holdout mode)");
  eval_cmd->add_option("--train-fraction", train_fraction, "Stage-1 series fraction");
  eval_cmd->add_option("--folds", folds, "Cross-validation folds");
  eval_cmd->add_option("--output", eval_output, "Report JSON path");
  add_common(eval_cmd, eval_args, true);

  auto* impute_cmd = app.add_subcommand("impute", "Impute missing cells from a fitted posterior");
  impute_cmd->add_option("--input", impute_input, "Input CSV")->required();
  impute_cmd->add_option("--posterior", impute_posterior, "posterior.json from fit/sweep")
      ->required();
  impute_cmd->add_option("--mode", impute_mode, "loadings | community")
      ->check(CLI::IsMember({"loadings", "community"}));
  impute_cmd->add_option("--output", impute_output, "Output CSV path");
  add_common(impute_cmd, impute_args, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << json{{"error", "argument error"}, {"details", e.what()}}.dump() << "\n";
    return kExitValidation;
  }

  try {
    if (generate_cmd->parsed()) return cmd_generate(gen_config, gen_args);
    if (fit_cmd->parsed()) return cmd_fit(fit_input, fit_config, fit_args);
    if (sweep_cmd->parsed()) return cmd_sweep(sweep_input, sweep_config, sweep_args);
    if (eval_cmd->parsed()) {
      if (eval_holdout) {
        if (eval_input.empty() || eval_config.empty())
          throw std::invalid_argument("--holdout requires --input and --config");
        return cmd_evaluate_holdout(eval_input, eval_config, train_fraction, folds, eval_output,
                                    eval_args);
      }
      if (eval_labels.empty() || eval_truth.empty())
        throw std::invalid_argument("evaluate requires --labels and --truth (or --holdout)");
      return cmd_evaluate_labels(eval_labels, eval_truth, eval_output);
    }
    if (impute_cmd->parsed())
      return cmd_impute(impute_input, impute_posterior, impute_mode, impute_output, impute_args);
  } catch (const std::invalid_argument& e) {
    std::cerr << json{{"error", "validation error"}, {"details", e.what()}}.dump() << "\n";
    return kExitValidation;
  } catch (const std::domain_error& e) {
    std::cerr << json{{"error", "validation error"}, {"details", e.what()}}.dump() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "runtime failure"}, {"details", e.what()}}.dump() << "\n";
    return kExitRuntime;
  }
  return 0;
}
