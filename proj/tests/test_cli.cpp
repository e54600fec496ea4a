// End-to-end runs of the command-line tool: generate -> fit -> evaluate ->
// impute -> sweep, exit codes, and byte-level reproducibility.

#include <cstdlib>
#include <filesystem>
#include <random>
#include <string>

#include "doctest.h"
#include "edgeless/io.hpp"

using namespace edgeless;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    std::random_device rd;
    path = fs::temp_directory_path() / ("edgeless_cli_" + std::to_string(rd()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

int run_cli(const std::string& args, const std::string& stderr_file = "/dev/null") {
  const std::string command =
      std::string(EDGELESS_CLI_PATH) + " " + args + " >/dev/null 2>" + stderr_file;
  const int status = std::system(command.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// A well-separated five-community layout so recovery is deterministic.
json pentagon_generator_json(std::uint64_t seed) {
  json means = json::array();
  for (int k = 0; k < 5; ++k) {
    const double angle = 2.0 * 3.14159265358979 * k / 5.0;
    means.push_back({2.0 * std::cos(angle), 2.0 * std::sin(angle)});
  }
  return json{{"n", 30},
              {"T", 60},
              {"p", 2},
              {"K", 5},
              {"community_layout", "explicit"},
              {"explicit_means", means},
              {"wishart_nu", 0.0},
              {"within_precision", 50.0},
              {"balanced_sizes", true},
              {"seed", seed}};
}

json fit_config_json(int k_max, double prior_precision, int restarts, std::uint64_t seed) {
  return json{{"hyperparameters",
               {{"p", 2}, {"k_max", k_max}, {"prior_precision", prior_precision}}},
              {"fit", {{"n_restarts", restarts}, {"seed", seed}}}};
}

}  // namespace

TEST_CASE("generate, fit, evaluate, impute round trip") {
  TempDir dir;
  write_file(dir.file("gen.json"), pentagon_generator_json(11).dump());
  REQUIRE(run_cli("generate --config " + dir.file("gen.json") + " --output-dir " +
                  dir.file("gen")) == 0);
  REQUIRE(fs::exists(dir.file("gen/data.csv")));
  REQUIRE(fs::exists(dir.file("gen/truth.json")));
  REQUIRE(fs::exists(dir.file("gen/manifest.json")));

  // Sidecar truth matches the in-memory generator.
  const auto config = generator_config_from_json(
      json::parse(read_file(dir.file("gen.json"))));
  const auto inst = generate(config);
  const json truth = json::parse(read_file(dir.file("gen/truth.json")));
  CHECK(truth.at("labels").get<std::vector<int>>() == inst.true_labels);

  write_file(dir.file("fit.json"), fit_config_json(8, 50.0, 4, 3).dump());
  REQUIRE(run_cli("fit --input " + dir.file("gen/data.csv") + " --config " +
                  dir.file("fit.json") + " --output-dir " + dir.file("fit")) == 0);
  REQUIRE(fs::exists(dir.file("fit/labels.csv")));
  REQUIRE(fs::exists(dir.file("fit/posterior.json")));
  REQUIRE(fs::exists(dir.file("fit/elbo_trace.csv")));

  // Exact recovery against the sidecar truth.
  REQUIRE(run_cli("evaluate --labels " + dir.file("fit/labels.csv") + " --truth " +
                  dir.file("gen/truth.json") + " --output " + dir.file("report.json")) == 0);
  const json report = json::parse(read_file(dir.file("report.json")));
  CHECK(report.at("nmi").get<double>() == doctest::Approx(1.0));
  CHECK(report.at("k_hat_error").get<int>() == 0);

  // Reruns are byte-identical on labels, posterior and trace.
  REQUIRE(run_cli("fit --input " + dir.file("gen/data.csv") + " --config " +
                  dir.file("fit.json") + " --output-dir " + dir.file("fit2")) == 0);
  CHECK(read_file(dir.file("fit/labels.csv")) == read_file(dir.file("fit2/labels.csv")));
  CHECK(read_file(dir.file("fit/posterior.json")) == read_file(dir.file("fit2/posterior.json")));
  CHECK(read_file(dir.file("fit/elbo_trace.csv")) == read_file(dir.file("fit2/elbo_trace.csv")));

  // Imputation over missing cells of a masked copy of the data.
  Dataset data = ingest(dir.file("gen/data.csv"));
  Dataset masked = mask_random(data, 0.1, 5);
  write_dataset_csv(masked, dir.file("masked.csv"));
  REQUIRE(run_cli("impute --input " + dir.file("masked.csv") + " --posterior " +
                  dir.file("fit/posterior.json") + " --output " + dir.file("imputed.csv")) == 0);
  const auto rows = read_csv_table(dir.file("imputed.csv"));
  CHECK(static_cast<std::int64_t>(rows.size()) - 1 ==
        data.observed_count() - masked.observed_count());
}

TEST_CASE("single-community fit labels everything one") {
  TempDir dir;
  write_file(dir.file("gen.json"), pentagon_generator_json(12).dump());
  REQUIRE(run_cli("generate --config " + dir.file("gen.json") + " --output-dir " +
                  dir.file("gen")) == 0);
  write_file(dir.file("fit.json"), fit_config_json(1, 1.0, 2, 1).dump());
  REQUIRE(run_cli("fit --input " + dir.file("gen/data.csv") + " --config " +
                  dir.file("fit.json") + " --output-dir " + dir.file("fit")) == 0);
  for (const auto& [series, label] : labels_from_csv(dir.file("fit/labels.csv")))
    CHECK(label == 1);
}

TEST_CASE("sweep emits one row per cell and marks the argmax") {
  TempDir dir;
  write_file(dir.file("gen.json"), pentagon_generator_json(13).dump());
  REQUIRE(run_cli("generate --config " + dir.file("gen.json") + " --output-dir " +
                  dir.file("gen")) == 0);
  json config = fit_config_json(8, 50.0, 3, 5);
  config["sweep"] = json{{"p_grid", {1, 2}},
                         {"w_inverse_grid", {10.0, 50.0}},
                         {"strategy", "joint"},
                         {"restarts", 3}};
  write_file(dir.file("sweep.json"), config.dump());
  REQUIRE(run_cli("sweep --input " + dir.file("gen/data.csv") + " --config " +
                  dir.file("sweep.json") + " --output-dir " + dir.file("sweep")) == 0);
  const auto rows = read_csv_table(dir.file("sweep/sweep.csv"));
  REQUIRE(rows.size() == 5);  // header + 4 cells
  int best_count = 0;
  double best_elbo = 0.0;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    if (rows[r].back() == "1") {
      ++best_count;
      best_elbo = std::stod(rows[r][4]);
    }
  }
  CHECK(best_count == 1);

  // The sweep table's ELBO for the winning cell equals the persisted
  // posterior's ELBO exactly: no recomputation drift.
  const json posterior = json::parse(read_file(dir.file("sweep/best_posterior.json")));
  CHECK(posterior.at("elbo").get<double>() == best_elbo);
  REQUIRE(fs::exists(dir.file("sweep/best_labels.csv")));
  REQUIRE(fs::exists(dir.file("sweep/best_elbo_trace.csv")));
}

TEST_CASE("holdout evaluation writes an rmse report") {
  TempDir dir;
  write_file(dir.file("gen.json"), pentagon_generator_json(14).dump());
  REQUIRE(run_cli("generate --config " + dir.file("gen.json") + " --output-dir " +
                  dir.file("gen")) == 0);
  write_file(dir.file("fit.json"), fit_config_json(6, 50.0, 3, 7).dump());
  REQUIRE(run_cli("evaluate --holdout --input " + dir.file("gen/data.csv") + " --config " +
                  dir.file("fit.json") + " --folds 5 --output " + dir.file("cv.json")) == 0);
  const json report = json::parse(read_file(dir.file("cv.json")));
  CHECK(report.at("rmse_loadings_prediction").get<double>() <
        report.at("rmse_global_mean_prediction").get<double>());
  CHECK(report.at("folds").size() == 5);
}

TEST_CASE("validation failures exit 2 with machine-readable errors") {
  TempDir dir;
  write_file(dir.file("bad.csv"), "t,a\n1,oops\n");
  write_file(dir.file("fit.json"), fit_config_json(2, 1.0, 2, 1).dump());
  CHECK(run_cli("fit --input " + dir.file("bad.csv") + " --config " + dir.file("fit.json") +
                " --output-dir " + dir.file("out"), dir.file("err1.json")) == 2);
  const json err = json::parse(read_file(dir.file("err1.json")));
  CHECK(err.contains("error"));

  // Config with a non-positive prior precision also fails validation.
  write_file(dir.file("zero.json"), fit_config_json(2, 1.0, 2, 1)
                                        .patch(json::parse(R"([{"op":"replace",
                                          "path":"/hyperparameters/prior_precision",
                                          "value":0.0}])"))
                                        .dump());
  write_file(dir.file("ok.csv"), "t,a,b\n1,1,2\n2,2,1\n3,1.5,0.5\n");
  CHECK(run_cli("fit --input " + dir.file("ok.csv") + " --config " + dir.file("zero.json") +
                " --output-dir " + dir.file("out2"), dir.file("err2.json")) == 2);

  // Missing required arguments exit 2 as well.
  CHECK(run_cli("fit --config " + dir.file("fit.json"), dir.file("err3.json")) == 2);
}


TEST_CASE("runtime failures exit 3") {
  TempDir dir;
  write_file(dir.file("data.csv"), "t,a,b\n1,1,2\n2,2,1\n3,1.5,0.5\n");
  write_file(dir.file("posterior.json"), "{}");
  CHECK(run_cli("impute --input " + dir.file("data.csv") + " --posterior " +
                dir.file("posterior.json") + " --output " + dir.file("x.csv"),
                dir.file("err.json")) == 3);
  const json err = json::parse(read_file(dir.file("err.json")));
  CHECK(err.at("error") == "runtime failure");
}
