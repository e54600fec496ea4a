// CSV ingestion with preprocessing, deterministic writers, JSON config and
// posterior round trips, digests and manifests.

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>

#include "doctest.h"
#include "edgeless/io.hpp"
#include "test_helpers.hpp"

using namespace edgeless;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() /
           ("edgeless_io_" + std::to_string(Rng(std::random_device{}()).next_u64()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
  std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("csv ingestion") {
  TempDir dir;
  SUBCASE("log returns of an exponential price path are constant") {
    const double e1 = std::exp(1.0), e2 = std::exp(2.0);
    write_file(dir.file("prices.csv"),
               "date,acme\nd1,1\nd2," + format_double(e1) + "\nd3," + format_double(e2) + "\n");
    IngestOptions options;
    options.log_returns = true;
    const Dataset data = ingest(dir.file("prices.csv"), options);
    CHECK(data.time_steps() == 2);
    CHECK(data.values(0, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(data.values(1, 0) == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(data.timestamps == std::vector<std::string>{"d2", "d3"});
  }
  SUBCASE("a missing price masks both adjacent returns") {
    write_file(dir.file("gap.csv"), "date,a\nd1,1\nd2,\nd3,2\nd4,4\n");
    IngestOptions options;
    options.log_returns = true;
    const Dataset data = ingest(dir.file("gap.csv"), options);
    CHECK_FALSE(data.mask(0, 0));  // r(d1->d2)
    CHECK_FALSE(data.mask(1, 0));  // r(d2->d3)
    CHECK(data.mask(2, 0));
    CHECK(data.values(2, 0) == doctest::Approx(std::log(2.0)));
  }
  SUBCASE("standardization yields mean zero and unit std over observed cells") {
    write_file(dir.file("raw.csv"), "t,a,b\n1,3,10\n2,,12\n3,5,14\n4,7,16\n");
    IngestOptions options;
    options.standardize = true;
    const Dataset data = ingest(dir.file("raw.csv"), options);
    for (int i = 0; i < 2; ++i) {
      double sum = 0.0, sq = 0.0;
      int count = 0;
      for (int t = 0; t < data.time_steps(); ++t)
        if (data.mask(t, i)) {
          sum += data.values(t, i);
          sq += data.values(t, i) * data.values(t, i);
          ++count;
        }
      CHECK(std::abs(sum / count) < 1e-10);
      CHECK(std::abs(sq / count - 1.0) < 1e-10);
    }
    CHECK_FALSE(data.mask(1, 0));
  }
  SUBCASE("errors carry the offending cell") {
    write_file(dir.file("bad.csv"), "t,a\n1,oops\n");
    CHECK_THROWS_WITH_AS(ingest(dir.file("bad.csv")), doctest::Contains("oops"),
                         std::invalid_argument);
    write_file(dir.file("neg.csv"), "t,a\n1,2\n2,-1\n");
    IngestOptions lr;
    lr.log_returns = true;
    CHECK_THROWS_AS(ingest(dir.file("neg.csv"), lr), std::invalid_argument);
    write_file(dir.file("flat.csv"), "t,a\n1,2\n2,2\n");
    IngestOptions st;
    st.standardize = true;
    CHECK_THROWS_AS(ingest(dir.file("flat.csv"), st), std::invalid_argument);
  }
  SUBCASE("transpose swaps series and observations") {
    write_file(dir.file("wide.csv"), "city,jan,feb\nnyc,1,2\nsf,3,4\n");
    IngestOptions options;
    options.transpose = true;
    const Dataset data = ingest(dir.file("wide.csv"), options);
    CHECK(data.series_ids == std::vector<std::string>{"nyc", "sf"});
    CHECK(data.timestamps == std::vector<std::string>{"jan", "feb"});
    CHECK(data.values(0, 1) == doctest::Approx(3.0));
  }
}

TEST_CASE("dataset csv round trip is exact") {
  TempDir dir;
  Dataset data = testing::random_dataset(17, 5, 81, 0.2);
  data.values(3, 2) = 1.0 / 3.0;  // awkward decimal
  write_dataset_csv(data, dir.file("data.csv"));
  const Dataset back = ingest(dir.file("data.csv"));
  REQUIRE(back.time_steps() == data.time_steps());
  REQUIRE(back.series_count() == data.series_count());
  for (int i = 0; i < data.series_count(); ++i) {
    for (int t = 0; t < data.time_steps(); ++t) {
      CHECK(back.mask(t, i) == data.mask(t, i));
      if (data.mask(t, i)) CHECK(back.values(t, i) == data.values(t, i));
    }
  }
  // Writing again produces identical bytes.
  write_dataset_csv(back, dir.file("data2.csv"));
  CHECK(read_file(dir.file("data.csv")) == read_file(dir.file("data2.csv")));
}

TEST_CASE("config json round trips mirror field names") {
  Hyperparameters hyper;
  hyper.p = 3;
  hyper.k_max = 7;
  hyper.prior_precision = 12.5;
  const json hj = to_json(hyper);
  CHECK(hj.at("p") == 3);
  CHECK(hj.at("k_max") == 7);
  CHECK(hj.at("prior_precision") == 12.5);
  CHECK(hj.at("dirichlet_gamma") == 1e-3);
  const Hyperparameters hyper2 = hyperparameters_from_json(hj);
  CHECK(hyper2.p == hyper.p);
  CHECK(hyper2.prior_precision == hyper.prior_precision);

  FitConfig config;
  config.n_restarts = 17;
  config.seed = 99;
  const FitConfig config2 = fit_config_from_json(to_json(config));
  CHECK(config2.n_restarts == 17);
  CHECK(config2.seed == 99);
  CHECK(config2.update_order == config.update_order);

  GeneratorConfig gen;
  gen.n = 10;
  gen.T = 20;
  gen.K = 3;
  gen.community_layout = CommunityLayout::kSierpinski;
  gen.K = 9;
  gen.seed = 5;
  const GeneratorConfig gen2 = generator_config_from_json(to_json(gen));
  CHECK(gen2.community_layout == CommunityLayout::kSierpinski);
  CHECK(gen2.noise_shape == 100.0);
  CHECK(gen2.noise_rate == 10.0);

  CHECK_THROWS_AS(hyperparameters_from_json(json{{"p", 2}}), json::exception);
}

TEST_CASE("posterior state round trips bit-exactly") {
  const PosteriorState state = testing::random_state(6, 5, 2, 3, 83);
  const json j = to_json(state);
  const std::string dumped = j.dump();
  const PosteriorState back = posterior_state_from_json(json::parse(dumped));

  for (int t = 0; t < 6; ++t) {
    CHECK((back.q_factors[t].mean - state.q_factors[t].mean).cwiseAbs().maxCoeff() == 0.0);
    CHECK((back.q_factors[t].precision - state.q_factors[t].precision).cwiseAbs().maxCoeff() ==
          0.0);
  }
  for (int i = 0; i < 5; ++i) {
    CHECK(back.q_noise[i].shape == state.q_noise[i].shape);
    CHECK(back.q_noise[i].rate == state.q_noise[i].rate);
    CHECK((back.q_loadings[i].mean - state.q_loadings[i].mean).cwiseAbs().maxCoeff() == 0.0);
  }
  for (int k = 0; k < 3; ++k) {
    CHECK(back.q_spreads[k].shape == state.q_spreads[k].shape);
    CHECK((back.q_spreads[k].scale - state.q_spreads[k].scale).cwiseAbs().maxCoeff() == 0.0);
  }
  CHECK((back.responsibilities - state.responsibilities).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.q_sizes.concentration - state.q_sizes.concentration).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.q_ard.shape - state.q_ard.shape).cwiseAbs().maxCoeff() == 0.0);
  CHECK((back.q_ard.rate - state.q_ard.rate).cwiseAbs().maxCoeff() == 0.0);

  // Serialization is deterministic.
  CHECK(to_json(back).dump() == dumped);
}

TEST_CASE("labels, traces, digests and manifests") {
  TempDir dir;
  const std::string labels_csv = labels_to_csv({"a", "b", "c"}, {1, 2, 1});
  write_file(dir.file("labels.csv"), labels_csv);
  const auto labels = labels_from_csv(dir.file("labels.csv"));
  REQUIRE(labels.size() == 3);
  CHECK(labels[1].first == "b");
  CHECK(labels[1].second == 2);

  const std::string trace = elbo_trace_to_csv({-10.5, -9.25});
  CHECK(trace == "sweep,elbo\n1,-10.5\n2,-9.25\n");

  write_file(dir.file("blob.bin"), "some bytes");
  const std::string digest = digest_file(dir.file("blob.bin"));
  CHECK(digest.rfind("fnv1a64:", 0) == 0);
  CHECK(digest == digest_file(dir.file("blob.bin")));

  StageClock clock;
  clock.add("ingest", 0.25);
  clock.add("fit", 1.5);
  const json manifest = manifest_json("fit", json{{"p", 2}}, {{"data.csv", digest}}, 42, clock);
  CHECK(manifest.at("command") == "fit");
  CHECK(manifest.at("seed") == 42);
  CHECK(manifest.at("inputs").at("data.csv") == digest);
  CHECK(manifest.at("wall_clock_seconds").at("fit") == 1.5);
}

TEST_CASE("truth sidecar stores generator output faithfully") {
  GeneratorConfig config;
  config.n = 8;
  config.T = 6;
  config.p = 2;
  config.K = 3;
  config.seed = 84;
  const auto inst = generate(config);
  const json j = truth_to_json(inst, config);
  CHECK(j.at("labels").get<std::vector<int>>() == inst.true_labels);
  CHECK(j.at("K") == 3);
  const MatrixXd loadings = matrix_from_json(j.at("true_loadings"));
  CHECK((loadings - inst.true_loadings).cwiseAbs().maxCoeff() == 0.0);
  const GeneratorConfig back = generator_config_from_json(j.at("config"));
  CHECK(back.seed == config.seed);
  CHECK(back.n == config.n);
}
