#include <cmath>

#include "doctest.h"
#include "edgeless/model.hpp"
#include "edgeless/rng.hpp"
#include "test_helpers.hpp"

using namespace edgeless;

TEST_CASE("expected outer product of a gaussian factor") {
  {
    const MvNormalParams q{VectorXd::Zero(2), MatrixXd::Identity(2, 2)};
    CHECK((expected_outer(q) - MatrixXd::Identity(2, 2)).cwiseAbs().maxCoeff() < 1e-14);
  }
  {
    VectorXd mean(2);
    mean << 1.0, 2.0;
    const MvNormalParams q{mean, 4.0 * MatrixXd::Identity(2, 2)};
    MatrixXd expected(2, 2);
    expected << 1.25, 2.0, 2.0, 4.25;
    CHECK((expected_outer(q) - expected).cwiseAbs().maxCoeff() < 1e-12);
  }
}

TEST_CASE("expected outer matches a monte carlo average") {
  Rng maker(3);
  const auto q = testing::random_gaussian(3, maker);
  const MatrixXd analytic = expected_outer(q);
  const MatrixXd cov = spd_inverse(q.precision);
  const int count = 400'000;
  Rng rng(4);
  MatrixXd sum = MatrixXd::Zero(3, 3);
  for (int i = 0; i < count; ++i) {
    const VectorXd x = sample(q, rng);
    sum += x * x.transpose();
  }
  const MatrixXd mc = sum / count;
  for (int r = 0; r < 3; ++r) {
    for (int c = 0; c < 3; ++c) {
      // var(x_r x_c) = cov_rc^2 + cov_rr cov_cc + higher-order mean terms;
      // a generous 4-sigma band keeps the seed-fixed test deterministic.
      const double var_bound = 2.0 * (cov(r, c) * cov(r, c) + cov(r, r) * cov(c, c)) +
                               4.0 * (q.mean[r] * q.mean[r] * cov(c, c) +
                                      q.mean[c] * q.mean[c] * cov(r, r));
      CHECK(std::abs(mc(r, c) - analytic(r, c)) < 4.0 * std::sqrt(var_bound / count));
    }
  }
}

TEST_CASE("dataset and hyperparameter validation") {
  Hyperparameters hyper;
  hyper.p = 2;
  hyper.k_max = 10;
  hyper.prior_precision = 1.0;

  SUBCASE("clean panel passes") {
    const Dataset data = testing::random_dataset(100, 50, 1);
    const auto report = validate(data, hyper);
    CHECK(report.ok);
    CHECK(report.warnings.empty());
  }
  SUBCASE("fully masked series is rejected by name") {
    Dataset data = testing::random_dataset(10, 4, 2);
    data.series_ids = {"a", "b", "dead", "d"};
    for (int t = 0; t < data.time_steps(); ++t) data.mask(t, 2) = false;
    const auto report = validate(data, hyper);
    CHECK_FALSE(report.ok);
    REQUIRE(report.errors.size() == 1);
    CHECK(report.errors[0].find("dead") != std::string::npos);
  }
  SUBCASE("non-positive prior precision is rejected") {
    Hyperparameters bad = hyper;
    bad.prior_precision = 0.0;
    const auto report = validate(testing::random_dataset(10, 4, 3), bad);
    CHECK_FALSE(report.ok);
    REQUIRE(!report.errors.empty());
    CHECK(report.errors[0].find("prior precision must be positive") != std::string::npos);
  }
  SUBCASE("NaN in an observed cell is rejected") {
    Dataset data = testing::random_dataset(10, 4, 4);
    data.values(3, 1) = std::numeric_limits<double>::quiet_NaN();
    CHECK_FALSE(validate(data, hyper).ok);
  }
  SUBCASE("p beyond min(T, n) only warns") {
    Hyperparameters wide = hyper;
    wide.p = 6;
    wide.k_max = 2;
    const auto report = validate(testing::random_dataset(4, 5, 5), wide);
    CHECK(report.ok);
    CHECK(!report.warnings.empty());
  }
}

TEST_CASE("hyperparameters derive the wishart prior exactly") {
  Hyperparameters hyper;
  hyper.p = 3;
  hyper.prior_precision = 4.0;  // w = 1/4, W = 3/4 I
  CHECK(hyper.wishart_nu() == doctest::Approx(3.0));
  CHECK((hyper.wishart_scale() - 0.75 * MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() == 0.0);
  // E[Lambda] under the prior comes back as prior_precision * I.
  const auto moments = wishart_moments({hyper.wishart_nu(), hyper.wishart_scale()});
  CHECK((moments.mean - 4.0 * MatrixXd::Identity(3, 3)).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("state validation enforces the simplex") {
  PosteriorState s = testing::random_state(5, 4, 2, 3, 7);
  CHECK_NOTHROW(s.validate());
  s.responsibilities(1, 0) += 0.1;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
}

TEST_CASE("masked cells are zeroed without being read") {
  Dataset data = testing::random_dataset(6, 3, 9);
  data.mask(2, 1) = false;
  data.values(2, 1) = std::numeric_limits<double>::quiet_NaN();
  const MatrixXd z = data.zeroed_values();
  CHECK(z(2, 1) == 0.0);
  CHECK(z.allFinite());
  CHECK(data.observed_count() == 17);
  CHECK(data.observed_in_series(1) == 5);
}
