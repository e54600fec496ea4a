// Initialization stages: closed-form PPCA via truncated SVD, and seeded
// best-of-runs k-means++.

#include <cmath>

#include "doctest.h"
#include "edgeless/inference.hpp"
#include "test_helpers.hpp"

using namespace edgeless;

TEST_CASE("ppca reconstructs exact low-rank data") {
  // Rank-1 noiseless panel with zero column means, so centering is a no-op.
  const int t = 12, n = 6;
  VectorXd x(t), a(n);
  for (int r = 0; r < t; ++r) x[r] = (r % 2 == 0 ? 1.0 : -1.0) * (1.0 + r / 2);
  x.array() -= x.mean();
  for (int i = 0; i < n; ++i) a[i] = 0.5 + 0.3 * i;
  const MatrixXd panel = x * a.transpose();
  const Dataset data = Dataset::fully_observed_from(panel);

  const auto init = ppca_init(data, 1, 7);
  MatrixXd reconstruction(t, n);
  for (int r = 0; r < t; ++r)
    for (int i = 0; i < n; ++i)
      reconstruction(r, i) = init.q_factors[r].mean.dot(init.q_loadings[i].mean);
  const double rel = (reconstruction - panel).norm() / panel.norm();
  CHECK(rel < 1e-8);
}

TEST_CASE("ppca residual variance tracks isotropic noise") {
  Rng rng(81);
  const int t = 400, n = 20;
  const double sd = 0.7;
  MatrixXd noise(t, n);
  for (int r = 0; r < t; ++r)
    for (int i = 0; i < n; ++i) noise(r, i) = sd * rng.normal();
  const Dataset data = Dataset::fully_observed_from(noise);
  const auto init = ppca_init(data, 1, 8);
  double col_var = 0.0;
  for (int i = 0; i < n; ++i) {
    const double mean = noise.col(i).mean();
    col_var += (noise.col(i).array() - mean).square().sum() / t;
  }
  col_var /= n;
  CHECK(std::abs(init.residual_variance - col_var) < 0.1 * col_var);
}

TEST_CASE("duplicated series get identical loading rows") {
  Rng rng(82);
  MatrixXd values(30, 5);
  for (int r = 0; r < 30; ++r)
    for (int i = 0; i < 4; ++i) values(r, i) = rng.normal();
  values.col(4) = values.col(1);
  const Dataset data = Dataset::fully_observed_from(values);
  const auto init = ppca_init(data, 2, 9);
  CHECK((init.loading_means.row(4) - init.loading_means.row(1)).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("ppca rejects impossible dimensions") {
  const Dataset tall = testing::random_dataset(10, 3, 83);
  CHECK_THROWS_AS(ppca_init(tall, 4, 1), std::invalid_argument);
  // Exact rank-1 data cannot support p = 2.
  VectorXd x(8), a(4);
  for (int r = 0; r < 8; ++r) x[r] = r - 3.5;
  for (int i = 0; i < 4; ++i) a[i] = 1.0 + i;
  const Dataset flat = Dataset::fully_observed_from(x * a.transpose());
  CHECK_THROWS_AS(ppca_init(flat, 2, 1), std::invalid_argument);
}

TEST_CASE("ppca handles missing cells through mean imputation") {
  Dataset data = testing::random_dataset(40, 6, 84, 0.2);
  const auto init = ppca_init(data, 2, 10);
  CHECK(static_cast<int>(init.q_factors.size()) == 40);
  CHECK(init.residual_variance > 0.0);
  for (const auto& q : init.q_loadings) CHECK(q.mean.allFinite());
}

TEST_CASE("kmeans recovers well-separated clouds") {
  Rng rng(85);
  const int per = 15;
  MatrixXd points(2 * per, 2);
  std::vector<int> truth(2 * per);
  for (int i = 0; i < per; ++i) {
    points.row(i) << 5.0 + 0.1 * rng.normal(), 5.0 + 0.1 * rng.normal();
    truth[i] = 1;
    points.row(per + i) << -5.0 + 0.1 * rng.normal(), -5.0 + 0.1 * rng.normal();
    truth[per + i] = 2;
  }
  const auto result = kmeans(points, 2, 10, 42);
  // Either labeling of the bipartition is acceptable.
  bool direct = true, flipped = true;
  for (int i = 0; i < 2 * per; ++i) {
    direct = direct && (result.labels[i] + 1 == truth[i]);
    flipped = flipped && (2 - result.labels[i] == truth[i]);
  }
  CHECK((direct || flipped));
}

TEST_CASE("kmeans edge cases") {
  SUBCASE("identical points collapse to zero SSE") {
    const MatrixXd points = MatrixXd::Constant(10, 2, 3.0);
    const auto result = kmeans(points, 3, 5, 1);
    CHECK(result.sse == doctest::Approx(0.0));
  }
  SUBCASE("k equal to n gives zero SSE") {
    Rng rng(86);
    MatrixXd points(6, 2);
    for (int i = 0; i < 6; ++i) points.row(i) << rng.normal(), rng.normal();
    const auto result = kmeans(points, 6, 10, 2);
    CHECK(result.sse == doctest::Approx(0.0).epsilon(1e-12));
  }
  SUBCASE("k beyond n is rejected") {
    CHECK_THROWS_AS(kmeans(MatrixXd::Zero(3, 2), 4, 1, 3), std::invalid_argument);
  }
  SUBCASE("same seed reproduces labels") {
    Rng rng(87);
    MatrixXd points(20, 2);
    for (int i = 0; i < 20; ++i) points.row(i) << rng.normal(), rng.normal();
    const auto a = kmeans(points, 4, 10, 5);
    const auto b = kmeans(points, 4, 10, 5);
    CHECK(a.labels == b.labels);
    CHECK(a.sse == b.sse);
  }
}

TEST_CASE("random rotations are orthogonal and seed-stable") {
  Rng rng(88);
  for (int p : {1, 2, 4}) {
    const MatrixXd r = random_rotation(p, rng);
    CHECK((r * r.transpose() - MatrixXd::Identity(p, p)).cwiseAbs().maxCoeff() < 1e-12);
  }
  Rng a(3), b(3);
  CHECK((random_rotation(3, a) - random_rotation(3, b)).cwiseAbs().maxCoeff() == 0.0);
}
