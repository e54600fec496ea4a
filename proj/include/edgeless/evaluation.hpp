#pragma once

// Metrics and baselines: normalized mutual information, the PCA + k-means
// reference pipeline, posterior-based imputation, and the two-stage hold-out
// protocol for cross-validated imputation error.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "edgeless/inference.hpp"
#include "edgeless/model.hpp"
#include "edgeless/synthesis.hpp"

namespace edgeless {

struct FoldReport {
  int fold = 0;
  std::int64_t held_out_cells = 0;
  double rmse_loadings = 0.0;
  double rmse_community_mean = 0.0;
  double rmse_global_mean = 0.0;
};

struct EvaluationReport {
  double nmi = 0.0;
  int k_hat_error = 0;
  double rmse_loadings_prediction = 0.0;
  double rmse_community_mean_prediction = 0.0;
  double rmse_global_mean_prediction = 0.0;
  std::vector<FoldReport> folds;
};

namespace detail {
// Canonical relabeling (first occurrence order) so partitions can be
// compared as set partitions.
inline std::vector<int> canonical_partition(const std::vector<int>& labels) {
  std::map<int, int> remap;
  std::vector<int> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) {
    auto [it, inserted] = remap.emplace(labels[i], static_cast<int>(remap.size()));
    out[i] = it->second;
  }
  return out;
}
}  // namespace detail

// NMI(a, b) = I(a, b) / sqrt(H(a) H(b)) with natural logarithms. If either
// partition has zero entropy the value is 1 when the partitions are equal as
// set partitions and 0 otherwise.
inline double nmi(const std::vector<int>& labels_a, const std::vector<int>& labels_b) {
  if (labels_a.size() != labels_b.size())
    throw std::invalid_argument("nmi requires equal-length labelings");
  if (labels_a.empty()) throw std::invalid_argument("nmi requires at least one element");
  const double n = static_cast<double>(labels_a.size());

  std::map<std::pair<int, int>, double> joint;
  std::map<int, double> count_a, count_b;
  for (std::size_t i = 0; i < labels_a.size(); ++i) {
    joint[{labels_a[i], labels_b[i]}] += 1.0;
    count_a[labels_a[i]] += 1.0;
    count_b[labels_b[i]] += 1.0;
  }
  double h_a = 0.0, h_b = 0.0, mi = 0.0;
  for (const auto& [label, c] : count_a) h_a -= c / n * std::log(c / n);
  for (const auto& [label, c] : count_b) h_b -= c / n * std::log(c / n);
  for (const auto& [pair, c] : joint) {
    const double pij = c / n;
    mi += pij * std::log(pij * n * n / (count_a[pair.first] * count_b[pair.second]));
  }
  if (h_a <= 0.0 || h_b <= 0.0)
    return detail::canonical_partition(labels_a) == detail::canonical_partition(labels_b) ? 1.0
                                                                                          : 0.0;
  const double value = mi / std::sqrt(h_a * h_b);
  return std::min(std::max(value, 0.0), 1.0);
}

inline int k_hat_error(const FitResult& fit, const SyntheticInstance& truth) {
  return fit.k_hat - truth.true_k;
}

// Pearson correlation matrix of the series; requires full observation and
// non-constant series.
inline MatrixXd correlation_matrix(const Dataset& data) {
  if (!data.fully_observed())
    throw std::invalid_argument("correlation matrix requires a fully observed dataset");
  const int t = data.time_steps();
  const int n = data.series_count();
  MatrixXd standardized(t, n);
  for (int i = 0; i < n; ++i) {
    const double mean = data.values.col(i).mean();
    const double var = (data.values.col(i).array() - mean).square().sum() / t;
    if (!(var > 0.0)) {
      const std::string id =
          i < static_cast<int>(data.series_ids.size()) ? data.series_ids[i] : std::to_string(i + 1);
      throw std::invalid_argument("series " + id + " is constant; correlation undefined");
    }
    standardized.col(i) = (data.values.col(i).array() - mean) / std::sqrt(var);
  }
  MatrixXd corr = standardized.transpose() * standardized / static_cast<double>(t);
  return 0.5 * (corr + corr.transpose().eval());
}

// The point-estimate reference pipeline: embed each series by the leading
// eigenvectors of the correlation matrix, then cluster with k-means.
inline std::vector<int> pca_kmeans_baseline(const Dataset& data, int k, std::uint64_t seed,
                                            int n_components = 2, int kmeans_runs = 10) {
  const int n = data.series_count();
  if (k < 1 || k > n) throw std::invalid_argument("k must lie in [1, n]");
  if (n_components < 1 || n_components > n)
    throw std::invalid_argument("n_components must lie in [1, n]");
  const MatrixXd corr = correlation_matrix(data);
  Eigen::SelfAdjointEigenSolver<MatrixXd> eig(corr);
  if (eig.info() != Eigen::Success) throw std::runtime_error("eigendecomposition failed");
  // Eigenvalues come out ascending; take the top n_components.
  MatrixXd embedding(n, n_components);
  for (int c = 0; c < n_components; ++c) embedding.col(c) = eig.eigenvectors().col(n - 1 - c);
  auto result = kmeans(embedding, k, kmeans_runs, seed);
  std::vector<int> labels(result.labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) labels[i] = result.labels[i] + 1;
  return labels;
}

enum class ImputeMode { kLoadings, kCommunityMean };

// Posterior-predictive means for the requested cells: E[A_i]^T E[x_t] or,
// in community mode, E[mu_{g_i}]^T E[x_t] with g_i the extracted label.
inline VectorXd impute(const PosteriorState& state, const std::vector<std::pair<int, int>>& cells,
                       ImputeMode mode = ImputeMode::kLoadings) {
  const int t = static_cast<int>(state.q_factors.size());
  const int n = state.series_count();
  const auto labels = extract_labels(state);
  VectorXd out(static_cast<int>(cells.size()));
  for (std::size_t c = 0; c < cells.size(); ++c) {
    const auto [row, col] = cells[c];
    if (row < 0 || row >= t || col < 0 || col >= n)
      throw std::invalid_argument("impute cell index out of range");
    const VectorXd& factor = state.q_factors[row].mean;
    if (mode == ImputeMode::kLoadings) {
      out[c] = state.q_loadings[col].mean.dot(factor);
    } else {
      out[c] = state.q_centers[labels.labels[col] - 1].mean.dot(factor);
    }
  }
  return out;
}

struct HoldoutSpec {
  double train_fraction = 0.5;
  int folds = 10;
};

namespace detail {
// Restricted inference for held-out series: iterate only the loadings, noise
// and assignment updates against the frozen shared factors from stage 1.
inline PosteriorState infer_held_out(const Dataset& held, const PosteriorState& shared,
                                     const Hyperparameters& hyper) {
  const int n = held.series_count();
  const int p = hyper.p;
  PosteriorState s;
  s.q_factors = shared.q_factors;
  s.q_centers = shared.q_centers;
  s.q_spreads = shared.q_spreads;
  s.q_sizes = shared.q_sizes;
  s.q_ard = shared.q_ard;
  s.q_loadings.assign(n, MvNormalParams{VectorXd::Zero(p), MatrixXd::Identity(p, p)});
  s.q_noise.assign(n, GammaParams{1.0, 1.0});
  s.responsibilities = MatrixXd::Constant(n, shared.community_count(),
                                          1.0 / shared.community_count());

  CaviEngine engine(held, hyper);
  engine.set_state(std::move(s));
  FitConfig config;
  config.max_sweeps = 200;
  config.elbo_rel_tol = 1e-8;
  config.update_order = {"loadings", "noise", "assignments"};
  cavi_run(engine, config);
  return engine.take_state();
}
}  // namespace detail

// Two-stage cross-validated imputation: fit the full model on a random half
// of the series, then per fold mask a tenth of the remaining series' cells,
// infer their loadings and assignments against the frozen shared structure,
// and score the imputations.
inline EvaluationReport holdout_protocol(const Dataset& data, const Hyperparameters& hyper,
                                         const FitConfig& config, const HoldoutSpec& spec,
                                         std::uint64_t seed, int jobs = 0) {
  const int n = data.series_count();
  if (n < 4) throw std::invalid_argument("holdout protocol requires at least 4 series");
  if (spec.folds < 2) throw std::invalid_argument("holdout protocol requires at least 2 folds");
  if (!(spec.train_fraction > 0.0) || !(spec.train_fraction < 1.0))
    throw std::invalid_argument("train_fraction must lie in (0, 1)");

  Rng rng = Rng::derive(seed, 0x686f6c64ull);
  std::vector<int> order(n);
  for (int i = 0; i < n; ++i) order[i] = i;
  for (int i = n - 1; i > 0; --i) {
    const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
    std::swap(order[i], order[j]);
  }
  const int n_train = std::max(2, std::min(n - 2, static_cast<int>(std::lround(spec.train_fraction * n))));
  std::vector<int> train(order.begin(), order.begin() + n_train);
  std::vector<int> held(order.begin() + n_train, order.end());
  std::sort(train.begin(), train.end());
  std::sort(held.begin(), held.end());

  auto slice = [&](const std::vector<int>& cols) {
    Dataset out;
    out.values.resize(data.time_steps(), static_cast<int>(cols.size()));
    out.mask.resize(data.time_steps(), static_cast<int>(cols.size()));
    out.timestamps = data.timestamps;
    for (std::size_t j = 0; j < cols.size(); ++j) {
      out.values.col(j) = data.values.col(cols[j]);
      out.mask.col(j) = data.mask.col(cols[j]);
      out.series_ids.push_back(cols[j] < static_cast<int>(data.series_ids.size())
                                   ? data.series_ids[cols[j]]
                                   : std::to_string(cols[j] + 1));
    }
    return out;
  };

  const Dataset train_data = slice(train);
  const Dataset held_data = slice(held);

  FitConfig stage1 = config;
  stage1.seed = Rng::derive(seed, 0x73746167ull).next_u64();
  const FitResult stage1_fit = fit(train_data, hyper, stage1, jobs);

  // Partition the held-out series' observed cells into folds.
  std::vector<std::pair<int, int>> cells;
  for (int j = 0; j < held_data.series_count(); ++j)
    for (int t = 0; t < held_data.time_steps(); ++t)
      if (held_data.mask(t, j)) cells.emplace_back(t, j);
  Rng fold_rng = Rng::derive(seed, 0x666f6c64ull);
  for (std::size_t i = cells.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(fold_rng.below(i));
    std::swap(cells[i - 1], cells[j]);
  }

  EvaluationReport report;
  double sq_loadings = 0.0, sq_community = 0.0, sq_global = 0.0;
  std::int64_t total_cells = 0;

  for (int f = 0; f < spec.folds; ++f) {
    const std::size_t lo = f * cells.size() / spec.folds;
    const std::size_t hi = (f + 1) * cells.size() / spec.folds;
    Dataset fold_data = held_data;
    std::vector<std::pair<int, int>> fold_cells(cells.begin() + lo, cells.begin() + hi);
    for (const auto& [t, j] : fold_cells) {
      fold_data.mask(t, j) = false;
      fold_data.values(t, j) = std::numeric_limits<double>::quiet_NaN();
    }
    for (int j = 0; j < fold_data.series_count(); ++j)
      if (fold_data.observed_in_series(j) == 0)
        throw std::runtime_error("fold " + std::to_string(f) + " left series " +
                                 fold_data.series_ids[j] + " fully masked");

    const PosteriorState inferred = detail::infer_held_out(fold_data, stage1_fit.state, hyper);

    double visible_sum = 0.0;
    std::int64_t visible_count = 0;
    for (int j = 0; j < fold_data.series_count(); ++j)
      for (int t = 0; t < fold_data.time_steps(); ++t)
        if (fold_data.mask(t, j)) {
          visible_sum += fold_data.values(t, j);
          ++visible_count;
        }
    const double global_mean = visible_count > 0 ? visible_sum / visible_count : 0.0;

    const VectorXd pred_load = impute(inferred, fold_cells, ImputeMode::kLoadings);
    const VectorXd pred_comm = impute(inferred, fold_cells, ImputeMode::kCommunityMean);

    FoldReport fr;
    fr.fold = f;
    fr.held_out_cells = static_cast<std::int64_t>(fold_cells.size());
    double fold_load = 0.0, fold_comm = 0.0, fold_global = 0.0;
    for (std::size_t c = 0; c < fold_cells.size(); ++c) {
      const double truth = held_data.values(fold_cells[c].first, fold_cells[c].second);
      fold_load += (pred_load[c] - truth) * (pred_load[c] - truth);
      fold_comm += (pred_comm[c] - truth) * (pred_comm[c] - truth);
      fold_global += (global_mean - truth) * (global_mean - truth);
    }
    sq_loadings += fold_load;
    sq_community += fold_comm;
    sq_global += fold_global;
    total_cells += fr.held_out_cells;
    if (!fold_cells.empty()) {
      fr.rmse_loadings = std::sqrt(fold_load / fold_cells.size());
      fr.rmse_community_mean = std::sqrt(fold_comm / fold_cells.size());
      fr.rmse_global_mean = std::sqrt(fold_global / fold_cells.size());
    }
    report.folds.push_back(fr);
  }

  if (total_cells > 0) {
    report.rmse_loadings_prediction = std::sqrt(sq_loadings / total_cells);
    report.rmse_community_mean_prediction = std::sqrt(sq_community / total_cells);
    report.rmse_global_mean_prediction = std::sqrt(sq_global / total_cells);
  }
  return report;
}

}  // namespace edgeless
