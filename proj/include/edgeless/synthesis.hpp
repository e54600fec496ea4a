#pragma once

// Seeded generators for the synthetic experiments: Gaussian community
// layouts, the two-level triad-of-triads layout used for multiscale sweeps,
// separation-controlled instances, and random hold-out masking.

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "edgeless/distributions.hpp"
#include "edgeless/model.hpp"

namespace edgeless {

enum class CommunityLayout { kGaussianMeans, kSierpinski, kExplicit };

inline std::string to_string(CommunityLayout layout) {
  switch (layout) {
    case CommunityLayout::kGaussianMeans: return "gaussian_means";
    case CommunityLayout::kSierpinski: return "sierpinski";
    case CommunityLayout::kExplicit: return "explicit";
  }
  return "gaussian_means";
}

inline CommunityLayout community_layout_from_string(const std::string& s) {
  if (s == "gaussian_means") return CommunityLayout::kGaussianMeans;
  if (s == "sierpinski") return CommunityLayout::kSierpinski;
  if (s == "explicit") return CommunityLayout::kExplicit;
  throw std::invalid_argument("unknown community layout: " + s);
}

struct GeneratorConfig {
  int n = 50;
  int T = 100;
  int p = 2;
  int K = 5;
  CommunityLayout community_layout = CommunityLayout::kGaussianMeans;
  double mean_variance = 1.0;     // var[mu] per axis for the Gaussian layout
  double wishart_nu = 0.0;        // > 0 draws Lambda_k ~ Wishart; 0 fixes it
  double within_precision = 1.0;  // E[Lambda] = within_precision * I
  double noise_shape = 100.0;     // tau_i ~ Gamma(shape, rate)
  double noise_rate = 10.0;
  VectorXd size_distribution;     // empty = uniform
  bool balanced_sizes = false;    // deterministic near-equal community sizes
  MatrixXd explicit_means;        // K x p, for the explicit layout
  double sierpinski_scale = 1.0;
  std::uint64_t seed = 0;

  void validate() const {
    if (n < 1 || T < 1 || p < 1 || K < 1) throw std::invalid_argument("n, T, p, K must be >= 1");
    if (n < K) throw std::invalid_argument("n must be >= K");
    if (!(mean_variance > 0.0) && community_layout == CommunityLayout::kGaussianMeans)
      throw std::invalid_argument("mean_variance must be positive");
    if (!(within_precision > 0.0)) throw std::invalid_argument("within_precision must be positive");
    if (wishart_nu != 0.0 && !(wishart_nu > p - 1))
      throw std::invalid_argument("wishart_nu must exceed p - 1 (or be 0 for a fixed precision)");
    if (!(noise_shape > 0.0) || !(noise_rate > 0.0))
      throw std::invalid_argument("noise gamma parameters must be positive");
    if (size_distribution.size() > 0) {
      if (size_distribution.size() != K || !(size_distribution.minCoeff() > 0.0) ||
          std::abs(size_distribution.sum() - 1.0) > 1e-9)
        throw std::invalid_argument("size_distribution must be a length-K probability vector");
    }
    if (!(sierpinski_scale > 0.0)) throw std::invalid_argument("sierpinski_scale must be positive");
    if (community_layout == CommunityLayout::kSierpinski) {
      if (p != 2) throw std::invalid_argument("sierpinski layout requires p = 2");
      if (K != 9) throw std::invalid_argument("sierpinski layout fixes K = 9");
    }
    if (community_layout == CommunityLayout::kExplicit) {
      if (explicit_means.rows() != K || explicit_means.cols() != p)
        throw std::invalid_argument("explicit_means must be K x p");
    }
  }
};

struct SyntheticInstance {
  Dataset dataset;
  std::vector<int> true_labels;  // 1-based, in 1..K
  MatrixXd true_loadings;        // n x p
  MatrixXd true_centers;         // K x p
  std::vector<MatrixXd> true_precisions;
  MatrixXd true_factors;  // T x p
  VectorXd true_noise_precision;
  int true_k = 0;
};

// Nine community centers arranged as three triads of three: the triad
// centers form an equilateral triangle and each triad repeats the same
// triangle at one third of the size.
inline MatrixXd sierpinski_layout(int levels, double scale) {
  if (levels != 2) throw std::invalid_argument("only the two-level layout is supported");
  if (!(scale > 0.0)) throw std::invalid_argument("scale must be positive");
  MatrixXd vertices(3, 2);
  for (int j = 0; j < 3; ++j) {
    const double angle = 1.5707963267948966 + j * 2.0943951023931953;  // 90, 210, 330 degrees
    vertices(j, 0) = scale * std::cos(angle);
    vertices(j, 1) = scale * std::sin(angle);
  }
  MatrixXd means(9, 2);
  for (int j = 0; j < 3; ++j)
    for (int l = 0; l < 3; ++l) means.row(3 * j + l) = vertices.row(j) + vertices.row(l) / 3.0;
  return means;
}

inline SyntheticInstance generate(const GeneratorConfig& config) {
  config.validate();
  Rng rng(config.seed);

  SyntheticInstance inst;
  inst.true_k = config.K;

  // Community centers.
  switch (config.community_layout) {
    case CommunityLayout::kGaussianMeans: {
      inst.true_centers.resize(config.K, config.p);
      const double sd = std::sqrt(config.mean_variance);
      for (int k = 0; k < config.K; ++k)
        for (int q = 0; q < config.p; ++q) inst.true_centers(k, q) = sd * rng.normal();
      break;
    }
    case CommunityLayout::kSierpinski:
      inst.true_centers = sierpinski_layout(2, config.sierpinski_scale);
      break;
    case CommunityLayout::kExplicit:
      inst.true_centers = config.explicit_means;
      break;
  }

  // Community precisions: Wishart draws with mean within_precision * I, or
  // the fixed matrix itself.
  inst.true_precisions.reserve(config.K);
  if (config.wishart_nu > 0.0) {
    WishartParams prior{config.wishart_nu,
                        (config.wishart_nu / config.within_precision) *
                            MatrixXd::Identity(config.p, config.p)};
    for (int k = 0; k < config.K; ++k) inst.true_precisions.push_back(sample(prior, rng));
  } else {
    for (int k = 0; k < config.K; ++k)
      inst.true_precisions.push_back(config.within_precision *
                                     MatrixXd::Identity(config.p, config.p));
  }

  // Labels.
  inst.true_labels.resize(config.n);
  if (config.balanced_sizes) {
    for (int i = 0; i < config.n; ++i) inst.true_labels[i] = 1 + i % config.K;
    // Seeded shuffle so the label order carries no structure.
    for (int i = config.n - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.below(static_cast<std::uint64_t>(i + 1)));
      std::swap(inst.true_labels[i], inst.true_labels[j]);
    }
  } else {
    VectorXd sizes = config.size_distribution.size() > 0
                         ? config.size_distribution
                         : VectorXd::Constant(config.K, 1.0 / config.K);
    for (int i = 0; i < config.n; ++i) {
      double x = rng.uniform();
      int k = config.K - 1;
      for (int j = 0; j < config.K; ++j) {
        x -= sizes[j];
        if (x < 0.0) {
          k = j;
          break;
        }
      }
      inst.true_labels[i] = k + 1;
    }
  }

  // Loadings, factors, noise.
  std::vector<Eigen::LLT<MatrixXd>> prec_chol;
  prec_chol.reserve(config.K);
  for (int k = 0; k < config.K; ++k)
    prec_chol.push_back(chol_spd(inst.true_precisions[k], "community precision"));
  inst.true_loadings.resize(config.n, config.p);
  for (int i = 0; i < config.n; ++i) {
    const int g = inst.true_labels[i] - 1;
    VectorXd z(config.p);
    for (int q = 0; q < config.p; ++q) z[q] = rng.normal();
    inst.true_loadings.row(i) =
        (inst.true_centers.row(g).transpose() + prec_chol[g].matrixU().solve(z)).transpose();
  }
  inst.true_factors.resize(config.T, config.p);
  for (int t = 0; t < config.T; ++t)
    for (int q = 0; q < config.p; ++q) inst.true_factors(t, q) = rng.normal();
  inst.true_noise_precision.resize(config.n);
  const GammaParams noise_prior{config.noise_shape, config.noise_rate};
  for (int i = 0; i < config.n; ++i) inst.true_noise_precision[i] = sample(noise_prior, rng);

  MatrixXd values = inst.true_factors * inst.true_loadings.transpose();
  for (int i = 0; i < config.n; ++i) {
    const double sd = 1.0 / std::sqrt(inst.true_noise_precision[i]);
    for (int t = 0; t < config.T; ++t) values(t, i) += sd * rng.normal();
  }
  inst.dataset = Dataset::fully_observed_from(std::move(values));
  inst.dataset.timestamps.resize(config.T);
  for (int t = 0; t < config.T; ++t) inst.dataset.timestamps[t] = "t" + std::to_string(t + 1);
  return inst;
}

// Community separation h = sqrt(E[Lambda] var[mu]) of the generative model;
// only defined for the isotropic Gaussian layout.
inline double separation(const GeneratorConfig& config) {
  config.validate();
  if (config.community_layout != CommunityLayout::kGaussianMeans)
    throw std::invalid_argument(
        "separation is defined for the isotropic gaussian_means layout; "
        "report per-axis scales for other layouts");
  return std::sqrt(config.within_precision * config.mean_variance);
}

// Masks exactly floor(fraction * T * n) additional observed cells uniformly
// at random; resamples (up to 100 attempts) if a series would lose all of
// its observations. Masked cells get NaN values so they cannot be read by
// accident.
inline Dataset mask_random(const Dataset& data, double fraction, std::uint64_t seed) {
  if (!(fraction >= 0.0) || fraction >= 1.0)
    throw std::invalid_argument("fraction must lie in [0, 1)");
  const int t = data.time_steps();
  const int n = data.series_count();
  const std::int64_t target =
      static_cast<std::int64_t>(fraction * static_cast<double>(t) * static_cast<double>(n));
  if (target == 0) return data;

  std::vector<std::pair<int, int>> observed;
  observed.reserve(static_cast<std::size_t>(t) * n);
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < t; ++r)
      if (data.mask(r, i)) observed.emplace_back(r, i);
  if (target > static_cast<std::int64_t>(observed.size()))
    throw std::invalid_argument("fraction masks more cells than are observed");

  for (int attempt = 0; attempt < 100; ++attempt) {
    Rng rng = Rng::derive(seed, static_cast<std::uint64_t>(attempt));
    std::vector<std::pair<int, int>> pool = observed;
    // Partial Fisher-Yates: the first `target` entries become the sample.
    for (std::int64_t j = 0; j < target; ++j) {
      const std::int64_t pick =
          j + static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(pool.size() - j)));
      std::swap(pool[j], pool[pick]);
    }
    Dataset out = data;
    for (std::int64_t j = 0; j < target; ++j) {
      out.mask(pool[j].first, pool[j].second) = false;
      out.values(pool[j].first, pool[j].second) = std::numeric_limits<double>::quiet_NaN();
    }
    bool orphaned = false;
    for (int i = 0; i < n && !orphaned; ++i) orphaned = out.observed_in_series(i) == 0;
    if (!orphaned) return out;
  }
  throw std::runtime_error("masking left a series fully unobserved after 100 attempts");
}

}  // namespace edgeless
