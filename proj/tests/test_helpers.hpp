#pragma once

// Shared fixtures for the unit suites: random valid posterior states and
// small random datasets.

#include <cstdint>
#include <vector>

#include "edgeless/inference.hpp"
#include "edgeless/model.hpp"
#include "edgeless/rng.hpp"

namespace edgeless::testing {

inline MatrixXd random_spd(int p, Rng& rng, double ridge = 0.5) {
  MatrixXd a(p, p);
  for (int r = 0; r < p; ++r)
    for (int c = 0; c < p; ++c) a(r, c) = rng.normal();
  return a * a.transpose() + ridge * MatrixXd::Identity(p, p);
}

inline MvNormalParams random_gaussian(int p, Rng& rng) {
  VectorXd mean(p);
  for (int i = 0; i < p; ++i) mean[i] = rng.normal();
  return {mean, random_spd(p, rng)};
}

inline PosteriorState random_state(int t, int n, int p, int k, std::uint64_t seed) {
  Rng rng(seed);
  PosteriorState s;
  for (int i = 0; i < t; ++i) s.q_factors.push_back(random_gaussian(p, rng));
  for (int i = 0; i < n; ++i) {
    s.q_loadings.push_back(random_gaussian(p, rng));
    s.q_noise.push_back({0.5 + rng.uniform(0.0, 3.0), 0.5 + rng.uniform(0.0, 3.0)});
  }
  for (int j = 0; j < k; ++j) {
    s.q_centers.push_back(random_gaussian(p, rng));
    s.q_spreads.push_back({p + rng.uniform(0.5, 4.0), random_spd(p, rng, 1.0)});
  }
  s.responsibilities.resize(n, k);
  for (int i = 0; i < n; ++i) {
    Eigen::RowVectorXd logits(k);
    for (int j = 0; j < k; ++j) logits[j] = rng.normal();
    const double lse = log_sum_exp(logits);
    s.responsibilities.row(i) = (logits.array() - lse).exp();
  }
  VectorXd conc(k);
  for (int j = 0; j < k; ++j) conc[j] = 0.2 + rng.uniform(0.0, 2.0);
  s.q_sizes.concentration = conc;
  s.q_ard.shape = MatrixXd::Constant(k, p, 1.0);
  s.q_ard.rate = MatrixXd::Constant(k, p, 1.0);
  for (int j = 0; j < k; ++j)
    for (int q = 0; q < p; ++q) {
      s.q_ard.shape(j, q) = 0.5 + rng.uniform(0.0, 2.0);
      s.q_ard.rate(j, q) = 0.5 + rng.uniform(0.0, 2.0);
    }
  return s;
}

// Random valid perturbation of one factor's parameters, relative size `eps`.
// SPD parameters are perturbed through their Cholesky factors so every
// perturbed state stays in the variational family.
inline MatrixXd perturb_spd(const MatrixXd& m, Rng& rng, double eps) {
  const int p = static_cast<int>(m.rows());
  const MatrixXd l = chol_spd(m).matrixL();
  MatrixXd bump = MatrixXd::Zero(p, p);
  for (int r = 0; r < p; ++r)
    for (int c = 0; c <= r; ++c) bump(r, c) = eps * rng.normal();
  const MatrixXd lp = l * (MatrixXd::Identity(p, p) + bump);
  return lp * lp.transpose();
}

inline void perturb_gaussian(MvNormalParams& q, Rng& rng, double eps) {
  for (int i = 0; i < q.mean.size(); ++i)
    q.mean[i] += eps * (1.0 + std::abs(q.mean[i])) * rng.normal();
  q.precision = perturb_spd(q.precision, rng, eps);
}

inline void perturb_gamma(GammaParams& g, Rng& rng, double eps) {
  g.shape *= std::exp(eps * rng.normal());
  g.rate *= std::exp(eps * rng.normal());
}

enum class Factor { kFactors, kNoise, kLoadings, kCenters, kSpreads, kAssignments, kSizes, kArd };

inline const char* factor_name(Factor f) {
  switch (f) {
    case Factor::kFactors: return "factors";
    case Factor::kNoise: return "noise";
    case Factor::kLoadings: return "loadings";
    case Factor::kCenters: return "centers";
    case Factor::kSpreads: return "spreads";
    case Factor::kAssignments: return "assignments";
    case Factor::kSizes: return "sizes";
    case Factor::kArd: return "ard";
  }
  return "";
}

inline PosteriorState perturb_factor(const PosteriorState& state, Factor which, Rng& rng,
                                     double eps = 1e-3) {
  PosteriorState s = state;
  const int p = s.factor_dim();
  switch (which) {
    case Factor::kFactors:
      for (auto& q : s.q_factors) perturb_gaussian(q, rng, eps);
      break;
    case Factor::kNoise:
      for (auto& q : s.q_noise) perturb_gamma(q, rng, eps);
      break;
    case Factor::kLoadings:
      for (auto& q : s.q_loadings) perturb_gaussian(q, rng, eps);
      break;
    case Factor::kCenters:
      for (auto& q : s.q_centers) perturb_gaussian(q, rng, eps);
      break;
    case Factor::kSpreads:
      for (auto& q : s.q_spreads) {
        const double floor = p - 1.0;
        q.shape = floor + (q.shape - floor) * std::exp(eps * rng.normal());
        q.scale = perturb_spd(q.scale, rng, eps);
      }
      break;
    case Factor::kAssignments:
      for (int i = 0; i < s.responsibilities.rows(); ++i) {
        Eigen::RowVectorXd logits(s.responsibilities.cols());
        for (int k = 0; k < s.responsibilities.cols(); ++k)
          logits[k] = std::log(std::max(s.responsibilities(i, k), 1e-300)) + eps * rng.normal();
        const double lse = log_sum_exp(logits);
        s.responsibilities.row(i) = (logits.array() - lse).exp();
      }
      break;
    case Factor::kSizes:
      for (int k = 0; k < s.q_sizes.concentration.size(); ++k)
        s.q_sizes.concentration[k] *= std::exp(eps * rng.normal());
      break;
    case Factor::kArd:
      for (int k = 0; k < s.q_ard.shape.rows(); ++k)
        for (int q = 0; q < s.q_ard.shape.cols(); ++q) {
          s.q_ard.shape(k, q) *= std::exp(eps * rng.normal());
          s.q_ard.rate(k, q) *= std::exp(eps * rng.normal());
        }
      break;
  }
  return s;
}

inline Dataset random_dataset(int t, int n, std::uint64_t seed, double missing_fraction = 0.0) {
  Rng rng(seed);
  MatrixXd values(t, n);
  for (int r = 0; r < t; ++r)
    for (int c = 0; c < n; ++c) values(r, c) = rng.normal();
  Dataset data = Dataset::fully_observed_from(std::move(values));
  if (missing_fraction > 0.0) {
    for (int c = 0; c < n; ++c)
      for (int r = 0; r < t; ++r)
        if (rng.uniform() < missing_fraction && data.observed_in_series(c) > 1) {
          data.mask(r, c) = false;
          data.values(r, c) = std::numeric_limits<double>::quiet_NaN();
        }
  }
  return data;
}

}  // namespace edgeless::testing
