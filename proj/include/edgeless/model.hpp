#pragma once

// Domain types: the observed panel, the fixed prior constants, and the full
// variational posterior over factors, loadings, noise and mixture parameters.

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "edgeless/distributions.hpp"

namespace edgeless {

using BoolMatrix = Eigen::Matrix<bool, Eigen::Dynamic, Eigen::Dynamic>;

// T x n panel of signals with a per-cell observed mask. Missing cells are
// marginalized analytically downstream, never imputed into `values`.
struct Dataset {
  MatrixXd values;  // T x n; finite wherever mask is true
  BoolMatrix mask;  // true = observed
  std::vector<std::string> series_ids;  // n labels
  std::vector<std::string> timestamps;  // T labels (may be empty)

  int time_steps() const { return static_cast<int>(values.rows()); }
  int series_count() const { return static_cast<int>(values.cols()); }

  bool fully_observed() const { return mask.all(); }

  std::int64_t observed_count() const { return mask.cast<std::int64_t>().sum(); }

  int observed_in_series(int i) const { return static_cast<int>(mask.col(i).cast<int>().sum()); }

  // Copy of `values` with masked cells forced to exactly 0.0, so that sums
  // over "observed" terms can be written as plain matrix products. Masked
  // entries are overwritten without being read (they may be NaN).
  MatrixXd zeroed_values() const {
    MatrixXd z(values.rows(), values.cols());
    for (int i = 0; i < values.cols(); ++i)
      for (int t = 0; t < values.rows(); ++t) z(t, i) = mask(t, i) ? values(t, i) : 0.0;
    return z;
  }

  static Dataset fully_observed_from(MatrixXd values_in) {
    Dataset d;
    d.mask = BoolMatrix::Constant(values_in.rows(), values_in.cols(), true);
    d.values = std::move(values_in);
    d.series_ids.resize(d.values.cols());
    for (int i = 0; i < d.values.cols(); ++i) d.series_ids[i] = "s" + std::to_string(i + 1);
    return d;
  }
};

// Fixed prior constants. `prior_precision` is the multiscale knob: the prior
// expectation of every community precision is prior_precision * I_p.
struct Hyperparameters {
  int p = 2;
  int k_max = 10;
  double prior_precision = 1.0;  // w^{-1}
  double ard_a = 1e-3;
  double ard_b = 1e-3;
  double noise_alpha = 1e-3;
  double noise_beta = 1e-3;
  double dirichlet_gamma = 1e-3;

  double wishart_nu() const { return static_cast<double>(p); }
  // W = p * w * I_p with w = 1 / prior_precision, so E[Lambda] = nu W^{-1}
  // = prior_precision * I_p.
  MatrixXd wishart_scale() const {
    return (p / prior_precision) * MatrixXd::Identity(p, p);
  }

  void validate() const {
    if (p < 1) throw std::invalid_argument("p must be >= 1");
    if (k_max < 1) throw std::invalid_argument("k_max must be >= 1");
    if (!(prior_precision > 0.0)) throw std::invalid_argument("prior precision must be positive");
    for (double v : {ard_a, ard_b, noise_alpha, noise_beta, dirichlet_gamma})
      if (!(v > 0.0)) throw std::invalid_argument("hyperparameters must be positive");
  }
};

// Grid of independent gamma factors, e.g. the ARD precisions of the centers.
struct GammaGrid {
  MatrixXd shape;
  MatrixXd rate;

  GammaParams at(int k, int q) const { return {shape(k, q), rate(k, q)}; }
};

// The mean-field posterior: one factor per node of the graphical model.
struct PosteriorState {
  std::vector<MvNormalParams> q_factors;   // per time step, over R^p
  std::vector<GammaParams> q_noise;        // per series noise precision
  std::vector<MvNormalParams> q_loadings;  // per series, over R^p
  std::vector<MvNormalParams> q_centers;   // per community, over R^p
  std::vector<WishartParams> q_spreads;    // per community precision matrix
  MatrixXd responsibilities;               // n x K, rows on the simplex
  DirichletParams q_sizes;                 // community size weights
  GammaGrid q_ard;                         // K x p center-scale precisions

  int factor_dim() const { return q_loadings.empty() ? 0 : q_loadings.front().dim(); }
  int series_count() const { return static_cast<int>(q_loadings.size()); }
  int community_count() const { return static_cast<int>(q_centers.size()); }

  void validate() const {
    for (const auto& f : q_factors) f.validate();
    for (const auto& f : q_noise) f.validate();
    for (const auto& f : q_loadings) f.validate();
    for (const auto& f : q_centers) f.validate();
    for (const auto& f : q_spreads) f.validate();
    q_sizes.validate();
    for (int k = 0; k < q_ard.shape.rows(); ++k)
      for (int q = 0; q < q_ard.shape.cols(); ++q) q_ard.at(k, q).validate();
    if (responsibilities.rows() != series_count() ||
        responsibilities.cols() != community_count())
      throw std::invalid_argument("responsibility matrix has wrong shape");
    for (int i = 0; i < responsibilities.rows(); ++i) {
      const auto row = responsibilities.row(i);
      if (row.minCoeff() < -1e-12 || row.maxCoeff() > 1.0 + 1e-12 ||
          std::abs(row.sum() - 1.0) > 1e-10)
        throw std::invalid_argument("responsibility row off the simplex");
    }
  }
};

struct FitResult {
  PosteriorState state;
  std::vector<double> elbo_trace;  // one entry per full sweep
  bool converged = false;
  std::vector<int> labels;  // 1-based community labels, per series
  int k_hat = 0;
  int restart_index = 0;
  double wall_clock_seconds = 0.0;
  // Per-restart diagnostics (same order as restart indices).
  std::vector<double> restart_elbos;
  std::vector<int> restart_k_hats;
  std::vector<std::string> restart_errors;  // empty string = success

  double elbo() const { return elbo_trace.empty() ? -std::numeric_limits<double>::infinity() : elbo_trace.back(); }
};

// E[v v^T] = cov + mean mean^T for a Gaussian factor.
inline MatrixXd expected_outer(const MvNormalParams& q) {
  q.validate();
  const MatrixXd cov = spd_inverse(q.precision, "mvnormal precision");
  return cov + q.mean * q.mean.transpose();
}

struct ValidationReport {
  bool ok = true;
  std::vector<std::string> errors;
  std::vector<std::string> warnings;
};

inline ValidationReport validate(const Dataset& data, const Hyperparameters& hyper) {
  ValidationReport report;
  auto fail = [&](std::string msg) {
    report.ok = false;
    report.errors.push_back(std::move(msg));
  };

  if (data.time_steps() < 1 || data.series_count() < 1) fail("dataset must be at least 1 x 1");
  if (data.mask.rows() != data.values.rows() || data.mask.cols() != data.values.cols())
    fail("mask shape does not match values");

  try {
    hyper.validate();
  } catch (const std::exception& e) {
    fail(e.what());
  }

  if (report.ok) {
    for (int i = 0; i < data.series_count(); ++i) {
      int observed = 0;
      for (int t = 0; t < data.time_steps(); ++t) {
        if (!data.mask(t, i)) continue;
        ++observed;
        if (!std::isfinite(data.values(t, i))) {
          const std::string id = i < static_cast<int>(data.series_ids.size())
                                     ? data.series_ids[i]
                                     : std::to_string(i + 1);
          fail("non-finite observed value in series " + id);
          break;
        }
      }
      if (observed == 0) {
        const std::string id = i < static_cast<int>(data.series_ids.size())
                                   ? data.series_ids[i]
                                   : std::to_string(i + 1);
        fail("series " + id + " has no observed entries");
      }
    }
    if (hyper.p > std::min(data.time_steps(), data.series_count()))
      report.warnings.push_back("p exceeds min(T, n); the factor model is under-determined");
  }
  return report;
}

inline void validate_or_throw(const Dataset& data, const Hyperparameters& hyper) {
  const auto report = validate(data, hyper);
  if (!report.ok) {
    std::string msg = "validation failed:";
    for (const auto& e : report.errors) msg += " " + e + ";";
    throw std::invalid_argument(msg);
  }
}

}  // namespace edgeless
