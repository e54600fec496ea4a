#pragma once

// Coordinate-ascent variational inference for the latent-factor mixture
// model. Each posterior factor has a closed conjugate update; one sweep
// applies them in a fixed order and the ELBO is non-decreasing across
// sweeps up to numerical slack. Fitting restarts the three-stage
// initialization (PPCA -> k-means -> CAVI) from derived seeds and keeps
// the restart with the highest final ELBO.

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "edgeless/distributions.hpp"
#include "edgeless/model.hpp"
#include "edgeless/parallel.hpp"

namespace edgeless {

struct FitConfig {
  int max_sweeps = 1000;
  double elbo_rel_tol = 1e-6;
  int n_restarts = 50;
  int kmeans_runs = 10;
  std::uint64_t seed = 0;
  // Assignments move first: the initial responsibility pass then sees the
  // broad prior precisions, which lets k-means fragments of one community
  // re-merge before the per-community precisions tighten around them.
  std::vector<std::string> update_order = {"assignments", "sizes",   "centers", "spreads",
                                           "ard",         "factors", "noise",   "loadings"};
  bool known_k_mode = false;

  void validate() const {
    if (max_sweeps < 1) throw std::invalid_argument("max_sweeps must be >= 1");
    if (!(elbo_rel_tol > 0.0)) throw std::invalid_argument("elbo_rel_tol must be positive");
    if (n_restarts < 1) throw std::invalid_argument("n_restarts must be >= 1");
    if (kmeans_runs < 1) throw std::invalid_argument("kmeans_runs must be >= 1");
    if (update_order.empty()) throw std::invalid_argument("update_order must be non-empty");
  }
};

// Prior precision used when the community count is treated as known; stands
// in for the E[Lambda] -> infinity limit while keeping the Wishart proper.
constexpr double kKnownKPriorPrecision = 1e6;

// ---------------------------------------------------------------------------
// Process-wide sweep audit: every full sweep anywhere is checked for ELBO
// monotonicity, and violations beyond slack are counted.

struct SweepAudit {
  std::uint64_t sweeps = 0;
  std::uint64_t violations = 0;
  double worst_relative_drop = 0.0;
};

namespace detail {
inline std::atomic<std::uint64_t>& audit_sweeps() {
  static std::atomic<std::uint64_t> v{0};
  return v;
}
inline std::atomic<std::uint64_t>& audit_violations() {
  static std::atomic<std::uint64_t> v{0};
  return v;
}
inline std::atomic<double>& audit_worst_drop() {
  static std::atomic<double> v{0.0};
  return v;
}
inline void audit_record(double prev, double next) {
  audit_sweeps().fetch_add(1, std::memory_order_relaxed);
  const double slack = 1e-8 * std::max(1.0, std::abs(prev));
  if (next < prev - slack) {
    audit_violations().fetch_add(1, std::memory_order_relaxed);
    const double drop = (prev - next) / std::max(1.0, std::abs(prev));
    double cur = audit_worst_drop().load(std::memory_order_relaxed);
    while (drop > cur &&
           !audit_worst_drop().compare_exchange_weak(cur, drop, std::memory_order_relaxed)) {
    }
  }
}
}  // namespace detail

inline SweepAudit sweep_audit() {
  return {detail::audit_sweeps().load(), detail::audit_violations().load(),
          detail::audit_worst_drop().load()};
}

inline void reset_sweep_audit() {
  detail::audit_sweeps().store(0);
  detail::audit_violations().store(0);
  detail::audit_worst_drop().store(0.0);
}

// ---------------------------------------------------------------------------
// The coordinate-ascent engine. Owns the posterior state plus moment caches;
// masked cells never enter any sum (their values are zeroed on entry and the
// complements are subtracted where a full-matrix product is cheaper).

class CaviEngine {
 public:
  CaviEngine(const Dataset& data, const Hyperparameters& hyper)
      : hyper_(hyper),
        t_(data.time_steps()),
        n_(data.series_count()),
        p_(hyper.p),
        k_(hyper.k_max),
        yz_(data.zeroed_values()),
        fully_observed_(data.fully_observed()) {
    hyper_.validate();
    obs_count_.resize(n_);
    col_sq_ = yz_.array().square().colwise().sum();
    missing_in_series_.assign(n_, {});
    missing_at_time_.assign(t_, {});
    for (int i = 0; i < n_; ++i) {
      int count = 0;
      for (int t = 0; t < t_; ++t) {
        if (data.mask(t, i)) {
          ++count;
        } else {
          missing_in_series_[i].push_back(t);
          missing_at_time_[t].push_back(i);
        }
      }
      obs_count_[i] = count;
    }
    w0_ = hyper_.wishart_scale();
    logdet_w0_ = spd_logdet(w0_, "prior wishart scale");
  }

  const Hyperparameters& hyper() const { return hyper_; }
  const PosteriorState& state() const { return state_; }

  void set_state(PosteriorState s) {
    if (static_cast<int>(s.q_factors.size()) != t_ || s.series_count() != n_ ||
        s.community_count() != k_ || s.factor_dim() != p_)
      throw std::invalid_argument("posterior state shape does not match dataset/hyperparameters");
    state_ = std::move(s);
    refresh_all();
  }

  PosteriorState take_state() { return std::move(state_); }

  void apply(const std::string& factor) {
    if (factor == "factors") update_factors();
    else if (factor == "noise") update_noise();
    else if (factor == "loadings") update_loadings();
    else if (factor == "centers") update_centers();
    else if (factor == "spreads") update_spreads();
    else if (factor == "assignments") update_assignments();
    else if (factor == "sizes") update_sizes();
    else if (factor == "ard") update_ard();
    else throw std::invalid_argument("unknown update factor: " + factor);
  }

  void sweep(const std::vector<std::string>& order) {
    for (const auto& f : order) apply(f);
  }

  // q(x_t): precision I + sum_{i observed} E[tau_i] E[A_i A_i^T],
  // mean P^{-1} sum_{i observed} E[tau_i] E[A_i] y_ti.
  void update_factors() {
    MatrixXd shared = MatrixXd::Identity(p_, p_);
    for (int i = 0; i < n_; ++i) shared.noalias() += tau_mean_[i] * a_outer_[i];
    // b_t for all t at once; masked cells contribute zero through yz_.
    MatrixXd b_cols(p_, n_);
    for (int i = 0; i < n_; ++i) b_cols.col(i) = tau_mean_[i] * a_mean_.row(i).transpose();
    const MatrixXd rhs = yz_ * b_cols.transpose();  // T x p

    Eigen::LLT<MatrixXd> shared_llt(shared);
    if (shared_llt.info() != Eigen::Success)
      throw std::runtime_error("latent factor precision is not positive-definite");
    const MatrixXd shared_cov =
        symmetrized_of(shared_llt.solve(MatrixXd::Identity(p_, p_)));
    const double shared_logdet = logdet_from_llt(shared_llt);

    x_sum_outer_.setZero(p_, p_);
    for (int t = 0; t < t_; ++t) {
      auto& q = state_.q_factors[t];
      if (missing_at_time_[t].empty()) {
        q.precision = shared;
        q.mean = shared_llt.solve(rhs.row(t).transpose());
        x_cov_[t] = shared_cov;
        x_logdet_prec_[t] = shared_logdet;
      } else {
        MatrixXd prec = shared;
        for (int i : missing_at_time_[t]) prec.noalias() -= tau_mean_[i] * a_outer_[i];
        prec = 0.5 * (prec + prec.transpose().eval());
        Eigen::LLT<MatrixXd> llt(prec);
        if (llt.info() != Eigen::Success)
          throw std::runtime_error("latent factor precision is not positive-definite");
        q.precision = prec;
        q.mean = llt.solve(rhs.row(t).transpose());
        x_cov_[t] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
        x_logdet_prec_[t] = logdet_from_llt(llt);
      }
      x_mean_.row(t) = q.mean.transpose();
      x_sum_outer_.noalias() += x_cov_[t] + q.mean * q.mean.transpose();
    }
    x_scratch_dirty_ = true;
  }

  // q(tau_i): Gamma(alpha + T_i/2, beta + E[sum of squared residuals]/2).
  void update_noise() {
    ensure_x_scratch();
    for (int i = 0; i < n_; ++i) {
      const double incr = expected_residual_sq(i);
      if (incr < -1e-8 * std::max(1.0, std::abs(col_sq_[i])))
        throw std::runtime_error("negative expected squared residual in noise update");
      auto& q = state_.q_noise[i];
      q.shape = hyper_.noise_alpha + 0.5 * obs_count_[i];
      q.rate = hyper_.noise_beta + 0.5 * std::max(incr, 0.0);
      tau_mean_[i] = q.shape / q.rate;
      tau_log_[i] = digamma(q.shape) - std::log(q.rate);
    }
  }

  // q(A_i): precision E[tau_i] sum_t E[x x^T] + sum_k r_ik E[Lambda_k],
  // mean pulled toward both the data and the responsible community centers.
  void update_loadings() {
    ensure_x_scratch();
    std::vector<VectorXd> center_pull(k_);
    for (int k = 0; k < k_; ++k) center_pull[k] = prec_mean_[k] * mu_mean_.row(k).transpose();
    MatrixXd prec(p_, p_);
    VectorXd rhs(p_);
    for (int i = 0; i < n_; ++i) {
      prec = tau_mean_[i] * x_outer_series_[i];
      rhs = tau_mean_[i] * xg_.col(i);
      for (int k = 0; k < k_; ++k) {
        const double r = state_.responsibilities(i, k);
        if (r == 0.0) continue;
        prec.noalias() += r * prec_mean_[k];
        rhs.noalias() += r * center_pull[k];
      }
      prec = 0.5 * (prec + prec.transpose().eval());
      Eigen::LLT<MatrixXd> llt(prec);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("loading precision is not positive-definite");
      auto& q = state_.q_loadings[i];
      q.precision = prec;
      q.mean = llt.solve(rhs);
      a_mean_.row(i) = q.mean.transpose();
      a_cov_[i] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
      a_outer_[i] = a_cov_[i] + q.mean * q.mean.transpose();
      a_logdet_prec_[i] = logdet_from_llt(llt);
    }
  }

  // q(mu_k): ARD-diagonal prior precision plus N_k E[Lambda_k].
  void update_centers() {
    const VectorXd counts = state_.responsibilities.colwise().sum();
    const MatrixXd pulls = a_mean_.transpose() * state_.responsibilities;  // p x K
    for (int k = 0; k < k_; ++k) {
      MatrixXd prec = ard_mean_.row(k).asDiagonal();
      prec.noalias() += counts[k] * prec_mean_[k];
      prec = 0.5 * (prec + prec.transpose().eval());
      Eigen::LLT<MatrixXd> llt(prec);
      if (llt.info() != Eigen::Success)
        throw std::runtime_error("center precision is not positive-definite");
      auto& q = state_.q_centers[k];
      q.precision = prec;
      q.mean = llt.solve(prec_mean_[k] * pulls.col(k));
      mu_mean_.row(k) = q.mean.transpose();
      mu_cov_[k] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
      mu_outer_[k] = mu_cov_[k] + q.mean * q.mean.transpose();
      mu_logdet_prec_[k] = logdet_from_llt(llt);
    }
  }

  // q(Lambda_k): Wishart(nu + N_k, W + weighted scatter about the center).
  void update_spreads() {
    const VectorXd counts = state_.responsibilities.colwise().sum();
    const MatrixXd pulls = a_mean_.transpose() * state_.responsibilities;  // p x K
    for (int k = 0; k < k_; ++k) {
      MatrixXd scatter = w0_;
      for (int i = 0; i < n_; ++i) {
        const double r = state_.responsibilities(i, k);
        if (r != 0.0) scatter.noalias() += r * a_outer_[i];
      }
      const VectorXd pull = pulls.col(k);
      const VectorXd center = mu_mean_.row(k).transpose();
      scatter.noalias() -= pull * center.transpose();
      scatter.noalias() -= center * pull.transpose();
      scatter.noalias() += counts[k] * mu_outer_[k];
      scatter = symmetrized(scatter, 1e-10);
      auto& q = state_.q_spreads[k];
      q.shape = hyper_.wishart_nu() + counts[k];
      q.scale = scatter;
      refresh_spread(k);
    }
  }

  // q(z_i): softmax over communities of the expected log joint.
  void update_assignments() {
    VectorXd base(k_);
    std::vector<VectorXd> pull(k_);
    for (int k = 0; k < k_; ++k) {
      base[k] = 0.5 * prec_logdet_[k] -
                0.5 * (prec_mean_[k].cwiseProduct(mu_outer_[k])).sum() + size_log_[k];
      pull[k] = prec_mean_[k] * mu_mean_.row(k).transpose();
    }
    Eigen::RowVectorXd logits(k_);
    for (int i = 0; i < n_; ++i) {
      for (int k = 0; k < k_; ++k) {
        logits[k] = base[k] - 0.5 * (prec_mean_[k].cwiseProduct(a_outer_[i])).sum() +
                    pull[k].dot(a_mean_.row(i));
      }
      const double lse = log_sum_exp(logits);
      state_.responsibilities.row(i) = (logits.array() - lse).exp();
    }
  }

  // q(rho): Dirichlet(gamma + responsibility column sums).
  void update_sizes() {
    state_.q_sizes.concentration =
        VectorXd::Constant(k_, hyper_.dirichlet_gamma) +
        state_.responsibilities.colwise().sum().transpose();
    refresh_sizes();
  }

  // q(lambda_kq): Gamma(a + 1/2, b + E[mu_kq^2] / 2).
  void update_ard() {
    for (int k = 0; k < k_; ++k) {
      for (int q = 0; q < p_; ++q) {
        state_.q_ard.shape(k, q) = hyper_.ard_a + 0.5;
        state_.q_ard.rate(k, q) = hyper_.ard_b + 0.5 * mu_outer_[k](q, q);
        ard_mean_(k, q) = state_.q_ard.shape(k, q) / state_.q_ard.rate(k, q);
        ard_log_(k, q) = digamma(state_.q_ard.shape(k, q)) - std::log(state_.q_ard.rate(k, q));
      }
    }
  }

  // Full evidence lower bound, all additive constants included so values are
  // comparable across p, K_max and the prior precision.
  double elbo() {
    ensure_x_scratch();
    const double nu0 = hyper_.wishart_nu();
    const double gamma0 = hyper_.dirichlet_gamma;

    double value = 0.0;

    // Likelihood over observed cells.
    for (int i = 0; i < n_; ++i) {
      value += 0.5 * obs_count_[i] * (tau_log_[i] - kLogTwoPi) -
               0.5 * tau_mean_[i] * expected_residual_sq(i);
    }

    // Priors on the latent factors and the noise precisions.
    value += -0.5 * t_ * p_ * kLogTwoPi - 0.5 * x_sum_outer_.trace();
    for (int i = 0; i < n_; ++i) {
      value += hyper_.noise_alpha * std::log(hyper_.noise_beta) - std::lgamma(hyper_.noise_alpha) +
               (hyper_.noise_alpha - 1.0) * tau_log_[i] - hyper_.noise_beta * tau_mean_[i];
    }

    // Mixture likelihood of the loadings and the assignment prior.
    VectorXd base(k_);
    std::vector<VectorXd> pull(k_);
    for (int k = 0; k < k_; ++k) {
      base[k] = 0.5 * prec_logdet_[k] - 0.5 * (prec_mean_[k].cwiseProduct(mu_outer_[k])).sum();
      pull[k] = prec_mean_[k] * mu_mean_.row(k).transpose();
    }
    for (int i = 0; i < n_; ++i) {
      for (int k = 0; k < k_; ++k) {
        const double r = state_.responsibilities(i, k);
        if (r == 0.0) continue;
        const double quad = (prec_mean_[k].cwiseProduct(a_outer_[i])).sum() -
                            2.0 * pull[k].dot(a_mean_.row(i)) +
                            (prec_mean_[k].cwiseProduct(mu_outer_[k])).sum();
        value += r * (-0.5 * p_ * kLogTwoPi + 0.5 * prec_logdet_[k] - 0.5 * quad +
                      size_log_[k]);
      }
    }

    // Priors on centers, spreads, ARD scales and sizes.
    for (int k = 0; k < k_; ++k) {
      for (int q = 0; q < p_; ++q) {
        value += 0.5 * (ard_log_(k, q) - kLogTwoPi) - 0.5 * ard_mean_(k, q) * mu_outer_[k](q, q);
        value += hyper_.ard_a * std::log(hyper_.ard_b) - std::lgamma(hyper_.ard_a) +
                 (hyper_.ard_a - 1.0) * ard_log_(k, q) - hyper_.ard_b * ard_mean_(k, q);
      }
      value += 0.5 * nu0 * logdet_w0_ - 0.5 * nu0 * p_ * std::log(2.0) -
               log_multigamma(p_, 0.5 * nu0) + 0.5 * (nu0 - p_ - 1.0) * prec_logdet_[k] -
               0.5 * (w0_.cwiseProduct(prec_mean_[k])).sum();
    }
    value += std::lgamma(k_ * gamma0) - k_ * std::lgamma(gamma0);
    for (int k = 0; k < k_; ++k) value += (gamma0 - 1.0) * size_log_[k];

    // Entropies.
    for (int t = 0; t < t_; ++t) value += 0.5 * p_ * (1.0 + kLogTwoPi) - 0.5 * x_logdet_prec_[t];
    for (int i = 0; i < n_; ++i) {
      const auto& q = state_.q_noise[i];
      value += q.shape - std::log(q.rate) + std::lgamma(q.shape) +
               (1.0 - q.shape) * digamma(q.shape);
      value += 0.5 * p_ * (1.0 + kLogTwoPi) - 0.5 * a_logdet_prec_[i];
    }
    for (int k = 0; k < k_; ++k) {
      value += 0.5 * p_ * (1.0 + kLogTwoPi) - 0.5 * mu_logdet_prec_[k];
      const auto& q = state_.q_spreads[k];
      value += -0.5 * q.shape * spread_scale_logdet_[k] + 0.5 * q.shape * p_ * std::log(2.0) +
               log_multigamma(p_, 0.5 * q.shape) - 0.5 * (q.shape - p_ - 1.0) * prec_logdet_[k] +
               0.5 * q.shape * p_;
      for (int q2 = 0; q2 < p_; ++q2) {
        const auto g = state_.q_ard.at(k, q2);
        value += g.shape - std::log(g.rate) + std::lgamma(g.shape) +
                 (1.0 - g.shape) * digamma(g.shape);
      }
    }
    for (int i = 0; i < n_; ++i) {
      for (int k = 0; k < k_; ++k) {
        const double r = state_.responsibilities(i, k);
        if (r > 0.0) value -= r * std::log(r);
      }
    }
    value += dirichlet_entropy(state_.q_sizes);

    if (!std::isfinite(value)) throw std::runtime_error("ELBO is not finite");
    return value;
  }

 private:
  MatrixXd symmetrized_of(const MatrixXd& m) const { return 0.5 * (m + m.transpose().eval()); }

  // E[sum_t observed (y - A^T x)^2] for series i.
  double expected_residual_sq(int i) const {
    const double dot = a_mean_.row(i).dot(xg_.col(i));
    const double quad = (a_outer_[i].cwiseProduct(x_outer_series_[i])).sum();
    return col_sq_[i] - 2.0 * dot + quad;
  }

  void ensure_x_scratch() {
    if (!x_scratch_dirty_) return;
    xg_ = x_mean_.transpose() * yz_;  // p x n
    x_outer_series_.assign(n_, x_sum_outer_);
    for (int i = 0; i < n_; ++i) {
      for (int t : missing_in_series_[i]) {
        x_outer_series_[i].noalias() -=
            x_cov_[t] + x_mean_.row(t).transpose() * x_mean_.row(t);
      }
    }
    x_scratch_dirty_ = false;
  }

  void refresh_spread(int k) {
    const auto& q = state_.q_spreads[k];
    const auto llt = chol_spd(q.scale, "community precision scale");
    spread_scale_logdet_[k] = logdet_from_llt(llt);
    prec_mean_[k] = symmetrized_of(q.shape * llt.solve(MatrixXd::Identity(p_, p_)));
    double eld = p_ * std::log(2.0) - spread_scale_logdet_[k];
    for (int d = 1; d <= p_; ++d) eld += digamma(0.5 * (q.shape + 1 - d));
    prec_logdet_[k] = eld;
  }

  void refresh_sizes() {
    const auto m = dirichlet_moments(state_.q_sizes);
    size_log_ = m.expected_log;
  }

  void refresh_all() {
    state_.validate();
    x_mean_.resize(t_, p_);
    x_cov_.assign(t_, MatrixXd());
    x_logdet_prec_.resize(t_);
    x_sum_outer_.setZero(p_, p_);
    for (int t = 0; t < t_; ++t) {
      const auto& q = state_.q_factors[t];
      const auto llt = chol_spd(q.precision, "factor precision");
      x_mean_.row(t) = q.mean.transpose();
      x_cov_[t] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
      x_logdet_prec_[t] = logdet_from_llt(llt);
      x_sum_outer_.noalias() += x_cov_[t] + q.mean * q.mean.transpose();
    }
    a_mean_.resize(n_, p_);
    a_cov_.assign(n_, MatrixXd());
    a_outer_.assign(n_, MatrixXd());
    a_logdet_prec_.resize(n_);
    tau_mean_.resize(n_);
    tau_log_.resize(n_);
    for (int i = 0; i < n_; ++i) {
      const auto& q = state_.q_loadings[i];
      const auto llt = chol_spd(q.precision, "loading precision");
      a_mean_.row(i) = q.mean.transpose();
      a_cov_[i] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
      a_outer_[i] = a_cov_[i] + q.mean * q.mean.transpose();
      a_logdet_prec_[i] = logdet_from_llt(llt);
      tau_mean_[i] = state_.q_noise[i].mean();
      tau_log_[i] = digamma(state_.q_noise[i].shape) - std::log(state_.q_noise[i].rate);
    }
    mu_mean_.resize(k_, p_);
    mu_cov_.assign(k_, MatrixXd());
    mu_outer_.assign(k_, MatrixXd());
    mu_logdet_prec_.resize(k_);
    prec_mean_.assign(k_, MatrixXd());
    prec_logdet_.resize(k_);
    spread_scale_logdet_.resize(k_);
    ard_mean_.resize(k_, p_);
    ard_log_.resize(k_, p_);
    for (int k = 0; k < k_; ++k) {
      const auto& q = state_.q_centers[k];
      const auto llt = chol_spd(q.precision, "center precision");
      mu_mean_.row(k) = q.mean.transpose();
      mu_cov_[k] = symmetrized_of(llt.solve(MatrixXd::Identity(p_, p_)));
      mu_outer_[k] = mu_cov_[k] + q.mean * q.mean.transpose();
      mu_logdet_prec_[k] = logdet_from_llt(llt);
      refresh_spread(k);
      for (int q2 = 0; q2 < p_; ++q2) {
        ard_mean_(k, q2) = state_.q_ard.at(k, q2).mean();
        ard_log_(k, q2) =
            digamma(state_.q_ard.shape(k, q2)) - std::log(state_.q_ard.rate(k, q2));
      }
    }
    refresh_sizes();
    x_scratch_dirty_ = true;
  }

  Hyperparameters hyper_;
  int t_, n_, p_, k_;
  MatrixXd yz_;
  bool fully_observed_;
  VectorXd col_sq_;
  Eigen::VectorXi obs_count_;
  std::vector<std::vector<int>> missing_in_series_;
  std::vector<std::vector<int>> missing_at_time_;
  MatrixXd w0_;
  double logdet_w0_ = 0.0;

  PosteriorState state_;

  // Moment caches, kept in lockstep with the state.
  MatrixXd x_mean_;
  std::vector<MatrixXd> x_cov_;
  VectorXd x_logdet_prec_;
  MatrixXd x_sum_outer_;
  MatrixXd a_mean_;
  std::vector<MatrixXd> a_cov_, a_outer_;
  VectorXd a_logdet_prec_;
  VectorXd tau_mean_, tau_log_;
  MatrixXd mu_mean_;
  std::vector<MatrixXd> mu_cov_, mu_outer_;
  VectorXd mu_logdet_prec_;
  std::vector<MatrixXd> prec_mean_;
  VectorXd prec_logdet_, spread_scale_logdet_;
  MatrixXd ard_mean_, ard_log_;
  VectorXd size_log_;

  bool x_scratch_dirty_ = true;
  MatrixXd xg_;  // p x n, sum_t E[x_t] y_ti over observed cells
  std::vector<MatrixXd> x_outer_series_;
};

// ---------------------------------------------------------------------------
// Spec-shaped single-update entry points (tests drive these directly).

namespace detail {
template <typename Fn>
void apply_single_update(PosteriorState& state, const Dataset& data,
                         const Hyperparameters& hyper, Fn&& fn) {
  CaviEngine engine(data, hyper);
  engine.set_state(std::move(state));
  fn(engine);
  state = engine.take_state();
}
}  // namespace detail

inline void update_latent_factors(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_factors(); });
}
inline void update_noise_precision(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_noise(); });
}
inline void update_factor_loadings(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_loadings(); });
}
inline void update_community_means(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_centers(); });
}
inline void update_community_precisions(PosteriorState& s, const Dataset& d,
                                         const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_spreads(); });
}
inline void update_assignments(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_assignments(); });
}
inline void update_community_sizes(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_sizes(); });
}
inline void update_ard(PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  detail::apply_single_update(s, d, h, [](CaviEngine& e) { e.update_ard(); });
}

inline double compute_elbo(const PosteriorState& s, const Dataset& d, const Hyperparameters& h) {
  CaviEngine engine(d, h);
  engine.set_state(s);
  return engine.elbo();
}

// ---------------------------------------------------------------------------
// Stage 1: probabilistic PCA by truncated SVD of the mean-imputed, centered
// panel. A seeded random rotation of the loading basis re-randomizes
// restarts without touching the PPCA likelihood.

struct PpcaInit {
  std::vector<MvNormalParams> q_factors;
  std::vector<MvNormalParams> q_loadings;
  std::vector<GammaParams> q_noise;
  MatrixXd loading_means;  // n x p
  double residual_variance = 0.0;
};

inline MatrixXd random_rotation(int p, Rng& rng) {
  if (p == 1) return MatrixXd::Constant(1, 1, rng.uniform() < 0.5 ? -1.0 : 1.0);
  MatrixXd g(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) g(i, j) = rng.normal();
  Eigen::HouseholderQR<MatrixXd> qr(g);
  MatrixXd q = qr.householderQ();
  const MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (int j = 0; j < p; ++j)
    if (r(j, j) < 0.0) q.col(j) *= -1.0;
  return q;
}

inline PpcaInit ppca_init(const Dataset& data, int p, std::uint64_t seed) {
  const int t = data.time_steps();
  const int n = data.series_count();
  if (p < 1 || p > std::min(t, n))
    throw std::invalid_argument("ppca_init requires 1 <= p <= min(T, n)");

  // Center on per-series observed means; mean-imputed cells become zeros.
  MatrixXd centered(t, n);
  VectorXd col_mean(n);
  for (int i = 0; i < n; ++i) {
    double sum = 0.0;
    int count = 0;
    for (int r = 0; r < t; ++r) {
      if (!data.mask(r, i)) continue;
      sum += data.values(r, i);
      ++count;
    }
    if (count == 0) throw std::invalid_argument("series with no observed entries");
    col_mean[i] = sum / count;
    for (int r = 0; r < t; ++r)
      centered(r, i) = data.mask(r, i) ? data.values(r, i) - col_mean[i] : 0.0;
  }

  Eigen::BDCSVD<MatrixXd> svd(centered, Eigen::ComputeThinU | Eigen::ComputeThinV);
  const VectorXd sv = svd.singularValues();
  const int m = static_cast<int>(sv.size());
  const double rank_tol = std::max(t, n) * 1e-12 * std::max(sv[0], 1e-300);
  int rank = 0;
  for (int j = 0; j < m; ++j)
    if (sv[j] > rank_tol) ++rank;
  if (p > rank) throw std::invalid_argument("p exceeds the numerical rank of the data");

  VectorXd eig = sv.array().square() / static_cast<double>(t);
  double resid = 0.0;
  if (n > p) {
    for (int j = p; j < m; ++j) resid += eig[j];
    resid /= static_cast<double>(n - p);
  }
  resid = std::max(resid, 1e-12);

  MatrixXd loadings = svd.matrixV().leftCols(p);
  for (int j = 0; j < p; ++j)
    loadings.col(j) *= std::sqrt(std::max(eig[j] - resid, 1e-12));
  Rng rng(seed);
  loadings = loadings * random_rotation(p, rng);

  MatrixXd posterior_scale = loadings.transpose() * loadings +
                             resid * MatrixXd::Identity(p, p);
  const auto llt = chol_spd(posterior_scale, "ppca posterior scale");
  const MatrixXd factors = llt.solve(loadings.transpose() * centered.transpose()).transpose();

  double data_scale = 0.0;
  std::int64_t observed = 0;
  for (int i = 0; i < n; ++i)
    for (int r = 0; r < t; ++r)
      if (data.mask(r, i)) {
        data_scale += centered(r, i) * centered(r, i);
        ++observed;
      }
  data_scale = std::max(data_scale / std::max<std::int64_t>(observed, 1), 1e-12);

  PpcaInit init;
  init.loading_means = loadings;
  init.residual_variance = resid;
  const MatrixXd factor_prec = 100.0 * MatrixXd::Identity(p, p);
  const MatrixXd loading_prec = (100.0 / data_scale) * MatrixXd::Identity(p, p);
  init.q_factors.reserve(t);
  for (int r = 0; r < t; ++r)
    init.q_factors.push_back({factors.row(r).transpose(), factor_prec});
  init.q_loadings.reserve(n);
  init.q_noise.reserve(n);
  for (int i = 0; i < n; ++i) {
    init.q_loadings.push_back({loadings.row(i).transpose(), loading_prec});
    const double shape = 1.0 + 0.5 * data.observed_in_series(i);
    init.q_noise.push_back({shape, shape * resid});
  }
  return init;
}

// ---------------------------------------------------------------------------
// Stage 2: best-of-`runs` k-means with k-means++ seeding on the loading
// means. Deterministic given the seed.

struct KmeansResult {
  std::vector<int> labels;  // 0-based
  MatrixXd centroids;       // k x p
  double sse = 0.0;
};

inline KmeansResult kmeans(const MatrixXd& points, int k, int runs, std::uint64_t seed) {
  const int n = static_cast<int>(points.rows());
  const int p = static_cast<int>(points.cols());
  if (k < 1) throw std::invalid_argument("k must be >= 1");
  if (k > n) throw std::invalid_argument("k exceeds the number of points");
  if (runs < 1) throw std::invalid_argument("runs must be >= 1");

  KmeansResult best;
  best.sse = std::numeric_limits<double>::infinity();

  for (int run = 0; run < runs; ++run) {
    Rng rng = Rng::derive(seed, run);
    MatrixXd centroids(k, p);
    VectorXd d2 = VectorXd::Constant(n, std::numeric_limits<double>::infinity());
    centroids.row(0) = points.row(static_cast<int>(rng.below(n)));
    for (int j = 1; j < k; ++j) {
      for (int i = 0; i < n; ++i)
        d2[i] = std::min(d2[i], (points.row(i) - centroids.row(j - 1)).squaredNorm());
      const double total = d2.sum();
      int pick;
      if (total <= 0.0) {
        pick = static_cast<int>(rng.below(n));
      } else {
        double x = rng.uniform() * total;
        pick = n - 1;
        for (int i = 0; i < n; ++i) {
          x -= d2[i];
          if (x <= 0.0) {
            pick = i;
            break;
          }
        }
      }
      centroids.row(j) = points.row(pick);
    }

    std::vector<int> labels(n, 0);
    for (int iter = 0; iter < 100; ++iter) {
      bool changed = false;
      for (int i = 0; i < n; ++i) {
        int arg = 0;
        double bestd = (points.row(i) - centroids.row(0)).squaredNorm();
        for (int j = 1; j < k; ++j) {
          const double d = (points.row(i) - centroids.row(j)).squaredNorm();
          if (d < bestd) {
            bestd = d;
            arg = j;
          }
        }
        if (labels[i] != arg) {
          labels[i] = arg;
          changed = true;
        }
      }
      if (!changed && iter > 0) break;
      MatrixXd sums = MatrixXd::Zero(k, p);
      VectorXd counts = VectorXd::Zero(k);
      for (int i = 0; i < n; ++i) {
        sums.row(labels[i]) += points.row(i);
        counts[labels[i]] += 1.0;
      }
      for (int j = 0; j < k; ++j)
        if (counts[j] > 0.0) centroids.row(j) = sums.row(j) / counts[j];
    }

    double sse = 0.0;
    for (int i = 0; i < n; ++i) sse += (points.row(i) - centroids.row(labels[i])).squaredNorm();
    if (sse < best.sse) {
      best.labels = labels;
      best.centroids = centroids;
      best.sse = sse;
    }
  }
  return best;
}

inline std::vector<int> kmeans_init(const MatrixXd& loading_means, int k_max, int runs,
                                    std::uint64_t seed) {
  return kmeans(loading_means, k_max, runs, seed).labels;
}

// ---------------------------------------------------------------------------
// Assembling an initial posterior from the PPCA + k-means stages.

inline PosteriorState initial_state(const PpcaInit& init, const KmeansResult& clusters,
                                    const Hyperparameters& hyper, int n) {
  PosteriorState s;
  s.q_factors = init.q_factors;
  s.q_loadings = init.q_loadings;
  s.q_noise = init.q_noise;
  const int k = hyper.k_max;
  const int p = hyper.p;
  s.responsibilities = MatrixXd::Zero(n, k);
  VectorXd counts = VectorXd::Zero(k);
  for (int i = 0; i < n; ++i) {
    s.responsibilities(i, clusters.labels[i]) = 1.0;
    counts[clusters.labels[i]] += 1.0;
  }
  s.q_centers.reserve(k);
  s.q_spreads.reserve(k);
  for (int j = 0; j < k; ++j) {
    VectorXd mean = VectorXd::Zero(p);
    if (j < clusters.centroids.rows() && counts[j] > 0.0)
      mean = clusters.centroids.row(j).transpose();
    s.q_centers.push_back({mean, MatrixXd::Identity(p, p)});
    s.q_spreads.push_back({hyper.wishart_nu(), hyper.wishart_scale()});
  }
  s.q_sizes.concentration = VectorXd::Constant(k, hyper.dirichlet_gamma) + counts;
  s.q_ard.shape = MatrixXd::Constant(k, p, hyper.ard_a);
  s.q_ard.rate = MatrixXd::Constant(k, p, hyper.ard_b);
  return s;
}

// ---------------------------------------------------------------------------
// Label extraction: per-row argmax of the responsibilities (ties break to the
// lowest community index); K-hat counts distinct labels.

struct ExtractedLabels {
  std::vector<int> labels;  // 1-based
  int k_hat = 0;
};

inline ExtractedLabels extract_labels(const PosteriorState& state) {
  const int n = state.series_count();
  const int k = state.community_count();
  ExtractedLabels out;
  out.labels.resize(n);
  std::vector<bool> seen(k, false);
  for (int i = 0; i < n; ++i) {
    int arg = 0;
    double best = state.responsibilities(i, 0);
    for (int j = 1; j < k; ++j) {
      if (state.responsibilities(i, j) > best) {
        best = state.responsibilities(i, j);
        arg = j;
      }
    }
    out.labels[i] = arg + 1;
    if (!seen[arg]) {
      seen[arg] = true;
      ++out.k_hat;
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Convergence loop and the multi-restart driver.

struct CaviRun {
  std::vector<double> elbo_trace;
  bool converged = false;
};

inline CaviRun cavi_run(CaviEngine& engine, const FitConfig& config) {
  CaviRun run;
  double prev = 0.0;
  for (int sweep = 0; sweep < config.max_sweeps; ++sweep) {
    engine.sweep(config.update_order);
    const double value = engine.elbo();
    if (sweep > 0) detail::audit_record(prev, value);
    run.elbo_trace.push_back(value);
    if (sweep > 0) {
      const double rel = (value - prev) / std::max(std::abs(prev), 1e-12);
      if (rel < config.elbo_rel_tol) {
        run.converged = true;
        break;
      }
    }
    prev = value;
  }
  return run;
}

inline FitResult fit(const Dataset& data, const Hyperparameters& hyper_in,
                     const FitConfig& config, int jobs = 0) {
  config.validate();
  Hyperparameters hyper = hyper_in;
  if (config.known_k_mode) hyper.prior_precision = kKnownKPriorPrecision;
  validate_or_throw(data, hyper);
  if (hyper.k_max > data.series_count())
    throw std::invalid_argument("k_max exceeds the number of series");

  const auto start = std::chrono::steady_clock::now();
  const int restarts = config.n_restarts;
  const int n = data.series_count();

  struct Outcome {
    PosteriorState state;
    std::vector<double> trace;
    bool converged = false;
    std::vector<int> labels;
    int k_hat = 0;
  };
  std::vector<std::optional<Outcome>> outcomes(restarts);
  std::vector<std::string> errors(restarts);

  parallel_for(jobs, restarts, [&](int r) {
    try {
      Rng stream = Rng::derive(config.seed, static_cast<std::uint64_t>(r));
      const std::uint64_t ppca_seed = stream.next_u64();
      const std::uint64_t kmeans_seed = stream.next_u64();
      const auto init = ppca_init(data, hyper.p, ppca_seed);
      const auto clusters =
          kmeans(init.loading_means, hyper.k_max, config.kmeans_runs, kmeans_seed);
      CaviEngine engine(data, hyper);
      engine.set_state(initial_state(init, clusters, hyper, n));
      const auto run = cavi_run(engine, config);
      Outcome out;
      out.state = engine.take_state();
      out.trace = run.elbo_trace;
      out.converged = run.converged;
      const auto extracted = extract_labels(out.state);
      out.labels = extracted.labels;
      out.k_hat = extracted.k_hat;
      outcomes[r] = std::move(out);
    } catch (const std::exception& e) {
      errors[r] = e.what();
    }
  });

  int best = -1;
  double best_elbo = -std::numeric_limits<double>::infinity();
  for (int r = 0; r < restarts; ++r) {
    if (!outcomes[r]) continue;
    const double value = outcomes[r]->trace.back();
    if (best < 0 || value > best_elbo) {
      best = r;
      best_elbo = value;
    }
  }
  if (best < 0)
    throw std::runtime_error("all restarts failed; first error: " +
                             (restarts > 0 ? errors[0] : std::string("none")));

  FitResult result;
  result.restart_elbos.resize(restarts);
  result.restart_k_hats.resize(restarts);
  result.restart_errors = errors;
  for (int r = 0; r < restarts; ++r) {
    result.restart_elbos[r] =
        outcomes[r] ? outcomes[r]->trace.back() : std::numeric_limits<double>::quiet_NaN();
    result.restart_k_hats[r] = outcomes[r] ? outcomes[r]->k_hat : -1;
  }
  result.state = std::move(outcomes[best]->state);
  result.elbo_trace = std::move(outcomes[best]->trace);
  result.converged = outcomes[best]->converged;
  result.labels = std::move(outcomes[best]->labels);
  result.k_hat = outcomes[best]->k_hat;
  result.restart_index = best;
  result.wall_clock_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

}  // namespace edgeless
