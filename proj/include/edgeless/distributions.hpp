#pragma once

// Exponential-family primitives: gamma, Wishart, Dirichlet, categorical and
// (multivariate) normal with the parametrizations the model is written in.
//
// Gamma(a, b) is shape/rate: p(x) = b^a / Gamma(a) x^(a-1) exp(-b x).
// Wishart(nu, W) has density proportional to det(x)^((nu-p-1)/2) exp(-tr(W x)/2)
// and mean nu * W^{-1}; W here is the matrix rate, not the usual scale V = W^{-1}.
// All SPD work goes through Cholesky factorizations.

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>
#include <vector>

#include "edgeless/linalg.hpp"
#include "edgeless/rng.hpp"
#include "edgeless/special.hpp"

namespace edgeless {

constexpr double kLogTwoPi = 1.8378770664093454835606594728112;

// ---------------------------------------------------------------------------
// Parameter types

struct GammaParams {
  double shape = 1.0;  // a > 0
  double rate = 1.0;   // b > 0

  void validate() const {
    if (!(shape > 0.0) || !std::isfinite(shape)) throw std::invalid_argument("gamma shape must be positive");
    if (!(rate > 0.0) || !std::isfinite(rate)) throw std::invalid_argument("gamma rate must be positive");
  }
  double mean() const { return shape / rate; }
  double variance() const { return shape / (rate * rate); }
};

struct WishartParams {
  double shape = 1.0;  // nu > p - 1
  MatrixXd scale;      // W, p x p symmetric positive-definite

  int dim() const { return static_cast<int>(scale.rows()); }
  void validate() const {
    const int p = dim();
    if (p < 1 || scale.cols() != p) throw std::invalid_argument("wishart scale must be square");
    if (!(shape > p - 1)) throw std::invalid_argument("wishart shape must exceed p - 1");
    if ((scale - scale.transpose()).cwiseAbs().maxCoeff() >
        1e-10 * std::max(1.0, scale.cwiseAbs().maxCoeff()))
      throw std::invalid_argument("wishart scale must be symmetric");
    chol_spd(scale, "wishart scale");
  }
};

struct DirichletParams {
  VectorXd concentration;  // all entries > 0

  int dim() const { return static_cast<int>(concentration.size()); }
  void validate() const {
    if (concentration.size() < 1) throw std::invalid_argument("dirichlet needs at least one component");
    if (!(concentration.minCoeff() > 0.0)) throw std::invalid_argument("dirichlet concentration must be positive");
  }
};

struct MvNormalParams {
  VectorXd mean;
  MatrixXd precision;  // symmetric positive-definite

  int dim() const { return static_cast<int>(mean.size()); }
  void validate() const {
    if (mean.size() < 1 || precision.rows() != mean.size() || precision.cols() != mean.size())
      throw std::invalid_argument("mvnormal dimensions inconsistent");
    chol_spd(precision, "mvnormal precision");
  }
};

// ---------------------------------------------------------------------------
// Moments

struct GammaMoments {
  double mean;
  double variance;
  double expected_log;  // E[log x] = digamma(a) - log b
};

inline GammaMoments gamma_moments(const GammaParams& g) {
  g.validate();
  return {g.mean(), g.variance(), digamma(g.shape) - std::log(g.rate)};
}

struct WishartMoments {
  MatrixXd mean;            // nu * W^{-1}
  double expected_log_det;  // sum_d digamma((nu+1-d)/2) + p log 2 - log det W
};

inline WishartMoments wishart_moments(const WishartParams& w) {
  w.validate();
  const int p = w.dim();
  const auto llt = chol_spd(w.scale, "wishart scale");
  WishartMoments m;
  m.mean = w.shape * llt.solve(MatrixXd::Identity(p, p));
  m.mean = 0.5 * (m.mean + m.mean.transpose().eval());
  double eld = p * std::log(2.0) - logdet_from_llt(llt);
  for (int d = 1; d <= p; ++d) eld += digamma(0.5 * (w.shape + 1 - d));
  m.expected_log_det = eld;
  return m;
}

// Per-entry variance nu (V_ij^2 + V_ii V_jj) with V = W^{-1}.
inline MatrixXd wishart_variance(const WishartParams& w) {
  w.validate();
  const MatrixXd v = spd_inverse(w.scale, "wishart scale");
  const int p = w.dim();
  MatrixXd out(p, p);
  for (int i = 0; i < p; ++i)
    for (int j = 0; j < p; ++j) out(i, j) = w.shape * (v(i, j) * v(i, j) + v(i, i) * v(j, j));
  return out;
}

struct DirichletMoments {
  VectorXd mean;
  VectorXd expected_log;  // digamma(a_k) - digamma(sum a)
};

inline DirichletMoments dirichlet_moments(const DirichletParams& d) {
  d.validate();
  const double total = d.concentration.sum();
  DirichletMoments m;
  m.mean = d.concentration / total;
  m.expected_log.resize(d.dim());
  const double dg_total = digamma(total);
  for (int k = 0; k < d.dim(); ++k) m.expected_log[k] = digamma(d.concentration[k]) - dg_total;
  return m;
}

inline VectorXd dirichlet_variance(const DirichletParams& d) {
  d.validate();
  const double a = d.concentration.sum();
  return d.concentration.array() * (a - d.concentration.array()) / (a * a * (a + 1.0));
}

// ---------------------------------------------------------------------------
// Log densities. Off-support arguments throw rather than returning NaN/-inf.

inline double gamma_log_pdf(double x, const GammaParams& g) {
  g.validate();
  if (!(x > 0.0)) throw std::domain_error("gamma support is x > 0");
  return g.shape * std::log(g.rate) - std::lgamma(g.shape) + (g.shape - 1.0) * std::log(x) - g.rate * x;
}

inline double wishart_log_pdf(const MatrixXd& x, const WishartParams& w) {
  w.validate();
  const int p = w.dim();
  if (x.rows() != p || x.cols() != p) throw std::invalid_argument("wishart argument has wrong shape");
  Eigen::LLT<MatrixXd> llt(0.5 * (x + x.transpose()));
  if (llt.info() != Eigen::Success) throw std::domain_error("wishart support is SPD matrices");
  const double logdet_x = logdet_from_llt(llt);
  const double logdet_w = spd_logdet(w.scale, "wishart scale");
  return 0.5 * w.shape * logdet_w - 0.5 * w.shape * p * std::log(2.0) -
         log_multigamma(p, 0.5 * w.shape) + 0.5 * (w.shape - p - 1) * logdet_x -
         0.5 * (w.scale * x).trace();
}

inline double dirichlet_log_pdf(const VectorXd& x, const DirichletParams& d) {
  d.validate();
  if (x.size() != d.dim()) throw std::invalid_argument("dirichlet argument has wrong length");
  if (!(x.minCoeff() > 0.0) || std::abs(x.sum() - 1.0) > 1e-9)
    throw std::domain_error("dirichlet support is the open simplex");
  double value = std::lgamma(d.concentration.sum());
  for (int k = 0; k < d.dim(); ++k)
    value += -std::lgamma(d.concentration[k]) + (d.concentration[k] - 1.0) * std::log(x[k]);
  return value;
}

inline double mvnormal_log_pdf(const VectorXd& x, const MvNormalParams& n) {
  n.validate();
  if (x.size() != n.dim()) throw std::invalid_argument("mvnormal argument has wrong length");
  const VectorXd r = x - n.mean;
  return 0.5 * spd_logdet(n.precision, "mvnormal precision") - 0.5 * n.dim() * kLogTwoPi -
         0.5 * r.dot(n.precision * r);
}

// ---------------------------------------------------------------------------
// Entropies

inline double gamma_entropy(const GammaParams& g) {
  g.validate();
  return g.shape - std::log(g.rate) + std::lgamma(g.shape) + (1.0 - g.shape) * digamma(g.shape);
}

inline double wishart_entropy(const WishartParams& w) {
  const int p = w.dim();
  const auto m = wishart_moments(w);
  return -0.5 * w.shape * spd_logdet(w.scale) + 0.5 * w.shape * p * std::log(2.0) +
         log_multigamma(p, 0.5 * w.shape) - 0.5 * (w.shape - p - 1) * m.expected_log_det +
         0.5 * w.shape * p;
}

inline double dirichlet_entropy(const DirichletParams& d) {
  d.validate();
  const int k = d.dim();
  const double total = d.concentration.sum();
  double value = -std::lgamma(total) + (total - k) * digamma(total);
  for (int i = 0; i < k; ++i)
    value += std::lgamma(d.concentration[i]) - (d.concentration[i] - 1.0) * digamma(d.concentration[i]);
  return value;
}

inline double mvnormal_entropy(const MvNormalParams& n) {
  n.validate();
  return 0.5 * n.dim() * (1.0 + kLogTwoPi) - 0.5 * spd_logdet(n.precision, "mvnormal precision");
}

// ---------------------------------------------------------------------------
// Seeded sampling. All samplers consume an explicit Rng so parallel callers
// stay reproducible; batch helpers take a bare seed.

// Gamma(shape, 1) via Marsaglia-Tsang, boosted for shape < 1.
inline double sample_gamma_unit(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape < 1.0) {
    const double u = rng.uniform_pos();
    return sample_gamma_unit(shape + 1.0, rng) * std::pow(u, 1.0 / shape);
  }
  const double d = shape - 1.0 / 3.0;
  const double c = 1.0 / std::sqrt(9.0 * d);
  for (;;) {
    double x, v;
    do {
      x = rng.normal();
      v = 1.0 + c * x;
    } while (v <= 0.0);
    v = v * v * v;
    const double u = rng.uniform_pos();
    if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
    if (std::log(u) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
  }
}

inline double sample(const GammaParams& g, Rng& rng) {
  g.validate();
  return sample_gamma_unit(g.shape, rng) / g.rate;
}

// log of a Gamma(shape, 1) draw; stays finite where the draw itself would
// underflow (shape ~ 1e-3 puts most mass below exp(-700)).
inline double sample_log_gamma_unit(double shape, Rng& rng) {
  if (!(shape > 0.0)) throw std::invalid_argument("gamma shape must be positive");
  if (shape < 1.0) {
    const double u = rng.uniform_pos();
    return std::log(sample_gamma_unit(shape + 1.0, rng)) + std::log(u) / shape;
  }
  return std::log(sample_gamma_unit(shape, rng));
}

inline VectorXd sample(const DirichletParams& d, Rng& rng) {
  d.validate();
  const int k = d.dim();
  VectorXd logs(k);
  for (int i = 0; i < k; ++i) logs[i] = sample_log_gamma_unit(d.concentration[i], rng);
  const double lse = log_sum_exp(logs.transpose());
  return (logs.array() - lse).exp();
}

inline VectorXd sample(const MvNormalParams& n, Rng& rng) {
  n.validate();
  const auto llt = chol_spd(n.precision, "mvnormal precision");
  VectorXd z(n.dim());
  for (int i = 0; i < n.dim(); ++i) z[i] = rng.normal();
  // cov = P^{-1} = L^{-T} L^{-1}, so x = mean + L^{-T} z.
  return n.mean + llt.matrixU().solve(z);
}

// Bartlett decomposition; works for any real shape > p - 1.
inline MatrixXd sample(const WishartParams& w, Rng& rng) {
  w.validate();
  const int p = w.dim();
  const MatrixXd v = spd_inverse(w.scale, "wishart scale");  // conventional scale V = W^{-1}
  const MatrixXd l = chol_spd(v, "wishart scale inverse").matrixL();
  MatrixXd a = MatrixXd::Zero(p, p);
  for (int i = 0; i < p; ++i) {
    a(i, i) = std::sqrt(2.0 * sample_gamma_unit(0.5 * (w.shape - i), rng));
    for (int j = 0; j < i; ++j) a(i, j) = rng.normal();
  }
  const MatrixXd la = l * a;
  return la * la.transpose();
}

inline VectorXd sample_many(const GammaParams& g, std::uint64_t seed, int count) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Rng rng(seed);
  VectorXd out(count);
  for (int i = 0; i < count; ++i) out[i] = sample(g, rng);
  return out;
}

inline std::vector<VectorXd> sample_many(const DirichletParams& d, std::uint64_t seed, int count) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Rng rng(seed);
  std::vector<VectorXd> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(sample(d, rng));
  return out;
}

inline std::vector<MatrixXd> sample_many(const WishartParams& w, std::uint64_t seed, int count) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Rng rng(seed);
  std::vector<MatrixXd> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(sample(w, rng));
  return out;
}

inline std::vector<VectorXd> sample_many(const MvNormalParams& n, std::uint64_t seed, int count) {
  if (count < 1) throw std::invalid_argument("count must be >= 1");
  Rng rng(seed);
  std::vector<VectorXd> out;
  out.reserve(count);
  for (int i = 0; i < count; ++i) out.push_back(sample(n, rng));
  return out;
}

}  // namespace edgeless
