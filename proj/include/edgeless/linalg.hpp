#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace edgeless {

using Eigen::MatrixXd;
using Eigen::VectorXd;

// Cholesky factorization that refuses non-SPD input instead of limping on.
inline Eigen::LLT<MatrixXd> chol_spd(const MatrixXd& m, const char* what = "matrix") {
  Eigen::LLT<MatrixXd> llt(m);
  if (llt.info() != Eigen::Success)
    throw std::runtime_error(std::string(what) + " is not positive-definite");
  return llt;
}

inline double logdet_from_llt(const Eigen::LLT<MatrixXd>& llt) {
  return 2.0 * llt.matrixLLT().diagonal().array().log().sum();
}

inline double spd_logdet(const MatrixXd& m, const char* what = "matrix") {
  return logdet_from_llt(chol_spd(m, what));
}

inline MatrixXd spd_inverse(const MatrixXd& m, const char* what = "matrix") {
  const auto llt = chol_spd(m, what);
  return llt.solve(MatrixXd::Identity(m.rows(), m.cols()));
}

// Symmetrize within tolerance; larger asymmetry signals an upstream bug.
inline MatrixXd symmetrized(const MatrixXd& m, double rel_tol = 1e-10) {
  const double asym = (m - m.transpose()).cwiseAbs().maxCoeff();
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if (asym > rel_tol * scale)
    throw std::runtime_error("matrix asymmetry exceeds tolerance");
  return 0.5 * (m + m.transpose());
}

inline double log_sum_exp(const Eigen::Ref<const Eigen::RowVectorXd>& v) {
  const double m = v.maxCoeff();
  if (!std::isfinite(m)) return m;  // all -inf stays -inf
  return m + std::log((v.array() - m).exp().sum());
}

}  // namespace edgeless
