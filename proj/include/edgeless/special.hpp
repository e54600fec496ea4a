#pragma once

#include <cmath>
#include <stdexcept>

namespace edgeless {

// Digamma via upward recurrence plus the asymptotic series. Accurate to
// ~1e-14 for x > 0, which is all the model ever evaluates.
inline double digamma(double x) {
  if (!(x > 0.0)) throw std::domain_error("digamma requires x > 0");
  double value = 0.0;
  while (x < 6.0) {
    value -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x;
  const double inv2 = inv * inv;
  value += std::log(x) - 0.5 * inv -
           inv2 * (1.0 / 12.0 -
                   inv2 * (1.0 / 120.0 -
                           inv2 * (1.0 / 252.0 -
                                   inv2 * (1.0 / 240.0 - inv2 * (1.0 / 132.0)))));
  return value;
}

// log of the multivariate gamma function, log Gamma_p(a).
inline double log_multigamma(int p, double a) {
  if (p < 1) throw std::invalid_argument("log_multigamma requires p >= 1");
  if (!(a > 0.5 * (p - 1))) throw std::domain_error("log_multigamma requires a > (p-1)/2");
  double value = 0.25 * p * (p - 1) * std::log(3.141592653589793238462643383280);
  for (int j = 1; j <= p; ++j) value += std::lgamma(a + 0.5 * (1 - j));
  return value;
}

}  // namespace edgeless
