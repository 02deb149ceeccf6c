#pragma once

#include <cmath>

namespace survcp {

// psi(x) for x > 0: recurrence until x >= 8, then the asymptotic series.
// Absolute error below 1e-11 on [1e-2, inf).
inline double digamma(double x) {
  double acc = 0.0;
  while (x < 8.0) {
    acc -= 1.0 / x;
    x += 1.0;
  }
  const double inv = 1.0 / x, inv2 = inv * inv;
  double s = std::log(x) - 0.5 * inv;
  s -= inv2 * (1.0 / 12 - inv2 * (1.0 / 120 - inv2 * (1.0 / 252 - inv2 / 240)));
  return acc + s;
}

}  // namespace survcp
