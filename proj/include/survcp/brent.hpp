#pragma once

#include <cmath>
#include <utility>

namespace survcp {

// Brent's bounded minimization (golden section + parabolic interpolation).
// Never evaluates at the exact bounds; callers that care about boundary
// optima should compare f(lo), f(hi) against the returned interior value.
template <class F>
std::pair<double, double> brent_min(F&& f, double lo, double hi,
                                    double xatol = 1e-9, int max_iter = 500) {
  const double golden = 0.5 * (3.0 - std::sqrt(5.0));
  const double sqrt_eps = 1.4901161193847656e-8;
  double a = lo, b = hi;
  double x = a + golden * (b - a), w = x, v = x;
  double fx = f(x), fw = fx, fv = fx;
  double d = 0.0, e = 0.0;
  for (int it = 0; it < max_iter; ++it) {
    const double m = 0.5 * (a + b);
    const double tol1 = sqrt_eps * std::abs(x) + xatol / 3.0;
    const double tol2 = 2.0 * tol1;
    if (std::abs(x - m) <= tol2 - 0.5 * (b - a)) break;
    bool take_golden = true;
    if (std::abs(e) > tol1) {
      double r = (x - w) * (fx - fv);
      double q = (x - v) * (fx - fw);
      double p = (x - v) * q - (x - w) * r;
      q = 2.0 * (q - r);
      if (q > 0.0) p = -p;
      q = std::abs(q);
      const double e_prev = e;
      e = d;
      if (std::abs(p) < std::abs(0.5 * q * e_prev) && p > q * (a - x) &&
          p < q * (b - x)) {
        d = p / q;
        const double u = x + d;
        if (u - a < tol2 || b - u < tol2) d = (x < m) ? tol1 : -tol1;
        take_golden = false;
      }
    }
    if (take_golden) {
      e = (x < m) ? b - x : a - x;
      d = golden * e;
    }
    const double u = (std::abs(d) >= tol1) ? x + d : x + (d > 0 ? tol1 : -tol1);
    const double fu = f(u);
    if (fu <= fx) {
      if (u < x) b = x; else a = x;
      v = w; fv = fw;
      w = x; fw = fx;
      x = u; fx = fu;
    } else {
      if (u < x) a = u; else b = u;
      if (fu <= fw || w == x) {
        v = w; fv = fw;
        w = u; fw = fu;
      } else if (fu <= fv || v == x || v == w) {
        v = u; fv = fu;
      }
    }
  }
  return {x, fx};
}

template <class F>
std::pair<double, double> brent_max(F&& f, double lo, double hi,
                                    double xatol = 1e-9, int max_iter = 500) {
  auto [x, fneg] = brent_min([&](double t) { return -f(t); }, lo, hi, xatol,
                             max_iter);
  return {x, -fneg};
}

}  // namespace survcp
