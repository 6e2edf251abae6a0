#pragma once

#include <cmath>
#include <cstdint>

#include "fracmap/errors.hpp"

namespace fracmap {

namespace detail {

template <class F>
double simpson(F&& f, double a, double fa, double b, double fb, double m, double fm) {
  return (b - a) / 6.0 * (fa + 4.0 * fm + fb);
}

template <class F>
double adapt(F&& f, double a, double fa, double b, double fb, double m, double fm,
             double whole, double tol, int depth, int force) {
  const double lm = 0.5 * (a + m), rm = 0.5 * (m + b);
  const double flm = f(lm), frm = f(rm);
  const double left = simpson(f, a, fa, m, fm, lm, flm);
  const double right = simpson(f, m, fm, b, fb, rm, frm);
  const double delta = left + right - whole;
  // `force` levels are always subdivided: periodic or spiky integrands can
  // alias the first probe points and fake convergence
  if (depth <= 0 || (force <= 0 && std::abs(delta) <= 15.0 * tol))
    return left + right + delta / 15.0;
  return adapt(f, a, fa, m, fm, lm, flm, left, 0.5 * tol, depth - 1, force - 1) +
         adapt(f, m, fm, b, fb, rm, frm, right, 0.5 * tol, depth - 1, force - 1);
}

}  // namespace detail

// Adaptive Simpson integration to an absolute tolerance.
template <class F>
double integrate_adaptive(F&& f, double a, double b, double abs_tol, int max_depth = 48,
                          int min_depth = 5) {
  if (a == b) return 0.0;
  const double m = 0.5 * (a + b);
  const double fa = f(a), fb = f(b), fm = f(m);
  const double whole = detail::simpson(f, a, fa, b, fb, m, fm);
  return detail::adapt(f, a, fa, b, fb, m, fm, whole, abs_tol, max_depth, min_depth);
}

// Integral over [a, infinity) for integrands with power-law decay: geometric
// panels are summed until an increment falls below the tolerance.
template <class F>
double integrate_to_infinity(F&& f, double a, double abs_tol, int max_panels = 80) {
  double lo = a;
  double hi = (a > 0.0) ? 2.0 * a : 1.0;
  if (hi <= lo) hi = lo + 1.0;
  double total = 0.0;
  for (int p = 0; p < max_panels; ++p) {
    const double piece = integrate_adaptive(f, lo, hi, 0.25 * abs_tol);
    total += piece;
    if (p > 2 && std::abs(piece) < 0.5 * abs_tol) return total;
    lo = hi;
    hi *= 2.0;
  }
  throw numerical_error("integrate_to_infinity: tail did not converge");
}

}  // namespace fracmap
