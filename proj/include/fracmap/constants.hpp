#pragma once

#include <cmath>
#include <numbers>

#include "fracmap/errors.hpp"
#include "fracmap/quadrature.hpp"

namespace fracmap {

// Gamma function by the Lanczos approximation (g = 7, 9 coefficients),
// with the reflection formula for arguments below 1/2.
inline double gamma_fn(double x) {
  if (!(x > 0.0)) throw std::domain_error("gamma_fn: argument must be positive");

  static constexpr double g = 7.0;
  static constexpr double coeff[9] = {
      0.99999999999980993,      676.5203681218851,     -1259.1392167224028,
      771.32342877765313,      -176.61502916214059,    12.507343278686905,
      -0.13857109526572012,     9.9843695780195716e-6, 1.5056327351493116e-7};

  if (x < 0.5) {
    // Gamma(x) = pi / (sin(pi x) Gamma(1 - x))
    return std::numbers::pi / (std::sin(std::numbers::pi * x) * gamma_fn(1.0 - x));
  }

  const double z = x - 1.0;
  double a = coeff[0];
  for (int k = 1; k < 9; ++k) a += coeff[k] / (z + k);
  const double t = z + g + 0.5;
  return std::sqrt(2.0 * std::numbers::pi) * std::pow(t, z + 0.5) * std::exp(-t) * a;
}

namespace detail {
inline void check_order(int n, double s) {
  if (n < 1) throw std::domain_error("spatial dimension must be >= 1");
  if (!(s > 0.0 && s < 1.0)) throw std::domain_error("order s must lie in (0,1)");
}
}  // namespace detail

// Kernel normalization gamma_{n,s} = s 2^{2s} pi^{-n/2} Gamma((n+2s)/2) / Gamma(1-s).
inline double gamma_ns(int n, double s) {
  detail::check_order(n, s);
  return s * std::pow(2.0, 2.0 * s) * std::pow(std::numbers::pi, -0.5 * n) *
         gamma_fn(0.5 * (n + 2.0 * s)) / gamma_fn(1.0 - s);
}

// Poisson kernel normalization sigma_{n,s} = pi^{-n/2} Gamma((n+2s)/2) / Gamma(s).
inline double sigma_ns(int n, double s) {
  detail::check_order(n, s);
  return std::pow(std::numbers::pi, -0.5 * n) * gamma_fn(0.5 * (n + 2.0 * s)) / gamma_fn(s);
}

// Extension energy normalization delta_s = 2^{2s-1} Gamma(s) / Gamma(1-s).
inline double delta_s(double s) {
  detail::check_order(1, s);
  return std::pow(2.0, 2.0 * s - 1.0) * gamma_fn(s) / gamma_fn(1.0 - s);
}

// alpha_{n,s} = int_{R^{n-1}} (1+|x'|^2)^{-(n+2s)/2} dx', returned both as the
// closed form gamma_{1,s}/gamma_{n,s} and by radial quadrature; keeping the two
// routes separate makes the cross-check meaningful.
struct AlphaResult {
  double quadrature;
  double closed_form;
};

// Surface measure of the unit sphere S^{m-1} in R^m.
inline double sphere_area(int m) {
  if (m < 1) throw std::domain_error("sphere_area: dimension must be >= 1");
  if (m == 1) return 2.0;  // S^0 = two points
  return 2.0 * std::pow(std::numbers::pi, 0.5 * m) / gamma_fn(0.5 * m);
}

inline AlphaResult alpha_ns(int n, double s) {
  detail::check_order(n, s);
  if (n < 2) throw std::domain_error("alpha_ns requires n >= 2");

  const double q = 0.5 * (n + 2.0 * s);
  const auto radial = [n, q](double r) {
    return std::pow(r, n - 2) * std::pow(1.0 + r * r, -q);
  };
  // Split at r=1; the outer part transforms to a finite interval with t = 1/r.
  const double tol = 1e-9;
  const double inner = integrate_adaptive(radial, 0.0, 1.0, 0.5 * tol);
  const auto outer = [n, q](double t) {
    // r = 1/t, dr = dt/t^2
    return std::pow(t, 2.0 * q - n) * std::pow(t * t + 1.0, -q);
  };
  const double tail = integrate_adaptive(outer, 0.0, 1.0, 0.5 * tol);

  AlphaResult out;
  out.quadrature = sphere_area(n - 1) * (inner + tail);
  out.closed_form = gamma_ns(1, s) / gamma_ns(n, s);
  return out;
}

// Dimension/order parameters with every derived analytic constant attached.
struct FracParams {
  int n = 1;        // spatial dimension
  double s = 0.5;   // fractional order in (0,1)
  int d = 1;        // target dimension (sphere S^{d-1})
  double gamma = 0.0;  // gamma_{n,s}
  double sigma = 0.0;  // sigma_{n,s}
  double delta = 0.0;  // delta_s
  double a = 0.0;      // extension weight exponent 1-2s

  static FracParams make(int n, double s, int d = 1) {
    detail::check_order(n, s);
    if (d < 1) throw std::domain_error("target dimension must be >= 1");
    FracParams p;
    p.n = n;
    p.s = s;
    p.d = d;
    p.gamma = gamma_ns(n, s);
    p.sigma = sigma_ns(n, s);
    p.delta = delta_s(s);
    p.a = 1.0 - 2.0 * s;
    return p;
  }
};

}  // namespace fracmap
