#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fracmap/errors.hpp"
#include "fracmap/extension.hpp"
#include "fracmap/parallel.hpp"

namespace fracmap {

// Finite-volume grid for div(|z|^a grad w) = 0 on a box in R^{n+1} with a
// ball-shaped interior and Dirichlet data elsewhere. Cells are centered at
// (x_i, z_k); no level sits at z = 0. Face conductances use |z_k|^a along x
// and the exact resistance integral of |z|^{-a} across z faces, which keeps
// every weight finite and positive for all s in (0,1).
struct WeightedGrid {
  int n = 1;       // boundary dimension; the grid lives in R^{n+1}
  double a = 0.0;  // weight exponent 1 - 2s
  double hx = 0.0;
  int x_axis = 0;  // nodes per x axis, odd, centered at 0

  std::vector<double> z;        // level midpoints, strictly increasing
  std::vector<double> z_thick;  // cell thickness per level
  std::vector<double> gz;       // conductance per unit area between levels k, k+1

  std::vector<double> center;   // ball center (x part; z component = 0)
  double radius = 0.0;
  std::vector<uint8_t> interior;

  std::size_t x_count() const {
    std::size_t c = 1;
    for (int i = 0; i < n; ++i) c *= std::size_t(x_axis);
    return c;
  }
  std::size_t node_count() const { return x_count() * z.size(); }
  int half_span() const { return (x_axis - 1) / 2; }
  double x_coord(int k) const { return (k - half_span()) * hx; }

  std::array<int, 3> x_index(std::size_t xi) const {
    std::array<int, 3> mi{};
    for (int a2 = n - 1; a2 >= 0; --a2) {
      mi[a2] = int(xi % std::size_t(x_axis));
      xi /= std::size_t(x_axis);
    }
    return mi;
  }
  std::size_t x_flat(const std::array<int, 3>& mi) const {
    std::size_t f = 0;
    for (int a2 = 0; a2 < n; ++a2) f = f * std::size_t(x_axis) + std::size_t(mi[a2]);
    return f;
  }
  std::size_t flat(std::size_t xi, std::size_t k) const { return k * x_count() + xi; }
};

// Antiderivative of |z|^{-a}: G(t) = sign(t) |t|^{1-a} / (1-a).
inline double resistance_antiderivative(double t, double a) {
  if (t == 0.0) return 0.0;
  const double s = t > 0.0 ? 1.0 : -1.0;
  return s * std::pow(std::abs(t), 1.0 - a) / (1.0 - a);
}

inline WeightedGrid make_weighted_grid(int n, double a, double hx, int x_axis,
                                       std::vector<double> z_levels,
                                       const std::vector<double>& center, double radius) {
  if (x_axis < 3 || x_axis % 2 == 0) throw config_error("x_axis must be odd and >= 3");
  if (z_levels.size() < 3) throw config_error("need at least 3 z levels");
  WeightedGrid g;
  g.n = n;
  g.a = a;
  g.hx = hx;
  g.x_axis = x_axis;
  g.z = std::move(z_levels);
  for (std::size_t k = 0; k + 1 < g.z.size(); ++k)
    if (g.z[k + 1] <= g.z[k]) throw config_error("z levels must be strictly increasing");
  for (const double zz : g.z)
    if (zz == 0.0) throw config_error("no level may sit at z = 0");

  const std::size_t M = g.z.size();
  g.z_thick.resize(M);
  for (std::size_t k = 0; k < M; ++k) {
    const double lo = (k == 0) ? g.z[0] - 0.5 * (g.z[1] - g.z[0]) : 0.5 * (g.z[k - 1] + g.z[k]);
    const double hi = (k + 1 == M) ? g.z[M - 1] + 0.5 * (g.z[M - 1] - g.z[M - 2])
                                   : 0.5 * (g.z[k] + g.z[k + 1]);
    g.z_thick[k] = hi - lo;
  }
  g.gz.resize(M - 1);
  for (std::size_t k = 0; k + 1 < M; ++k) {
    const double R = resistance_antiderivative(g.z[k + 1], a) -
                     resistance_antiderivative(g.z[k], a);
    g.gz[k] = 1.0 / R;
  }

  g.center.assign(center.begin(), center.end());
  g.radius = radius;
  g.interior.assign(g.node_count(), 0);
  const std::size_t xc = g.x_count();
  for (std::size_t k = 0; k < M; ++k) {
    if (k == 0 || k + 1 == M) continue;  // outer shells stay Dirichlet
    for (std::size_t xi = 0; xi < xc; ++xi) {
      const auto mi = g.x_index(xi);
      bool on_edge = false;
      double d2 = g.z[k] * g.z[k];
      for (int a2 = 0; a2 < n; ++a2) {
        if (mi[a2] == 0 || mi[a2] == x_axis - 1) on_edge = true;
        const double dx = g.x_coord(mi[a2]) - center[a2];
        d2 += dx * dx;
      }
      if (!on_edge && std::sqrt(d2) < radius) g.interior[g.flat(xi, k)] = 1;
    }
  }
  return g;
}

// Symmetric-in-z grid with uniform spacing hz (levels at +-(k+1/2) hz).
inline WeightedGrid make_symmetric_weighted_grid(int n, double a, double hx, int x_axis,
                                                 double hz, int levels_per_side,
                                                 const std::vector<double>& center,
                                                 double radius) {
  std::vector<double> z;
  for (int k = levels_per_side - 1; k >= 0; --k) z.push_back(-(k + 0.5) * hz);
  for (int k = 0; k < levels_per_side; ++k) z.push_back((k + 0.5) * hz);
  return make_weighted_grid(n, a, hx, x_axis, std::move(z), center, radius);
}

struct WeightedSolveStats {
  int iterations = 0;
  double relative_residual = 0.0;
  bool energy_monotone = true;  // CG quadratic energy decreased every iteration
};

namespace detail_pde {

// conductances of the faces around node (xi, k)
template <class F>
void visit_faces(const WeightedGrid& g, std::size_t xi, std::size_t k, F&& f) {
  const auto mi = g.x_index(xi);
  const double za = std::pow(std::abs(g.z[k]), g.a);
  const double ax = za * g.z_thick[k] * std::pow(g.hx, g.n - 2);
  for (int a2 = 0; a2 < g.n; ++a2) {
    auto mm = mi;
    if (mm[a2] > 0) {
      mm[a2] -= 1;
      f(g.flat(g.x_flat(mm), k), ax);
      mm[a2] += 1;
    }
    if (mm[a2] + 1 < g.x_axis) {
      mm[a2] += 1;
      f(g.flat(g.x_flat(mm), k), ax);
    }
  }
  const double az = std::pow(g.hx, g.n);
  if (k > 0) f(g.flat(xi, k - 1), az * g.gz[k - 1]);
  if (k + 1 < g.z.size()) f(g.flat(xi, k + 1), az * g.gz[k]);
}

}  // namespace detail_pde

// Conjugate gradient with Jacobi preconditioning on the interior unknowns.
// `values` supplies the Dirichlet data (and the initial interior guess); the
// solution is written back in place.
inline WeightedSolveStats solve_weighted_dirichlet(const WeightedGrid& g,
                                                   std::vector<double>& values,
                                                   double tol = 1e-10,
                                                   std::size_t max_iters = 0) {
  const std::size_t N = g.node_count();
  if (values.size() != N) throw std::invalid_argument("boundary field size mismatch");
  for (const double v : values)
    if (!std::isfinite(v)) throw std::invalid_argument("boundary values must be finite");

  std::vector<std::size_t> unknown;
  std::vector<int64_t> slot(N, -1);
  for (std::size_t p = 0; p < N; ++p)
    if (g.interior[p]) {
      slot[p] = int64_t(unknown.size());
      unknown.push_back(p);
    }
  const std::size_t m = unknown.size();
  if (m == 0) return {};
  if (max_iters == 0) max_iters = 100 * m + 1000;

  std::vector<double> diag(m, 0.0), b(m, 0.0);
  for (std::size_t q = 0; q < m; ++q) {
    const std::size_t p = unknown[q];
    const std::size_t xi = p % g.x_count();
    const std::size_t k = p / g.x_count();
    detail_pde::visit_faces(g, xi, k, [&](std::size_t nb, double cond) {
      diag[q] += cond;
      if (!g.interior[nb]) b[q] += cond * values[nb];
    });
  }

  const auto apply = [&](const std::vector<double>& x, std::vector<double>& out) {
    parallel_for_chunks(0, m, 1024, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t q = lo; q < hi; ++q) {
        const std::size_t p = unknown[q];
        const std::size_t xi = p % g.x_count();
        const std::size_t k = p / g.x_count();
        double acc = diag[q] * x[q];
        detail_pde::visit_faces(g, xi, k, [&](std::size_t nb, double cond) {
          if (g.interior[nb]) acc -= cond * x[slot[nb]];
        });
        out[q] = acc;
      }
    });
  };

  std::vector<double> x(m), r(m), zv(m), pdir(m), Ap(m);
  for (std::size_t q = 0; q < m; ++q) x[q] = values[unknown[q]];
  apply(x, Ap);
  double bnorm = 0.0;
  for (std::size_t q = 0; q < m; ++q) {
    r[q] = b[q] - Ap[q];
    bnorm += b[q] * b[q];
  }
  bnorm = std::sqrt(bnorm);
  if (bnorm == 0.0) bnorm = 1.0;

  WeightedSolveStats stats;
  double rz = 0.0;
  for (std::size_t q = 0; q < m; ++q) {
    zv[q] = r[q] / diag[q];
    rz += r[q] * zv[q];
    pdir[q] = zv[q];
  }
  double rnorm = 0.0;
  for (std::size_t q = 0; q < m; ++q) rnorm += r[q] * r[q];
  rnorm = std::sqrt(rnorm);

  std::size_t it = 0;
  while (rnorm / bnorm > tol && it < max_iters) {
    apply(pdir, Ap);
    double pAp = 0.0;
    for (std::size_t q = 0; q < m; ++q) pAp += pdir[q] * Ap[q];
    if (pAp <= 0.0) throw numerical_error("weighted CG: lost positive definiteness");
    const double alpha = rz / pAp;
    // each step lowers the quadratic energy by alpha rz / 2
    if (!(alpha * rz > 0.0) && rnorm > 0.0) stats.energy_monotone = false;
    for (std::size_t q = 0; q < m; ++q) {
      x[q] += alpha * pdir[q];
      r[q] -= alpha * Ap[q];
    }

    double rz_new = 0.0;
    rnorm = 0.0;
    for (std::size_t q = 0; q < m; ++q) {
      zv[q] = r[q] / diag[q];
      rz_new += r[q] * zv[q];
      rnorm += r[q] * r[q];
    }
    rnorm = std::sqrt(rnorm);
    const double beta = rz_new / rz;
    rz = rz_new;
    for (std::size_t q = 0; q < m; ++q) pdir[q] = zv[q] + beta * pdir[q];
    ++it;
  }
  stats.iterations = int(it);
  stats.relative_residual = rnorm / bnorm;
  if (stats.relative_residual > tol)
    throw numerical_error("weighted CG did not converge: relative residual " +
                          std::to_string(stats.relative_residual));
  for (std::size_t q = 0; q < m; ++q) values[unknown[q]] = x[q];
  return stats;
}

struct MaxPrincipleReport {
  double interior_min = 0.0, interior_max = 0.0;
  double boundary_min = 0.0, boundary_max = 0.0;
  bool pass = false;
};

// Interior values must lie inside the Dirichlet range (exact for the M-matrix
// stencil, tolerance 1e-12). The boundary scan is restricted to Dirichlet
// nodes adjacent to the interior, matching the sphere of the continuum lemma.
inline MaxPrincipleReport check_max_principle(const WeightedGrid& g,
                                              const std::vector<double>& values) {
  MaxPrincipleReport rep;
  bool has_i = false, has_b = false;
  for (std::size_t p = 0; p < g.node_count(); ++p) {
    if (g.interior[p]) {
      if (!has_i) {
        rep.interior_min = rep.interior_max = values[p];
        has_i = true;
      }
      rep.interior_min = std::min(rep.interior_min, values[p]);
      rep.interior_max = std::max(rep.interior_max, values[p]);
      const std::size_t xi = p % g.x_count();
      const std::size_t k = p / g.x_count();
      detail_pde::visit_faces(g, xi, k, [&](std::size_t nb, double) {
        if (g.interior[nb]) return;
        if (!has_b) {
          rep.boundary_min = rep.boundary_max = values[nb];
          has_b = true;
        }
        rep.boundary_min = std::min(rep.boundary_min, values[nb]);
        rep.boundary_max = std::max(rep.boundary_max, values[nb]);
      });
    }
  }
  rep.pass = has_i && has_b && rep.interior_min >= rep.boundary_min - 1e-12 &&
             rep.interior_max <= rep.boundary_max + 1e-12;
  return rep;
}

// Discrete weighted gradient energy over the ball B_rho(center), sampled at
// cell centers (central differences, |z_k|^a weight). Optionally reports the
// discrete volume of the same cell set.
inline double weighted_ball_energy(const WeightedGrid& g, const std::vector<double>& w,
                                   double rho, double* volume_out = nullptr) {
  const std::size_t xc = g.x_count();
  double total = 0.0, volume = 0.0;
  for (std::size_t k = 0; k < g.z.size(); ++k) {
    for (std::size_t xi = 0; xi < xc; ++xi) {
      const auto mi = g.x_index(xi);
      double d2 = g.z[k] * g.z[k];
      bool edge = (k == 0 || k + 1 == g.z.size());
      for (int a2 = 0; a2 < g.n; ++a2) {
        if (mi[a2] == 0 || mi[a2] == g.x_axis - 1) edge = true;
        const double dx = g.x_coord(mi[a2]) - g.center[a2];
        d2 += dx * dx;
      }
      if (edge || d2 > rho * rho) continue;
      double g2 = 0.0;
      for (int a2 = 0; a2 < g.n; ++a2) {
        auto mm = mi, mp = mi;
        mm[a2] -= 1;
        mp[a2] += 1;
        const double der =
            (w[g.flat(g.x_flat(mp), k)] - w[g.flat(g.x_flat(mm), k)]) / (2.0 * g.hx);
        g2 += der * der;
      }
      const double hm = g.z[k] - g.z[k - 1], hp = g.z[k + 1] - g.z[k];
      const double vm = w[g.flat(xi, k - 1)], vp = w[g.flat(xi, k + 1)], v0 = w[g.flat(xi, k)];
      const double der = (vp * hm * hm - vm * hp * hp + v0 * (hp * hp - hm * hm)) /
                         (hm * hp * (hm + hp));
      g2 += der * der;
      const double vol = std::pow(g.hx, g.n) * g.z_thick[k];
      total += std::pow(std::abs(g.z[k]), g.a) * g2 * vol;
      volume += vol;
    }
  }
  if (volume_out) *volume_out = volume;
  return total;
}

struct MonotonicityReport {
  std::vector<double> radii;
  std::vector<double> effective_radii;  // volume-consistent radius per ball
  std::vector<double> ratios;           // r_eff^{-(n+2-2s)} * energy(B_r)
  double max_negative_increment_rel = 0.0;
};

// Ratio rho -> rho^{-(n+2-2s)} int_{B_rho} |z|^a |grad w|^2 must be
// nondecreasing for solutions centered on {z=0} (z-symmetric when s < 1/2).
// The normalization uses the volume-consistent effective radius of the cell
// set, which removes the leading ball-membership granularity; both radii
// coincide as h -> 0.
inline MonotonicityReport check_energy_monotonicity(const WeightedGrid& g,
                                                    const std::vector<double>& w, double s,
                                                    const std::vector<double>& radii) {
  MonotonicityReport rep;
  rep.radii = radii;
  const double expo = g.n + 2.0 - 2.0 * s;
  const double unit_ball = std::pow(std::numbers::pi, 0.5 * (g.n + 1)) /
                           gamma_fn(0.5 * (g.n + 1) + 1.0);
  for (const double r : radii) {
    double vol = 0.0;
    const double e = weighted_ball_energy(g, w, r, &vol);
    const double reff = std::pow(vol / unit_ball, 1.0 / (g.n + 1));
    rep.effective_radii.push_back(reff);
    rep.ratios.push_back(std::pow(reff, -expo) * e);
  }
  for (std::size_t t = 0; t + 1 < rep.ratios.size(); ++t) {
    const double hi = std::max(rep.ratios[t + 1], 1e-300);
    const double drop = (rep.ratios[t] - rep.ratios[t + 1]) / std::max(hi, rep.ratios[t]);
    rep.max_negative_increment_rel = std::max(rep.max_negative_increment_rel, drop);
  }
  return rep;
}

// Sup over interior cells of the discrete flux divergence of a Poisson
// extension, per unit cell volume; cross-check that extend() approximately
// solves div(z^a grad v) = 0. The first level above the trace carries the
// Neumann data and is excluded; an optional floor also excludes the layer
// z < z_floor, where the kernel concentrates below the lattice resolution
// and no fixed-h quadrature represents the equation.
inline double pde_residual(const ExtensionField& v, double z_floor = 0.0) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  const double a = lat.params.a;
  const std::size_t M = grid.levels();
  double sup = 0.0;
  for (std::size_t k = 1; k + 1 < M; ++k) {
    if (grid.zmid[k] < z_floor) continue;
    const double za = std::pow(grid.zmid[k], a);
    const double g_up = 1.0 / (resistance_antiderivative(grid.zmid[k + 1], a) -
                               resistance_antiderivative(grid.zmid[k], a));
    const double g_dn = 1.0 / (resistance_antiderivative(grid.zmid[k], a) -
                               resistance_antiderivative(grid.zmid[k - 1], a));
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      const auto mi = lat.multi_index(i);
      bool edge = false;
      for (int a2 = 0; a2 < n; ++a2)
        if (mi[a2] == 0 || mi[a2] == lat.axis_nodes - 1) edge = true;
      if (edge) continue;
      for (int c = 0; c < v.d; ++c) {
        double flux = 0.0;
        for (int a2 = 0; a2 < n; ++a2) {
          auto mm = mi, mp = mi;
          mm[a2] -= 1;
          mp[a2] += 1;
          flux += za *
                  (v.at(lat.flat_index(mp), k)[c] - 2.0 * v.at(i, k)[c] +
                   v.at(lat.flat_index(mm), k)[c]) /
                  (lat.h * lat.h) * grid.thick[k];
        }
        flux += g_up * (v.at(i, k + 1)[c] - v.at(i, k)[c]);
        flux -= g_dn * (v.at(i, k)[c] - v.at(i, k - 1)[c]);
        sup = std::max(sup, std::abs(flux / grid.thick[k]));
      }
    }
  }
  return sup;
}

}  // namespace fracmap
