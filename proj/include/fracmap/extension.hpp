#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <string>
#include <vector>

#include "fracmap/lattice.hpp"
#include "fracmap/nonlocal.hpp"
#include "fracmap/parallel.hpp"
#include "fracmap/quadrature.hpp"

namespace fracmap {

// Half-space grid over the lattice: the base nodes carry the trace, vertical
// cells have strictly positive midpoints z_1 < ... < z_M (z_1 = h_z/2), with
// geometrically growing thickness when ratio > 1.
struct HalfSpaceGrid {
  const Lattice* lat = nullptr;
  std::vector<double> faces;  // M+1 values, faces[0] = 0
  std::vector<double> zmid;   // M cell midpoints
  std::vector<double> thick;  // M cell thicknesses

  std::size_t levels() const { return zmid.size(); }
  double z_max() const { return faces.back(); }
};

// Builds M levels reaching z_max with first cell thickness h_z; the growth
// ratio is solved by bisection. h_z defaults to the lattice spacing.
inline HalfSpaceGrid build_half_space_grid(const Lattice& lat, std::size_t levels,
                                           double z_max, double first_thickness = 0.0) {
  if (levels < 4) throw config_error("extension grid needs at least 4 levels");
  if (!(z_max > 0.0)) throw config_error("z_max must be positive");
  const double hz = first_thickness > 0.0 ? first_thickness : lat.h;
  if (hz * levels > z_max * (1.0 + 1e-12)) {
    // uniform spacing already overshoots: shrink cells uniformly
    return build_half_space_grid(lat, levels, z_max, z_max / double(levels));
  }

  // solve hz (rho^M - 1)/(rho - 1) = z_max for rho >= 1
  const double target = z_max / hz;
  const auto total = [&](double rho) {
    if (std::abs(rho - 1.0) < 1e-14) return double(levels);
    return (std::pow(rho, double(levels)) - 1.0) / (rho - 1.0);
  };
  double lo = 1.0, hi = 2.0;
  while (total(hi) < target) hi *= 2.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (total(mid) < target ? lo : hi) = mid;
  }
  const double rho = 0.5 * (lo + hi);

  HalfSpaceGrid g;
  g.lat = &lat;
  g.faces.resize(levels + 1);
  g.zmid.resize(levels);
  g.thick.resize(levels);
  g.faces[0] = 0.0;
  double t = hz;
  for (std::size_t k = 0; k < levels; ++k) {
    g.faces[k + 1] = g.faces[k] + t;
    g.thick[k] = t;
    g.zmid[k] = 0.5 * (g.faces[k] + g.faces[k + 1]);
    t *= rho;
  }
  g.faces[levels] = z_max;  // absorb the bisection slack into the top cell
  g.thick[levels - 1] = g.faces[levels] - g.faces[levels - 1];
  g.zmid[levels - 1] = 0.5 * (g.faces[levels - 1] + g.faces[levels]);
  return g;
}

// Fractional Poisson kernel  P(x, z) = sigma z^{2s} / (|x|^2 + z^2)^{(n+2s)/2}.
inline double poisson_kernel(const FracParams& p, double dist2, double z) {
  if (!(z > 0.0)) throw std::domain_error("poisson_kernel: z must be positive");
  return p.sigma * std::pow(z, 2.0 * p.s) *
         std::pow(dist2 + z * z, -0.5 * (p.n + 2.0 * p.s));
}

// Kernel mass int_{R^n} P(x,z) dx by radial quadrature; equals 1 for every z.
inline double poisson_mass_quadrature(const FracParams& p, double z, double abs_tol = 1e-9) {
  const auto radial = [&](double r) {
    return poisson_kernel(p, r * r, z) * (p.n == 1 ? 2.0 : sphere_area(p.n) * std::pow(r, p.n - 1));
  };
  // scale panels with z: the kernel concentrates near r ~ z
  const double inner = integrate_adaptive(radial, 0.0, 4.0 * z, 0.5 * abs_tol);
  const double outer = integrate_to_infinity(radial, 4.0 * z, 0.5 * abs_tol);
  return inner + outer;
}

// Values of the extended map on (node, level) cells plus the boundary trace.
struct ExtensionField {
  const HalfSpaceGrid* grid = nullptr;
  int d = 1;
  std::vector<double> v;      // node_count * levels * d
  std::vector<double> trace;  // node_count * d (z = 0 row)

  double* at(std::size_t node, std::size_t level) {
    return &v[(level * grid->lat->node_count + node) * d];
  }
  const double* at(std::size_t node, std::size_t level) const {
    return &v[(level * grid->lat->node_count + node) * d];
  }
  const double* trace_at(std::size_t node) const { return &trace[node * d]; }
};

// Poisson extension u^e(x_i, z_k) = sum_j P(x_i - x_j, z_k) u_j h^n with the
// kernel row renormalized to exact unit mass (plus the analytic tail mass in
// constant-exterior mode). Convex weights make the maximum principle exact.
inline ExtensionField extend(const Field& u, const HalfSpaceGrid& grid) {
  const Lattice& lat = *grid.lat;
  const FracParams& p = lat.params;
  if (u.d > 8) throw config_error("extend supports d <= 8");
  ExtensionField out;
  out.grid = &grid;
  out.d = u.d;
  out.v.assign(lat.node_count * grid.levels() * u.d, 0.0);
  out.trace = u.v;

  const std::size_t per_axis = lat.axis_nodes;
  const double hn = lat.cell_volume();

  std::vector<std::array<int, 3>> midx(lat.node_count);
  for (std::size_t i = 0; i < lat.node_count; ++i) midx[i] = lat.multi_index(i);

  for (std::size_t k = 0; k < grid.levels(); ++k) {
    const double z = grid.zmid[k];
    // kernel values per offset (translation invariance)
    const int reach = per_axis - 1;
    const std::size_t table_axis = 2 * reach + 1;
    std::size_t table_size = 1;
    for (int a = 0; a < p.n; ++a) table_size *= table_axis;
    std::vector<double> table(table_size);
    for (std::size_t t = 0; t < table_size; ++t) {
      std::size_t rest = t;
      double d2 = 0.0;
      for (int a = 0; a < p.n; ++a) {
        const int off = int(rest % table_axis) - reach;
        rest /= table_axis;
        d2 += double(off) * off * lat.h * lat.h;
      }
      table[t] = poisson_kernel(p, d2, z) * hn;
    }

    std::vector<double> tail_mass_per_node;
    if (lat.opts.tail_mode == TailMode::constant_exterior) {
      tail_mass_per_node.resize(lat.node_count, 0.0);
      // mass of P(x_i - y, z) over the exterior of the truncation box, by the
      // same direction reduction as the energy tail
      const auto ray = [&](const double* x, const double* omega) {
        const double a0 = box_exit_distance(p.n, lat.L_ext, x, omega);
        const auto f = [&](double rr) {
          return std::pow(rr, p.n - 1) * poisson_kernel(p, rr * rr, z);
        };
        return integrate_to_infinity(f, a0, 1e-10);
      };
      parallel_for_chunks(0, lat.node_count, 16, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t i = lo; i < hi; ++i) {
          const double* x = lat.node(i);
          if (p.n == 1) {
            const auto f = [&](double t) { return poisson_kernel(p, t * t, z); };
            tail_mass_per_node[i] =
                integrate_to_infinity(f, lat.L_ext - x[0], 1e-10) +
                integrate_to_infinity(f, lat.L_ext + x[0], 1e-10);
          } else if (p.n == 2) {
            tail_mass_per_node[i] = integrate_adaptive(
                [&](double th) {
                  const double omega[2] = {std::cos(th), std::sin(th)};
                  return ray(x, omega);
                },
                0.0, 2.0 * std::numbers::pi, 1e-9);
          } else {
            const int npsi = 32, nth = 64;
            double acc = 0.0;
            for (int ip = 0; ip < npsi; ++ip) {
              const double psi = (ip + 0.5) * std::numbers::pi / npsi;
              for (int it = 0; it < nth; ++it) {
                const double th = (it + 0.5) * 2.0 * std::numbers::pi / nth;
                const double omega[3] = {std::sin(psi) * std::cos(th),
                                         std::sin(psi) * std::sin(th), std::cos(psi)};
                acc += ray(x, omega) * std::sin(psi);
              }
            }
            tail_mass_per_node[i] =
                acc * (std::numbers::pi / npsi) * (2.0 * std::numbers::pi / nth);
          }
        }
      });
    }

    parallel_for_chunks(0, lat.node_count, 64, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t i = lo; i < hi; ++i) {
        const auto& mi = midx[i];
        double mass = 0.0;
        double acc[8] = {0};
        for (std::size_t j = 0; j < lat.node_count; ++j) {
          const auto& mj = midx[j];
          std::size_t t = 0;
          for (int a = 0; a < p.n; ++a)
            t = t * table_axis + std::size_t(mj[a] - mi[a] + reach);
          const double w = table[t];
          mass += w;
          for (int c = 0; c < u.d; ++c) acc[c] += w * u.at(j)[c];
        }
        if (!tail_mass_per_node.empty()) {
          const double tm = tail_mass_per_node[i];
          mass += tm;
          for (int c = 0; c < u.d; ++c) acc[c] += tm * lat.opts.tail_value[c];
        }
        for (int c = 0; c < u.d; ++c) out.at(i, k)[c] = acc[c] / mass;
      }
    });
  }
  return out;
}

// ---------------------------------------------------------------------------
// Gradients and the weighted Dirichlet energy

// Per-cell gradient of the extension: central differences in x (one-sided at
// the box edge), three-point nonuniform differences in z anchored at the trace.
struct ExtensionGradient {
  const HalfSpaceGrid* grid = nullptr;
  int d = 1;
  std::vector<double> g;  // node * level * d * (n+1), z-derivative last

  const double* at(std::size_t node, std::size_t level, int comp) const {
    const std::size_t n1 = grid->lat->params.n + 1;
    return &g[((level * grid->lat->node_count + node) * d + comp) * n1];
  }
};

inline ExtensionGradient extension_gradient(const ExtensionField& v) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  const std::size_t M = grid.levels();
  ExtensionGradient out;
  out.grid = &grid;
  out.d = v.d;
  out.g.assign(lat.node_count * M * v.d * (n + 1), 0.0);

  parallel_for_chunks(0, lat.node_count, 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto mi = lat.multi_index(i);
      for (std::size_t k = 0; k < M; ++k) {
        for (int c = 0; c < v.d; ++c) {
          double* gi = &out.g[((k * lat.node_count + i) * v.d + c) * (n + 1)];
          // x derivatives
          for (int a = 0; a < n; ++a) {
            auto mm = mi, mp = mi;
            mm[a] -= 1;
            mp[a] += 1;
            const bool has_m = mm[a] >= 0, has_p = mp[a] < lat.axis_nodes;
            const double vi = v.at(i, k)[c];
            if (has_m && has_p) {
              gi[a] = (v.at(lat.flat_index(mp), k)[c] - v.at(lat.flat_index(mm), k)[c]) /
                      (2.0 * lat.h);
            } else if (has_p) {
              gi[a] = (v.at(lat.flat_index(mp), k)[c] - vi) / lat.h;
            } else {
              gi[a] = (vi - v.at(lat.flat_index(mm), k)[c]) / lat.h;
            }
          }
          // z derivative: three-point nonuniform stencil through
          // (z_{k-1}, z_k, z_{k+1}), the trace standing in for level -1
          const double z0 = grid.zmid[k];
          const double zm = (k == 0) ? 0.0 : grid.zmid[k - 1];
          const double vm = (k == 0) ? v.trace_at(i)[c] : v.at(i, k - 1)[c];
          if (k + 1 < M) {
            const double zp = grid.zmid[k + 1];
            const double vp = v.at(i, k + 1)[c];
            const double hm = z0 - zm, hp = zp - z0;
            gi[n] = (vp * hm * hm - vm * hp * hp + v.at(i, k)[c] * (hp * hp - hm * hm)) /
                    (hm * hp * (hm + hp));
          } else {
            gi[n] = (v.at(i, k)[c] - vm) / (z0 - zm);
          }
        }
      }
    }
  });
  return out;
}

// Weighted density per cell in the finite-volume split used by
// weighted_energy: each x face carries the exact cell integral of z^a times
// the face difference quotient, each z face the resistance-integral flux
// energy; faces are shared half-half between their two cells (the trace face
// belongs fully to the first level). Summing all cells reproduces
// weighted_energy exactly, and the face differences capture the core of
// singular maps markedly better than cell-sampled gradients.
inline std::vector<double> cell_energy_density(const ExtensionField& v,
                                               const ExtensionGradient& grad) {
  (void)grad;
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  const double a = lat.params.a;
  const double hn = lat.cell_volume();
  const double half_delta = 0.5 * lat.params.delta;
  const std::size_t M = grid.levels();
  const auto G2 = [a](double z) { return std::pow(z, 1.0 + a) / (1.0 + a); };
  const auto G = [a](double z) { return std::pow(z, 1.0 - a) / (1.0 - a); };

  std::vector<double> wz(M), inv_res(M);
  for (std::size_t k = 0; k < M; ++k) wz[k] = G2(grid.faces[k + 1]) - G2(grid.faces[k]);
  inv_res[0] = 1.0 / G(grid.zmid[0]);
  for (std::size_t k = 1; k < M; ++k)
    inv_res[k] = 1.0 / (G(grid.zmid[k]) - G(grid.zmid[k - 1]));

  std::vector<double> cell(lat.node_count * M, 0.0);
  parallel_for_chunks(0, lat.node_count, 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      const auto mi = lat.multi_index(i);
      for (std::size_t k = 0; k < M; ++k) {
        double acc = 0.0;
        // x faces, half share each
        for (int ax = 0; ax < n; ++ax) {
          for (int dir = -1; dir <= 1; dir += 2) {
            auto mj = mi;
            mj[ax] += dir;
            if (mj[ax] < 0 || mj[ax] >= lat.axis_nodes) continue;
            const std::size_t j = lat.flat_index(mj);
            double d2 = 0.0;
            for (int c = 0; c < v.d; ++c) {
              const double dv = v.at(j, k)[c] - v.at(i, k)[c];
              d2 += dv * dv;
            }
            acc += 0.5 * wz[k] * d2 / (lat.h * lat.h) * hn;
          }
        }
        // z faces: below (trace face fully owned by level 0) and above
        {
          double d2 = 0.0;
          for (int c = 0; c < v.d; ++c) {
            const double dv = v.at(i, k)[c] - (k == 0 ? v.trace_at(i)[c] : v.at(i, k - 1)[c]);
            d2 += dv * dv;
          }
          acc += (k == 0 ? 1.0 : 0.5) * d2 * inv_res[k] * hn;
        }
        if (k + 1 < M) {
          double d2 = 0.0;
          for (int c = 0; c < v.d; ++c) {
            const double dv = v.at(i, k + 1)[c] - v.at(i, k)[c];
            d2 += dv * dv;
          }
          acc += 0.5 * d2 * inv_res[k + 1] * hn;
        }
        cell[k * lat.node_count + i] = half_delta * acc;
      }
    }
  });
  return cell;
}

// Weighted Dirichlet energy over the cells whose midpoint satisfies `inside`.
inline double weighted_energy(const ExtensionField& v, const ExtensionGradient& grad,
                              const std::function<bool(const double*, double)>& inside) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const std::vector<double> cell = cell_energy_density(v, grad);
  double total = 0.0;
  for (std::size_t k = 0; k < grid.levels(); ++k)
    for (std::size_t i = 0; i < lat.node_count; ++i)
      if (!inside || inside(lat.node(i), grid.zmid[k])) total += cell[k * lat.node_count + i];
  return total;
}

// Full-domain weighted Dirichlet energy in finite-volume form: x fluxes are
// face differences weighted by z^a at the level, z fluxes use the exact
// resistance integral of z^{-a} across each face, including the face between
// the trace and the first level. The resistance form integrates the z^{2s}
// boundary layer of the extension exactly on its model profile, which the
// cell-sampled gradient quadrature badly overestimates for s < 1/2.
inline double weighted_energy(const ExtensionField& v) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  const double a = lat.params.a;
  const double hn = lat.cell_volume();
  const std::size_t M = grid.levels();

  // exact cell integral of the weight: int z^a over the cell, so the
  // singular weight (a < 0) is not undersampled at the first levels
  const auto G2 = [a](double z) { return std::pow(z, 1.0 + a) / (1.0 + a); };
  const double x_part = parallel_reduce_sum(0, M, 1, [&](std::size_t klo, std::size_t khi) {
    double acc = 0.0;
    for (std::size_t k = klo; k < khi; ++k) {
      const double wz = G2(grid.faces[k + 1]) - G2(grid.faces[k]);
      for (std::size_t i = 0; i < lat.node_count; ++i) {
        const auto mi = lat.multi_index(i);
        for (int ax = 0; ax < n; ++ax) {
          auto mp = mi;
          mp[ax] += 1;
          if (mp[ax] >= lat.axis_nodes) continue;
          const std::size_t j = lat.flat_index(mp);
          for (int c = 0; c < v.d; ++c) {
            const double dv = v.at(j, k)[c] - v.at(i, k)[c];
            acc += wz * dv * dv / (lat.h * lat.h) * hn;
          }
        }
      }
    }
    return acc;
  });

  // antiderivative of z^{-a}
  const auto G = [a](double z) { return std::pow(z, 1.0 - a) / (1.0 - a); };
  std::vector<double> inv_res(M);
  inv_res[0] = 1.0 / G(grid.zmid[0]);
  for (std::size_t k = 1; k < M; ++k)
    inv_res[k] = 1.0 / (G(grid.zmid[k]) - G(grid.zmid[k - 1]));

  const double z_part =
      parallel_reduce_sum(0, lat.node_count, 1024, [&](std::size_t lo, std::size_t hi) {
        double acc = 0.0;
        for (std::size_t i = lo; i < hi; ++i) {
          for (int c = 0; c < v.d; ++c) {
            double dv = v.at(i, 0)[c] - v.trace_at(i)[c];
            acc += dv * dv * inv_res[0] * hn;
            for (std::size_t k = 1; k < M; ++k) {
              dv = v.at(i, k)[c] - v.at(i, k - 1)[c];
              acc += dv * dv * inv_res[k] * hn;
            }
          }
        }
        return acc;
      });
  return 0.5 * lat.params.delta * (x_part + z_part);
}

// ---------------------------------------------------------------------------
// Density functions

// Theta_s(v, x0, r) = r^{2s-n} E_s(v, B_r^+(x0)) from precomputed cell densities.
inline double density_Theta_cells(const std::vector<double>& cell, const HalfSpaceGrid& grid,
                                  const double* x0, double r) {
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  double e = 0.0;
  const double r2 = r * r;
  for (std::size_t k = 0; k < grid.levels(); ++k) {
    const double z = grid.zmid[k];
    if (z * z > r2) continue;
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      double d2 = z * z;
      for (int a = 0; a < n; ++a) {
        const double dx = lat.node(i)[a] - x0[a];
        d2 += dx * dx;
      }
      if (d2 <= r2) e += cell[k * lat.node_count + i];
    }
  }
  return std::pow(r, 2.0 * lat.params.s - n) * e;
}

inline double density_Theta(const ExtensionField& v, const double* x0, double r) {
  const ExtensionGradient grad = extension_gradient(v);
  return density_Theta_cells(cell_energy_density(v, grad), *v.grid, x0, r);
}

// theta_s(u, x0, r) = r^{2s-n} E_s(u, D_r(x0)); requires D_r inside Omega.
inline double density_theta_small(const Field& u, const Lattice& lat, const double* x0,
                                  double r) {
  std::vector<uint8_t> mask(lat.node_count, 0);
  for (std::size_t i = 0; i < lat.node_count; ++i) {
    double d2 = 0.0;
    for (int a = 0; a < lat.params.n; ++a) {
      const double dx = lat.node(i)[a] - x0[a];
      d2 += dx * dx;
    }
    if (d2 <= r * r) {
      if (!lat.in_omega(i))
        throw std::domain_error("density_theta_small: D_r(x0) must lie inside Omega");
      mask[i] = 1;
    }
  }
  return std::pow(r, 2.0 * lat.params.s - lat.params.n) * energy(u, lat, &mask);
}

// Sampled r -> Theta_s profile with the monotonicity remainder per interval.
struct DensityProfile {
  std::vector<double> center;
  std::vector<double> radii;
  std::vector<double> theta;            // extension density Theta_s
  std::vector<double> theta_small;      // lattice density theta_s
  std::vector<double> remainder;        // quadrature of the formula remainder per interval
  std::vector<double> remainder_gap;    // |Delta Theta - remainder| per interval
  double max_negative_increment = 0.0;  // worst monotonicity violation
  double xi = 0.0;                      // extrapolated r -> 0 limit, clamped at 0
};

// Richardson-style extrapolation of Theta(r) over the three smallest reliable
// radii: the intercept of the least-squares linear fit in r, eliminating the
// leading O(r) term of the profile. Clamped at zero. Around a remote singular
// point the profile grows steeply in r and the intercept drops to zero, which
// is what makes the threshold detector localize.
inline double xi_estimate(const std::vector<double>& radii, const std::vector<double>& theta,
                          double min_radius) {
  std::vector<double> rs, ts;
  for (std::size_t t = 0; t < radii.size() && rs.size() < 3; ++t)
    if (radii[t] >= min_radius - 1e-12) {
      rs.push_back(radii[t]);
      ts.push_back(theta[t]);
    }
  if (rs.empty()) return 0.0;
  if (rs.size() == 1) return std::max(0.0, ts[0]);
  double rbar = 0.0, tbar = 0.0;
  for (std::size_t k = 0; k < rs.size(); ++k) {
    rbar += rs[k];
    tbar += ts[k];
  }
  rbar /= double(rs.size());
  tbar /= double(rs.size());
  double num = 0.0, den = 0.0;
  for (std::size_t k = 0; k < rs.size(); ++k) {
    num += (rs[k] - rbar) * (ts[k] - tbar);
    den += (rs[k] - rbar) * (rs[k] - rbar);
  }
  const double slope = den > 0.0 ? num / den : 0.0;
  const double xi = tbar - slope * rbar;
  return xi > 0.0 ? xi : 0.0;
}

inline DensityProfile monotonicity_profile(const Field& u, const ExtensionField& v,
                                           const double* x0, std::vector<double> radii,
                                           bool with_theta_small = true) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  std::sort(radii.begin(), radii.end());

  const ExtensionGradient grad = extension_gradient(v);
  const std::vector<double> cell = cell_energy_density(v, grad);

  DensityProfile prof;
  prof.center.assign(x0, x0 + n);
  prof.radii = radii;
  for (const double r : radii) {
    prof.theta.push_back(density_Theta_cells(cell, grid, x0, r));
    prof.theta_small.push_back(with_theta_small
                                   ? density_theta_small(u, lat, x0, r)
                                   : 0.0);
  }

  // remainder of the exact monotonicity formula on each interval:
  //   delta_s int_{B_r^+ \ B_rho^+} z^a |(x - x0).grad v|^2 / |x - x0|^{n+2-2s}
  const double hn = lat.cell_volume();
  for (std::size_t t = 0; t + 1 < radii.size(); ++t) {
    const double r0 = radii[t], r1 = radii[t + 1];
    double rem = 0.0;
    for (std::size_t k = 0; k < grid.levels(); ++k) {
      const double z = grid.zmid[k];
      if (z > r1) continue;
      for (std::size_t i = 0; i < lat.node_count; ++i) {
        double d2 = z * z;
        for (int a = 0; a < n; ++a) {
          const double dx = lat.node(i)[a] - x0[a];
          d2 += dx * dx;
        }
        if (d2 <= r0 * r0 || d2 > r1 * r1) continue;
        double radial2 = 0.0;
        for (int c = 0; c < v.d; ++c) {
          const double* gi = grad.at(i, k, c);
          double dot = 0.0;
          for (int a = 0; a < n; ++a) dot += (lat.node(i)[a] - x0[a]) * gi[a];
          dot += z * gi[n];
          radial2 += dot * dot;
        }
        rem += lat.params.delta * std::pow(z, lat.params.a) * radial2 *
               std::pow(d2, -0.5 * (n + 2.0 - 2.0 * lat.params.s)) * hn * grid.thick[k];
      }
    }
    prof.remainder.push_back(rem);
    prof.remainder_gap.push_back(std::abs(prof.theta[t + 1] - prof.theta[t] - rem));
    prof.max_negative_increment =
        std::max(prof.max_negative_increment, -(prof.theta[t + 1] - prof.theta[t]));
  }
  prof.xi = xi_estimate(radii, prof.theta, 4.0 * lat.h);
  return prof;
}

inline void export_profile_csv(const DensityProfile& prof, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw config_error("cannot open " + path + " for writing");
  out << "r,Theta,theta_small,remainder_gap\n";
  char buf[160];
  for (std::size_t t = 0; t < prof.radii.size(); ++t) {
    const double gap = t + 1 < prof.radii.size() ? prof.remainder_gap[t] : 0.0;
    std::snprintf(buf, sizeof(buf), "%.17g,%.17g,%.17g,%.17g\n", prof.radii[t], prof.theta[t],
                  prof.theta_small[t], gap);
    out << buf;
  }
}

// ---------------------------------------------------------------------------
// First inner variation

// Smooth vertical cutoff: 1 below 0.25 z_max, 0 above 0.5 z_max.
inline double vertical_cutoff(double z, double z_max) {
  const double lo = 0.25 * z_max, hi = 0.5 * z_max;
  if (z <= lo) return 1.0;
  if (z >= hi) return 0.0;
  const double t = (z - lo) / (hi - lo);
  return 1.0 - t * t * (3.0 - 2.0 * t);
}

inline double vertical_cutoff_deriv(double z, double z_max) {
  const double lo = 0.25 * z_max, hi = 0.5 * z_max;
  if (z <= lo || z >= hi) return 0.0;
  const double t = (z - lo) / (hi - lo);
  return -6.0 * t * (1.0 - t) / (hi - lo);
}

// Both fields evaluate the first inner variation of the energy at u along X,
// taken along the flow that pulls u back (the variation of u is -X.grad u).
// With that orientation the extension-domain quadrature and the boundary
// pairing -<(-Delta)^s_h u, X.grad_h u> estimate the same number; a central
// finite difference of the lattice energy under the flow confirms the signs.
struct InnerVariation {
  double extension_form = 0.0;  // quadrature of the extension-domain formula
  double boundary_form = 0.0;   // -<(-Delta)^s_h u, X . grad_h u>
};

// X is an R^n-valued node field supported away from the Omega boundary. The
// extension-domain vector field is (X(x) eta(z), 0) with the cutoff above.
inline InnerVariation first_inner_variation(const Field& u, const ExtensionField& v,
                                            const Field& X) {
  const HalfSpaceGrid& grid = *v.grid;
  const Lattice& lat = *grid.lat;
  const int n = lat.params.n;
  if (X.d != n) throw std::invalid_argument("first_inner_variation: X must have n components");

  const ExtensionGradient grad = extension_gradient(v);
  const double hn = lat.cell_volume();
  const double zmax = grid.z_max();

  // finite-difference spatial derivatives of X on the lattice
  const auto dX = [&](std::size_t i, int comp, int axis) {
    const auto mi = lat.multi_index(i);
    auto mm = mi, mp = mi;
    mm[axis] -= 1;
    mp[axis] += 1;
    const bool has_m = mm[axis] >= 0, has_p = mp[axis] < lat.axis_nodes;
    if (has_m && has_p)
      return (X.at(lat.flat_index(mp))[comp] - X.at(lat.flat_index(mm))[comp]) / (2.0 * lat.h);
    if (has_p) return (X.at(lat.flat_index(mp))[comp] - X.at(i)[comp]) / lat.h;
    return (X.at(i)[comp] - X.at(lat.flat_index(mm))[comp]) / lat.h;
  };

  InnerVariation out;
  double acc = 0.0;
  for (std::size_t k = 0; k < grid.levels(); ++k) {
    const double z = grid.zmid[k];
    const double eta = vertical_cutoff(z, zmax);
    const double deta = vertical_cutoff_deriv(z, zmax);
    if (eta == 0.0 && deta == 0.0) continue;
    const double za = std::pow(z, lat.params.a);
    const double vol = hn * grid.thick[k];
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      double g2 = 0.0;
      double cross = 0.0;  // sum_{i,j} (d_i v . d_j v) d_j X_i over the lifted field
      for (int c = 0; c < v.d; ++c) {
        const double* gi = grad.at(i, k, c);
        for (int a = 0; a <= n; ++a) g2 += gi[a] * gi[a];
      }
      double divX = 0.0;
      for (int a = 0; a < n; ++a) divX += dX(i, a, a) * eta;
      for (int ii = 0; ii < n; ++ii) {
        for (int jj = 0; jj < n; ++jj) {
          double dij = 0.0;
          for (int c = 0; c < v.d; ++c)
            dij += grad.at(i, k, c)[ii] * grad.at(i, k, c)[jj];
          cross += dij * dX(i, ii, jj) * eta;
        }
        // d_z of the lifted component: X_i(x) eta'(z)
        double diz = 0.0;
        for (int c = 0; c < v.d; ++c) diz += grad.at(i, k, c)[ii] * grad.at(i, k, c)[n];
        cross += diz * X.at(i)[ii] * deta;
      }
      acc += za * (g2 * divX - 2.0 * cross) * vol;
    }
  }
  out.extension_form = 0.5 * lat.params.delta * acc;

  // boundary form <(-Delta)^s_h u, X . grad_h u> over Omega nodes
  Field uf(lat, u.d);
  uf.v = u.v;
  const Field lap = frac_laplacian_strong(uf);
  double b = 0.0;
  for (const uint32_t i : lat.omega_nodes) {
    for (int c = 0; c < u.d; ++c) {
      double xdotgrad = 0.0;
      const auto mi = lat.multi_index(i);
      for (int a = 0; a < n; ++a) {
        auto mm = mi, mp = mi;
        mm[a] -= 1;
        mp[a] += 1;
        double der;
        if (mm[a] >= 0 && mp[a] < lat.axis_nodes)
          der = (u.at(lat.flat_index(mp))[c] - u.at(lat.flat_index(mm))[c]) / (2.0 * lat.h);
        else if (mp[a] < lat.axis_nodes)
          der = (u.at(lat.flat_index(mp))[c] - u.at(i)[c]) / lat.h;
        else
          der = (u.at(i)[c] - u.at(lat.flat_index(mm))[c]) / lat.h;
        xdotgrad += X.at(i)[a] * der;
      }
      b += hn * lap.at(i)[c] * xdotgrad;
    }
  }
  out.boundary_form = -b;
  return out;
}

// ---------------------------------------------------------------------------
// Extension field dump (text header + z faces + binary payload)

inline void dump_extension(const ExtensionField& v, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open " + path + " for writing");
  const Lattice& lat = *v.grid->lat;
  char head[256];
  std::snprintf(head, sizeof(head),
                "fracmap-extension v1\nn %d\nd %d\ns %.17g\nh %.17g\nL %.17g\nL_ext %.17g\n"
                "nodes %zu\nlevels %zu\n",
                lat.params.n, v.d, lat.params.s, lat.h, lat.L, lat.L_ext, lat.node_count,
                v.grid->levels());
  out << head;
  out << "faces";
  char buf[40];
  for (const double f : v.grid->faces) {
    std::snprintf(buf, sizeof(buf), " %.17g", f);
    out << buf;
  }
  out << "\npayload trace-then-levels row-major float64\n";
  out.write(reinterpret_cast<const char*>(v.trace.data()),
            static_cast<std::streamsize>(v.trace.size() * sizeof(double)));
  out.write(reinterpret_cast<const char*>(v.v.data()),
            static_cast<std::streamsize>(v.v.size() * sizeof(double)));
}

inline ExtensionField load_extension(const Lattice& lat, HalfSpaceGrid& grid_storage,
                                     const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open " + path);
  std::string line, key;
  std::getline(in, line);
  if (line != "fracmap-extension v1") throw config_error("not an extension dump: " + path);
  int n = 0, d = 0;
  double s = 0, h = 0;
  std::size_t nodes = 0, levels = 0;
  double ignore;
  in >> key >> n >> key >> d >> key >> s >> key >> h;
  in >> key >> ignore >> key >> ignore;
  in >> key >> nodes >> key >> levels;
  if (n != lat.params.n || nodes != lat.node_count || std::abs(h - lat.h) > 1e-12)
    throw config_error("extension dump does not match the lattice");
  in >> key;  // "faces"
  grid_storage.lat = &lat;
  grid_storage.faces.resize(levels + 1);
  for (auto& f : grid_storage.faces) in >> f;
  grid_storage.zmid.resize(levels);
  grid_storage.thick.resize(levels);
  for (std::size_t k = 0; k < levels; ++k) {
    grid_storage.thick[k] = grid_storage.faces[k + 1] - grid_storage.faces[k];
    grid_storage.zmid[k] = 0.5 * (grid_storage.faces[k] + grid_storage.faces[k + 1]);
  }
  std::getline(in, line);
  std::getline(in, line);  // payload marker
  ExtensionField v;
  v.grid = &grid_storage;
  v.d = d;
  v.trace.resize(nodes * d);
  v.v.resize(nodes * levels * d);
  in.read(reinterpret_cast<char*>(v.trace.data()),
          static_cast<std::streamsize>(v.trace.size() * sizeof(double)));
  in.read(reinterpret_cast<char*>(v.v.data()),
          static_cast<std::streamsize>(v.v.size() * sizeof(double)));
  if (!in) throw config_error("truncated extension payload in " + path);
  return v;
}

}  // namespace fracmap
