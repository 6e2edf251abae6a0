#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "fracmap/extension.hpp"
#include "fracmap/lattice.hpp"

namespace fracmap {

// Multilinear interpolation of a field at an arbitrary point of the box.
inline void interpolate(const Field& u, const double* x, double* out) {
  const Lattice& lat = *u.lat;
  const int n = lat.params.n;
  int base[3] = {0, 0, 0};
  double frac[3] = {0, 0, 0};
  for (int a = 0; a < n; ++a) {
    const double t = x[a] / lat.h + lat.half_span;
    if (t < -1e-9 || t > lat.axis_nodes - 1 + 1e-9)
      throw std::domain_error("interpolation point outside the lattice box");
    const double tc = std::clamp(t, 0.0, double(lat.axis_nodes - 1));
    base[a] = std::min(int(tc), lat.axis_nodes - 2);
    if (lat.axis_nodes == 1) base[a] = 0;
    frac[a] = tc - base[a];
  }
  for (int c = 0; c < u.d; ++c) out[c] = 0.0;
  const int corners = 1 << n;
  for (int m = 0; m < corners; ++m) {
    double w = 1.0;
    std::array<int, 3> mi{};
    for (int a = 0; a < n; ++a) {
      const int bit = (m >> a) & 1;
      mi[a] = base[a] + bit;
      w *= bit ? frac[a] : 1.0 - frac[a];
    }
    if (w == 0.0) continue;
    const double* uv = u.at(lat.flat_index(mi));
    for (int c = 0; c < u.d; ++c) out[c] += w * uv[c];
  }
}

// Blow-up rescaling u_{x0,rho}(x) = u(x0 + rho x) sampled onto a reference
// lattice by multilinear interpolation and renormalized to the sphere.
inline SphereField blowup(const SphereField& u, const double* x0, double rho,
                          const Lattice& reference) {
  if (!(rho > 0.0)) throw std::domain_error("blowup scale must be positive");
  const Lattice& src = *u.lat;
  const int n = src.params.n;
  if (reference.params.n != n) throw std::invalid_argument("dimension mismatch");
  Field out(reference, u.d);
  double p[3], val[8];
  for (std::size_t i = 0; i < reference.node_count; ++i) {
    for (int a = 0; a < n; ++a) {
      p[a] = x0[a] + rho * reference.node(i)[a];
      if (std::abs(p[a]) > src.L_ext + 1e-12)
        throw std::domain_error("blowup samples outside the source box");
    }
    interpolate(u, p, val);
    double nn = 0.0;
    for (int c = 0; c < u.d; ++c) nn += val[c] * val[c];
    nn = std::sqrt(nn);
    if (nn < 0.5)
      throw degenerate_interpolation_error("interpolated norm below 0.5 at a blowup node");
    for (int c = 0; c < u.d; ++c) out.at(i)[c] = val[c] / nn;
  }
  return SphereField(out);
}

// Max over lambda in {1/2, 2} and annulus sample nodes of |phi(lambda x) - phi(x)|.
// The annulus keeps both x and lambda x inside the box and away from the
// origin, where interpolating a homogeneous map is meaningless.
inline double homogeneity_defect(const SphereField& phi, double inner_radius = 0.0) {
  const Lattice& lat = *phi.lat;
  const int n = lat.params.n;
  const double box = lat.L_ext;
  const double rlo = inner_radius > 0.0 ? inner_radius : std::max(4.0 * lat.h, 0.2 * box);
  double worst = 0.0;
  double p[3], val[8];
  for (const double lambda : {0.5, 2.0}) {
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      const double* x = lat.node(i);
      double r = 0.0, linf = 0.0;
      for (int a = 0; a < n; ++a) {
        r += x[a] * x[a];
        linf = std::max(linf, std::abs(x[a]) * lambda);
      }
      r = std::sqrt(r);
      if (r < rlo || linf > box) continue;
      if (lambda * r < rlo) continue;
      for (int a = 0; a < n; ++a) p[a] = lambda * x[a];
      interpolate(phi, p, val);
      double d2 = 0.0;
      for (int c = 0; c < phi.d; ++c) {
        const double dc = val[c] - phi.at(i)[c];
        d2 += dc * dc;
      }
      worst = std::max(worst, std::sqrt(d2));
    }
  }
  return worst;
}

struct SymmetrySubspace {
  int dimension = 0;
  std::vector<std::vector<double>> directions;  // unit vectors with small defect
};

// Tests translation invariance phi(x + delta v) = phi(x) along the axes and
// their two-axis +- combinations; returns the span of directions whose sup
// defect over interior samples is at most tol. The candidate set is closed
// under sign flip, and defects are measured for both signs.
inline SymmetrySubspace symmetry_subspace(const SphereField& phi, double tol,
                                          double shift = 0.0) {
  const Lattice& lat = *phi.lat;
  const int n = lat.params.n;
  const double delta = shift > 0.0 ? shift : 2.0 * lat.h;

  std::vector<std::vector<double>> candidates;
  for (int a = 0; a < n; ++a) {
    std::vector<double> e(n, 0.0);
    e[a] = 1.0;
    candidates.push_back(e);
  }
  for (int a = 0; a < n; ++a)
    for (int b = a + 1; b < n; ++b)
      for (const double sgn : {1.0, -1.0}) {
        std::vector<double> e(n, 0.0);
        e[a] = 1.0 / std::numbers::sqrt2;
        e[b] = sgn / std::numbers::sqrt2;
        candidates.push_back(e);
      }

  const auto defect = [&](const std::vector<double>& dir) {
    double worst = 0.0;
    double p[3], val[8];
    for (const double sgn : {1.0, -1.0}) {
      for (std::size_t i = 0; i < lat.node_count; ++i) {
        bool ok = true;
        for (int a = 0; a < n; ++a) {
          p[a] = lat.node(i)[a] + sgn * delta * dir[a];
          if (std::abs(p[a]) > lat.L_ext - 1e-12) ok = false;
        }
        if (!ok) continue;
        interpolate(phi, p, val);
        double d2 = 0.0;
        for (int c = 0; c < phi.d; ++c) {
          const double dc = val[c] - phi.at(i)[c];
          d2 += dc * dc;
        }
        worst = std::max(worst, std::sqrt(d2));
      }
    }
    return worst;
  };

  SymmetrySubspace out;
  std::vector<std::vector<double>> basis;
  for (const auto& dir : candidates) {
    if (defect(dir) > tol) continue;
    out.directions.push_back(dir);
    // Gram-Schmidt rank update
    std::vector<double> v = dir;
    for (const auto& b : basis) {
      double dot = 0.0;
      for (int a = 0; a < n; ++a) dot += v[a] * b[a];
      for (int a = 0; a < n; ++a) v[a] -= dot * b[a];
    }
    double nn = 0.0;
    for (int a = 0; a < n; ++a) nn += v[a] * v[a];
    if (nn > 1e-8) {
      const double inv = 1.0 / std::sqrt(nn);
      for (auto& c : v) c *= inv;
      basis.push_back(v);
    }
  }
  out.dimension = int(basis.size());
  return out;
}

struct SingularReport {
  double epsilon = 0.0;
  double r_min = 0.0;
  std::vector<uint32_t> flagged;        // Omega nodes with xi >= epsilon
  std::vector<double> xi;               // per Omega node (indexed like omega_nodes)
  std::vector<double> theta_at_r_min;   // per Omega node
};

// Flags Omega nodes whose extrapolated density limit meets the threshold.
// The density profile per node uses the three smallest radii >= 4h from the
// supplied list; below that scale the half-ball quadrature is meaningless.
inline SingularReport detect_singular(const SphereField& u, const ExtensionField& v,
                                      double epsilon, std::vector<double> radii) {
  if (!(epsilon > 0.0)) throw std::invalid_argument("threshold must be positive");
  const Lattice& lat = *u.lat;
  std::sort(radii.begin(), radii.end());
  std::vector<double> usable;
  for (const double r : radii)
    if (r >= 4.0 * lat.h - 1e-12) usable.push_back(r);
  if (usable.size() < 3)
    throw config_error("detect_singular needs at least three radii >= 4h");
  usable.resize(3);

  const ExtensionGradient grad = extension_gradient(v);
  const std::vector<double> cell = cell_energy_density(v, grad);

  SingularReport rep;
  rep.epsilon = epsilon;
  rep.r_min = usable.front();
  rep.xi.resize(lat.omega_nodes.size());
  rep.theta_at_r_min.resize(lat.omega_nodes.size());

  parallel_for_chunks(0, lat.omega_nodes.size(), 16, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t q = lo; q < hi; ++q) {
      const double* x0 = lat.node(lat.omega_nodes[q]);
      std::vector<double> theta;
      for (const double r : usable)
        theta.push_back(density_Theta_cells(cell, *v.grid, x0, r));
      rep.theta_at_r_min[q] = theta.front();
      rep.xi[q] = xi_estimate(usable, theta, usable.front());
    }
  });
  for (std::size_t q = 0; q < lat.omega_nodes.size(); ++q)
    if (rep.xi[q] >= epsilon) rep.flagged.push_back(lat.omega_nodes[q]);
  return rep;
}

// Detector threshold calibrated against the one known singular model. The
// permitted density radii (>= 4h) of any node within ~3h of the discrete
// hedgehog core all contain it, so thresholds at half the plateau flag out to
// three cells; 0.85 of the plateau is the measured separation point between
// the core nodes (xi ~ 0.92 plateau) and everything beyond two cells
// (xi <= 0.77 plateau).
constexpr double kEpsilonPlateauFactor = 0.85;

// Plateau density of the hedgehog: mean of Theta over r in [0.25, 0.75] L
// around the origin.
inline double hedgehog_plateau(const Field& u, const ExtensionField& v, double L) {
  const double x0[3] = {0.0, 0.0, 0.0};
  const ExtensionGradient grad = extension_gradient(v);
  const std::vector<double> cell = cell_energy_density(v, grad);
  double mean = 0.0;
  int count = 0;
  for (double r = 0.25 * L; r <= 0.75 * L + 1e-12; r += 0.125 * L) {
    mean += density_Theta_cells(cell, *v.grid, x0, r);
    ++count;
  }
  return mean / count;
}

}  // namespace fracmap
