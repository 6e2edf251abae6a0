#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "fracmap/constants.hpp"
#include "fracmap/errors.hpp"
#include "fracmap/parallel.hpp"
#include "fracmap/quadrature.hpp"

namespace fracmap {

enum class DomainShape { ball, box };
enum class TailMode { zero, constant_exterior };

struct LatticeOptions {
  double cutoff = 2.0;    // pairs with |x_i-x_j| < cutoff*h use the averaged kernel
  int subsamples = 4;     // midpoint subsamples per axis for the averaged kernel
  DomainShape shape = DomainShape::ball;
  TailMode tail_mode = TailMode::zero;
  std::vector<double> tail_value;  // exterior constant (d components), constant_exterior only
  std::size_t max_nodes = 80000;   // pair storage is O(N^2); refuse beyond this
};

// Truncated uniform grid on [-L_ext, L_ext]^n with a domain mask Omega
// (centered ball or box of radius L) and precomputed singular pair-kernel
// weights. The active pair set, all ordered pairs (i,j) with i or j in Omega,
// is stored as an adjacency structure: row i lists every partner j with the
// kernel value k_ij ~ |x_i-x_j|^{-(n+2s)} (cell-averaged near the diagonal).
// The quadrature weight of a pair is w_ij = h^{2n} k_ij.
class Lattice {
 public:
  FracParams params;
  double h = 0.0;
  double L = 0.0;
  double L_ext = 0.0;
  LatticeOptions opts;

  int axis_nodes = 0;  // per axis, odd
  int half_span = 0;   // axis_nodes = 2*half_span + 1
  std::size_t node_count = 0;

  std::vector<double> coords;      // node_count * n
  std::vector<uint8_t> omega;      // 1 if node in Omega
  std::vector<uint32_t> omega_nodes;

  // active ordered pairs, CSR by first index
  std::vector<uint64_t> row_ptr;   // node_count + 1
  std::vector<uint32_t> col;
  std::vector<double> kval;        // kernel value per entry (no h^{2n} factor)

  // analytic complement integral int_{|y|>L_ext} |x_i-y|^{-(n+2s)} dy,
  // per Omega node; built only in constant_exterior mode
  std::vector<double> tail_density;

  int dim() const { return params.n; }
  double weight_scale() const { return std::pow(h, 2.0 * params.n); }
  double cell_volume() const { return std::pow(h, params.n); }

  const double* node(std::size_t i) const { return &coords[i * params.n]; }
  bool in_omega(std::size_t i) const { return omega[i] != 0; }

  std::size_t entry_count() const { return col.size(); }

  // Kernel value for an arbitrary node pair (not restricted to stored pairs).
  double kernel_value(std::size_t i, std::size_t j) const {
    std::array<int, 3> off{};
    for (int a = 0; a < params.n; ++a)
      off[a] = multi_index(j)[a] - multi_index(i)[a];
    return kernel_for_offset(off);
  }

  std::array<int, 3> multi_index(std::size_t i) const {
    std::array<int, 3> mi{};
    std::size_t rest = i;
    for (int a = params.n - 1; a >= 0; --a) {
      mi[a] = static_cast<int>(rest % axis_nodes);
      rest /= axis_nodes;
    }
    return mi;
  }

  std::size_t flat_index(const std::array<int, 3>& mi) const {
    std::size_t idx = 0;
    for (int a = 0; a < params.n; ++a) idx = idx * axis_nodes + mi[a];
    return idx;
  }

  double axis_coord(int k) const { return (k - half_span) * h; }

  // Lazy caches used by materialized pair fields: per entry,
  //   kn = k^{n/(n+2s)}  (the L^2_od measure factor 1/r^n)
  //   ks = k^{s/(n+2s)}  (the s-gradient factor 1/r^s)
  // where r = k^{-1/(n+2s)} is the effective pair distance; r equals the
  // point distance exactly outside the averaged near-diagonal band, and this
  // choice keeps every discrete identity an exact rearrangement inside it.
  const std::vector<double>& od_measure() const {
    if (kn_.empty()) {
      kn_.resize(kval.size());
      const double e = params.n / (params.n + 2.0 * params.s);
      parallel_for_chunks(0, kval.size(), 1 << 14, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) kn_[t] = std::pow(kval[t], e);
      });
    }
    return kn_;
  }
  const std::vector<double>& sgrad_factor() const {
    if (ks_.empty()) {
      ks_.resize(kval.size());
      const double e = params.s / (params.n + 2.0 * params.s);
      parallel_for_chunks(0, kval.size(), 1 << 14, [&](std::size_t lo, std::size_t hi) {
        for (std::size_t t = lo; t < hi; ++t) ks_[t] = std::pow(kval[t], e);
      });
    }
    return ks_;
  }

  double kernel_for_offset(const std::array<int, 3>& off) const {
    double d2 = 0.0;
    for (int a = 0; a < params.n; ++a) d2 += double(off[a]) * off[a];
    if (d2 == 0.0) return 0.0;  // diagonal excluded
    const double dist = h * std::sqrt(d2);
    if (dist < opts.cutoff * h) {
      const auto it = near_table_.find(offset_key(off));
      if (it != near_table_.end()) return it->second;
    }
    return std::pow(dist, -(params.n + 2.0 * params.s));
  }

  // Cell-averaged kernel for a near-diagonal offset: both cells are sampled
  // with `subsamples` midpoints per axis and the kernel is averaged against
  // the second moment of the displacement along the offset direction,
  //   k(o) = avg over (x,y) of ((x-y).ohat)^2 |x-y|^{-q} / |o h|^2 .
  // Exact for fields varying linearly along the offset, so the band
  // quadrature error of the energy is second order; the weighted integrand
  // |x-y|^{2-q} is integrable for every s in (0,1), and midpoint subsamples
  // of distinct cells never collide.
  static double averaged_kernel(int n, double q, double h, const std::array<int, 3>& off,
                                int m) {
    double onorm2 = 0.0;
    for (int a = 0; a < n; ++a) onorm2 += double(off[a]) * off[a];
    const double scale = onorm2 * h * h;  // |o h|^2
    std::array<int, 3> ta{}, tb{};
    int total = 1;
    for (int a = 0; a < n; ++a) total *= m;
    double sum = 0.0;
    for (int la = 0; la < total; ++la) {
      int ra = la;
      for (int a = 0; a < n; ++a) {
        ta[a] = ra % m;
        ra /= m;
      }
      for (int lb = 0; lb < total; ++lb) {
        int rb = lb;
        double d2 = 0.0, proj = 0.0;
        for (int a = 0; a < n; ++a) {
          tb[a] = rb % m;
          rb /= m;
          const double comp =
              off[a] * h + (tb[a] - ta[a]) * (h / m);
          d2 += comp * comp;
          proj += comp * off[a] * h;
        }
        sum += (proj * proj / (scale * scale)) * std::pow(d2, -0.5 * q);
      }
    }
    return sum / (double(total) * total);
  }

  friend Lattice build_lattice(const FracParams&, double, double, double,
                               const LatticeOptions&);

 private:
  static int64_t offset_key(const std::array<int, 3>& off) {
    // offsets are small; pack into one integer
    return (int64_t(off[0] + 512) << 20) | (int64_t(off[1] + 512) << 10) |
           int64_t(off[2] + 512);
  }

  std::map<int64_t, double> near_table_;
  mutable std::vector<double> kn_;
  mutable std::vector<double> ks_;
};

// Distance from an interior point x to the boundary of the box [-L, L]^n
// along the unit direction omega.
inline double box_exit_distance(int n, double L, const double* x, const double* omega) {
  double exit = 1e300;
  for (int a = 0; a < n; ++a) {
    if (omega[a] > 1e-300) exit = std::min(exit, (L - x[a]) / omega[a]);
    else if (omega[a] < -1e-300) exit = std::min(exit, (-L - x[a]) / omega[a]);
  }
  return exit;
}

// Complement integral int over the exterior of the box [-R, R]^n of
// |x-y|^{-(n+2s)} dy, reduced to quadrature over directions (closed form in
// dimension one). The exterior region matches the lattice truncation exactly.
inline double exterior_complement_integral(int n, double s, double R,
                                           const double* x) {
  for (int a = 0; a < n; ++a)
    if (std::abs(x[a]) >= R) throw std::domain_error("complement integral needs x inside the box");
  const double p = 2.0 * s;
  if (n == 1) {
    return (std::pow(R - x[0], -p) + std::pow(R + x[0], -p)) / p;
  }
  if (n == 2) {
    const auto f = [&](double theta) {
      const double omega[2] = {std::cos(theta), std::sin(theta)};
      return std::pow(box_exit_distance(2, R, x, omega), -p);
    };
    return integrate_adaptive(f, 0.0, 2.0 * std::numbers::pi, 1e-10) / p;
  }
  if (n == 3) {
    // fixed product rule over spherical angles; diagnostic accuracy
    const int np = 96, nt = 192;
    double acc = 0.0;
    for (int ip = 0; ip < np; ++ip) {
      const double psi = (ip + 0.5) * std::numbers::pi / np;
      for (int it = 0; it < nt; ++it) {
        const double th = (it + 0.5) * 2.0 * std::numbers::pi / nt;
        const double omega[3] = {std::sin(psi) * std::cos(th),
                                 std::sin(psi) * std::sin(th), std::cos(psi)};
        acc += std::pow(box_exit_distance(3, R, x, omega), -p) * std::sin(psi);
      }
    }
    acc *= (std::numbers::pi / np) * (2.0 * std::numbers::pi / nt);
    return acc / p;
  }
  throw config_error("constant-exterior tail supports n <= 3");
}

inline Lattice build_lattice(const FracParams& params, double h, double L, double L_ext,
                             const LatticeOptions& opts = {}) {
  if (!(h > 0.0)) throw config_error("grid spacing must be positive");
  if (!(L > 0.0 && L <= L_ext)) throw config_error("need 0 < L <= L_ext");
  if (opts.cutoff < 1.0) throw config_error("cutoff must be >= 1");
  if (opts.subsamples < 1) throw config_error("subsamples must be >= 1");
  if (params.n > 3) throw config_error("lattice supports n <= 3");

  Lattice lat;
  lat.params = params;
  lat.h = h;
  lat.opts = opts;
  lat.half_span = static_cast<int>(std::llround(L_ext / h));
  if (lat.half_span < 1) throw config_error("L_ext must cover at least one cell");
  lat.axis_nodes = 2 * lat.half_span + 1;
  lat.L_ext = lat.half_span * h;  // snapped to the grid
  lat.L = L;
  if (L > lat.L_ext - 0.5 * h)
    throw config_error("Omega must leave an exterior collar: L <= L_ext - h");

  std::size_t count = 1;
  for (int a = 0; a < params.n; ++a) {
    count *= lat.axis_nodes;
    if (count > opts.max_nodes)
      throw resource_error("node count exceeds max_nodes (pair storage is O(N^2))");
  }
  lat.node_count = count;

  lat.coords.resize(count * params.n);
  lat.omega.resize(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto mi = lat.multi_index(i);
    double r2 = 0.0, linf = 0.0;
    for (int a = 0; a < params.n; ++a) {
      const double x = lat.axis_coord(mi[a]);
      lat.coords[i * params.n + a] = x;
      r2 += x * x;
      linf = std::max(linf, std::abs(x));
    }
    const bool inside = (opts.shape == DomainShape::ball)
                            ? (std::sqrt(r2) <= L + 1e-12)
                            : (linf <= L + 1e-12);
    lat.omega[i] = inside ? 1 : 0;
    if (inside) lat.omega_nodes.push_back(static_cast<uint32_t>(i));
  }
  if (lat.omega_nodes.empty()) throw config_error("Omega mask is empty");
  if (lat.omega_nodes.size() == count) throw config_error("Omega mask has no exterior collar");

  // near-diagonal averaged kernel, one value per integer offset
  const double q = params.n + 2.0 * params.s;
  const int reach = static_cast<int>(std::ceil(opts.cutoff));
  std::array<int, 3> off{};
  const auto visit_offsets = [&](auto&& self, int axis) -> void {
    if (axis == params.n) {
      double d2 = 0.0;
      for (int a = 0; a < params.n; ++a) d2 += double(off[a]) * off[a];
      if (d2 == 0.0) return;
      if (std::sqrt(d2) < opts.cutoff) {
        lat.near_table_[Lattice::offset_key(off)] =
            Lattice::averaged_kernel(params.n, q, h, off, opts.subsamples);
      }
      return;
    }
    for (int v = -reach; v <= reach; ++v) {
      off[axis] = v;
      self(self, axis + 1);
    }
  };
  visit_offsets(visit_offsets, 0);

  // CSR rows: Omega rows pair with every other node, exterior rows only with Omega
  lat.row_ptr.assign(count + 1, 0);
  const std::size_t omega_count = lat.omega_nodes.size();
  for (std::size_t i = 0; i < count; ++i)
    lat.row_ptr[i + 1] = lat.in_omega(i) ? (count - 1)
                                         : (omega_count - 0);
  for (std::size_t i = 0; i < count; ++i) lat.row_ptr[i + 1] += lat.row_ptr[i];
  lat.col.resize(lat.row_ptr[count]);
  lat.kval.resize(lat.row_ptr[count]);

  parallel_for_chunks(0, count, 64, [&](std::size_t lo, std::size_t hi) {
    for (std::size_t i = lo; i < hi; ++i) {
      uint64_t at = lat.row_ptr[i];
      const auto mi = lat.multi_index(i);
      const auto emit = [&](std::size_t j) {
        std::array<int, 3> o{};
        const auto mj = lat.multi_index(j);
        for (int a = 0; a < params.n; ++a) o[a] = mj[a] - mi[a];
        lat.col[at] = static_cast<uint32_t>(j);
        lat.kval[at] = lat.kernel_for_offset(o);
        ++at;
      };
      if (lat.in_omega(i)) {
        for (std::size_t j = 0; j < count; ++j)
          if (j != i) emit(j);
      } else {
        for (const uint32_t j : lat.omega_nodes) emit(j);
      }
    }
  });

  if (opts.tail_mode == TailMode::constant_exterior) {
    lat.tail_density.assign(count, 0.0);
    parallel_for_chunks(0, omega_count, 16, [&](std::size_t lo, std::size_t hi) {
      for (std::size_t t = lo; t < hi; ++t) {
        const uint32_t i = lat.omega_nodes[t];
        lat.tail_density[i] =
            exterior_complement_integral(params.n, params.s, lat.L_ext, lat.node(i));
      }
    });
    if (opts.tail_value.empty())
      throw config_error("constant-exterior tail mode requires a tail value");
    if (static_cast<int>(opts.tail_value.size()) != params.d)
      throw config_error("tail value must have d components");
  }
  return lat;
}

// ---------------------------------------------------------------------------
// Node fields

// Scalar- or R^d-valued node data on a lattice.
struct Field {
  const Lattice* lat = nullptr;
  int d = 1;
  std::vector<double> v;  // node_count * d, interleaved

  Field() = default;
  Field(const Lattice& l, int dd) : lat(&l), d(dd), v(l.node_count * dd, 0.0) {}

  double* at(std::size_t i) { return &v[i * d]; }
  const double* at(std::size_t i) const { return &v[i * d]; }

  double norm_at(std::size_t i) const {
    double n2 = 0.0;
    for (int c = 0; c < d; ++c) n2 += at(i)[c] * at(i)[c];
    return std::sqrt(n2);
  }
};

constexpr double kSphereTol = 1e-12;

inline double max_unit_defect(const Field& u) {
  double worst = 0.0;
  for (std::size_t i = 0; i < u.lat->node_count; ++i)
    worst = std::max(worst, std::abs(u.norm_at(i) - 1.0));
  return worst;
}

// Unit-norm field; construction validates or renormalizes.
struct SphereField : Field {
  SphereField() = default;
  explicit SphereField(const Field& f, bool renormalize = false) : Field(f) {
    if (renormalize) {
      for (std::size_t i = 0; i < lat->node_count; ++i) {
        const double n = norm_at(i);
        if (n < 0.5) throw degenerate_interpolation_error("near-zero vector cannot be renormalized");
        for (int c = 0; c < d; ++c) at(i)[c] /= n;
      }
    }
    if (max_unit_defect(*this) > kSphereTol)
      throw std::invalid_argument("SphereField: values are not unit norm");
  }
};

// ---------------------------------------------------------------------------
// Presets

struct PresetParams {
  int d = 2;
  double radius = 1.0;    // char-ball
  double turns = 1.0;     // winding
  uint64_t seed = 0;      // random-perturbation
  double amplitude = 0.5; // random-perturbation
};

inline SphereField preset_field(const Lattice& lat, const std::string& name,
                                const PresetParams& pp = {}) {
  const int n = lat.params.n;
  const int d = pp.d;
  if (d < 1) throw config_error("preset: d must be >= 1");
  Field f(lat, d);

  const auto pm_value = [&](bool plus, double* out) {
    // S^0 embeds as +-1 (d=1) or (+-1, 0, ...) for d >= 2
    for (int c = 0; c < d; ++c) out[c] = 0.0;
    out[0] = plus ? 1.0 : -1.0;
  };

  if (name == "constant") {
    for (std::size_t i = 0; i < lat.node_count; ++i) pm_value(true, f.at(i));
  } else if (name == "hedgehog") {
    if (n < 2 || d < 2) throw config_error("hedgehog needs n >= 2 and d >= 2");
    if (d < n) throw config_error("hedgehog needs d >= n");
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      const double* x = lat.node(i);
      double r2 = 0.0;
      for (int a = 0; a < n; ++a) r2 += x[a] * x[a];
      double* out = f.at(i);
      for (int c = 0; c < d; ++c) out[c] = 0.0;
      if (r2 == 0.0) {
        out[0] = 1.0;  // convention at the origin node
      } else {
        const double r = std::sqrt(r2);
        for (int a = 0; a < n; ++a) out[a] = x[a] / r;
      }
    }
  } else if (name == "char-ball") {
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      const double* x = lat.node(i);
      double r2 = 0.0;
      for (int a = 0; a < n; ++a) r2 += x[a] * x[a];
      pm_value(std::sqrt(r2) <= pp.radius + 1e-12, f.at(i));
    }
  } else if (name == "step") {
    for (std::size_t i = 0; i < lat.node_count; ++i)
      pm_value(lat.node(i)[0] >= 0.0, f.at(i));
  } else if (name == "winding") {
    if (d < 2) throw config_error("winding needs d >= 2");
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      const double theta = std::numbers::pi * pp.turns * lat.node(i)[0] / lat.L;
      double* out = f.at(i);
      for (int c = 0; c < d; ++c) out[c] = 0.0;
      out[0] = std::cos(theta);
      out[1] = std::sin(theta);
    }
  } else if (name == "random-perturbation") {
    std::mt19937_64 rng(pp.seed);
    std::normal_distribution<double> gauss(0.0, 1.0);
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      double* out = f.at(i);
      out[0] = 1.0;
      for (int c = 1; c < d; ++c) out[c] = 0.0;
      for (int c = 0; c < d; ++c) out[c] += pp.amplitude * gauss(rng);
      double nn = 0.0;
      for (int c = 0; c < d; ++c) nn += out[c] * out[c];
      if (nn < 1e-8) { out[0] = 1.0; nn = 1.0; }
      const double inv = 1.0 / std::sqrt(nn);
      for (int c = 0; c < d; ++c) out[c] *= inv;
    }
  } else {
    throw config_error("unknown preset: " + name);
  }
  return SphereField(f);
}

// Uniform random unit field, seeded; test utility.
inline SphereField random_unit_field(const Lattice& lat, int d, uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> gauss(0.0, 1.0);
  Field f(lat, d);
  for (std::size_t i = 0; i < lat.node_count; ++i) {
    double nn = 0.0;
    do {
      nn = 0.0;
      for (int c = 0; c < d; ++c) {
        f.at(i)[c] = gauss(rng);
        nn += f.at(i)[c] * f.at(i)[c];
      }
    } while (nn < 1e-12);
    const double inv = 1.0 / std::sqrt(nn);
    for (int c = 0; c < d; ++c) f.at(i)[c] *= inv;
  }
  return SphereField(f);
}

// Scalar Gaussian bump exp(-|x|^2 / (2 sigma^2)); diagnostic field for the
// energy and extension refinement studies.
inline Field gaussian_field(const Lattice& lat, double sigma = 1.0) {
  Field f(lat, 1);
  for (std::size_t i = 0; i < lat.node_count; ++i) {
    const double* x = lat.node(i);
    double r2 = 0.0;
    for (int a = 0; a < lat.params.n; ++a) r2 += x[a] * x[a];
    f.at(i)[0] = std::exp(-0.5 * r2 / (sigma * sigma));
  }
  return f;
}

// ---------------------------------------------------------------------------
// Field dump: text header + row-major float64 binary payload.

inline void dump_field(const Field& f, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw config_error("cannot open " + path + " for writing");
  char head[256];
  std::snprintf(head, sizeof(head),
                "fracmap-field v1\nn %d\nd %d\ns %.17g\nh %.17g\nL %.17g\nL_ext %.17g\n"
                "nodes %zu\npayload row-major float64\n",
                f.lat->params.n, f.d, f.lat->params.s, f.lat->h, f.lat->L, f.lat->L_ext,
                f.lat->node_count);
  out << head;
  out.write(reinterpret_cast<const char*>(f.v.data()),
            static_cast<std::streamsize>(f.v.size() * sizeof(double)));
}

// Loads a dump written against a compatible lattice (geometry must match).
inline Field load_field(const Lattice& lat, const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw config_error("cannot open " + path);
  std::string line;
  std::getline(in, line);
  if (line != "fracmap-field v1") throw config_error("not a fracmap field dump: " + path);
  int n = 0, d = 0;
  double s = 0, h = 0, L = 0, Lext = 0;
  std::size_t nodes = 0;
  std::string key;
  for (int row = 0; row < 7; ++row) {
    in >> key;
    if (key == "n") in >> n;
    else if (key == "d") in >> d;
    else if (key == "s") in >> s;
    else if (key == "h") in >> h;
    else if (key == "L") in >> L;
    else if (key == "L_ext") in >> Lext;
    else if (key == "nodes") { in >> nodes; std::getline(in, line); std::getline(in, line); break; }
  }
  if (n != lat.params.n || nodes != lat.node_count || std::abs(h - lat.h) > 1e-12)
    throw config_error("field dump does not match the lattice geometry");
  Field f(lat, d);
  in.read(reinterpret_cast<char*>(f.v.data()),
          static_cast<std::streamsize>(f.v.size() * sizeof(double)));
  if (!in) throw config_error("truncated field payload in " + path);
  return f;
}

inline void export_field_csv(const Field& f, const std::string& path) {
  if (f.lat->params.n > 2) throw config_error("CSV export supports n <= 2");
  std::ofstream out(path);
  if (!out) throw config_error("cannot open " + path + " for writing");
  out << (f.lat->params.n == 1 ? "x" : "x,y");
  for (int c = 0; c < f.d; ++c) out << ",u" << c;
  out << "\n";
  char buf[64];
  for (std::size_t i = 0; i < f.lat->node_count; ++i) {
    for (int a = 0; a < f.lat->params.n; ++a) {
      std::snprintf(buf, sizeof(buf), "%.17g", f.lat->node(i)[a]);
      out << (a ? "," : "") << buf;
    }
    for (int c = 0; c < f.d; ++c) {
      std::snprintf(buf, sizeof(buf), "%.17g", f.at(i)[c]);
      out << "," << buf;
    }
    out << "\n";
  }
}

}  // namespace fracmap
