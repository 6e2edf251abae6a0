#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <random>

#include "fracmap/fracmap.hpp"

using namespace fracmap;

namespace {

// Brute-force energy oracle: dumb enumeration of all node pairs with at least
// one endpoint in the mask, independent of the adjacency storage.
double energy_oracle(const Field& u, const Lattice& lat) {
  double acc = 0.0;
  for (std::size_t i = 0; i < lat.node_count; ++i) {
    for (std::size_t j = 0; j < lat.node_count; ++j) {
      if (i == j) continue;
      if (!lat.in_omega(i) && !lat.in_omega(j)) continue;
      double d2 = 0.0;
      for (int c = 0; c < u.d; ++c) {
        const double dc = u.at(i)[c] - u.at(j)[c];
        d2 += dc * dc;
      }
      acc += d2 * lat.kernel_value(i, j);
    }
  }
  return 0.25 * lat.params.gamma * lat.weight_scale() * acc;
}

Lattice three_node_line() {
  // nodes at -1, 0, 1 with h = 1; Omega = middle node only
  const FracParams p = FracParams::make(1, 0.5, 1);
  LatticeOptions o;
  o.cutoff = 1.0;  // point kernel everywhere
  o.shape = DomainShape::box;
  return build_lattice(p, 1.0, 0.25, 1.0, o);
}

}  // namespace

TEST_CASE("three-node hand sums") {
  const Lattice lat = three_node_line();
  REQUIRE(lat.node_count == 3);
  REQUIRE(lat.omega_nodes.size() == 1);
  const double g = lat.params.gamma;

  Field u(lat, 1);
  u.at(1)[0] = 1.0;  // u = (0, 1, 0)

  // two active unordered pairs, |du|^2 = 1, w = 1 each
  CHECK(energy(u, lat) == Catch::Approx(g).epsilon(1e-14));
  CHECK(energy(u, lat) == Catch::Approx(energy_oracle(u, lat)).epsilon(1e-14));

  Field phi(lat, 1);
  phi.at(1)[0] = 1.0;  // indicator of the middle node
  CHECK(frac_laplacian_weak(u, phi) == Catch::Approx(2.0 * g).epsilon(1e-14));

  const Field lap = frac_laplacian_strong(u);
  CHECK(lap.at(1)[0] == Catch::Approx(2.0 * g).epsilon(1e-14));
}

TEST_CASE("constant fields are in every kernel") {
  const FracParams p = FracParams::make(1, 0.5, 2);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = preset_field(lat, "constant", {.d = 2});
  CHECK(energy(u, lat) == 0.0);
  const Field lap = frac_laplacian_strong(u);
  for (const double v : lap.v) CHECK(v == 0.0);
  const ScalarNodeField lam = lagrange_multiplier(u);
  for (const double v : lam) CHECK(v == 0.0);
  const ElResidual r = el_residual(u);
  CHECK(r.sup == 0.0);
  const Field T = t_field(u);
  for (const double v : T.v) CHECK(v == 0.0);
}

TEST_CASE("linear field has zero Laplacian at the center by cancellation") {
  const FracParams p = FracParams::make(1, 0.5, 1);
  const Lattice lat = build_lattice(p, 0.25, 0.5, 1.0);
  Field u(lat, 1);
  for (std::size_t i = 0; i < lat.node_count; ++i) u.at(i)[0] = lat.node(i)[0];
  const Field lap = frac_laplacian_strong(u);
  const std::size_t center = lat.flat_index({lat.half_span, 0, 0});
  CHECK(std::abs(lap.at(center)[0]) <= 1e-12);
}

TEST_CASE("s-gradient identities on a random unit field") {
  const FracParams p = FracParams::make(1, 0.5, 2);
  const Lattice lat = build_lattice(p, 0.125, 1.0, 2.0);
  const SphereField u = random_unit_field(lat, 2, 0x5EED);

  SECTION("antisymmetry") {
    const PairField gpf = s_gradient(u, 0);
    double worst = 0.0;
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      for (uint64_t t = lat.row_ptr[i]; t < lat.row_ptr[i + 1]; ++t) {
        const std::size_t j = lat.col[t];
        if (j < i) continue;
        for (uint64_t tt = lat.row_ptr[j]; tt < lat.row_ptr[j + 1]; ++tt) {
          if (lat.col[tt] == i) {
            worst = std::max(worst, std::abs(gpf.v[t] + gpf.v[tt]));
            break;
          }
        }
      }
    }
    CHECK(worst == 0.0);
  }

  SECTION("norm identity ||d_s u||^2 = 2 E_s") {
    double norm2 = 0.0;
    for (int c = 0; c < 2; ++c) norm2 += l2od_norm_sq(s_gradient(u, c));
    const double e2 = 2.0 * energy(u, lat);
    CHECK(std::abs(norm2 - e2) <= 1e-12 * (1.0 + e2));
  }

  SECTION("odot nonnegativity and the multiplier identity") {
    double worst = 0.0;
    ScalarNodeField sum(lat.node_count, 0.0);
    for (int c = 0; c < 2; ++c) {
      const PairField g = s_gradient(u, c);
      const ScalarNodeField sq = odot(g, g);
      for (std::size_t i = 0; i < lat.node_count; ++i) {
        CHECK(sq[i] >= 0.0);
        sum[i] += sq[i];
      }
    }
    const ScalarNodeField lam = lagrange_multiplier(u);
    for (const uint32_t i : lat.omega_nodes)
      worst = std::max(worst, std::abs(sum[i] - lam[i]) / (1.0 + lam[i]));
    CHECK(worst <= 1e-12);
  }

  SECTION("integrated odot recovers the weak Laplacian") {
    // scalar phi supported in Omega
    Field phi(lat, 1);
    std::mt19937_64 rng(42);
    std::normal_distribution<double> gauss;
    for (const uint32_t i : lat.omega_nodes) phi.at(i)[0] = gauss(rng);
    Field u0(lat, 1);
    for (std::size_t i = 0; i < lat.node_count; ++i) u0.at(i)[0] = u.at(i)[0];
    const PairField gu = s_gradient(u0, 0);
    const PairField gphi = s_gradient(phi, 0);
    const ScalarNodeField prod = odot(gu, gphi);
    double integral = 0.0;
    for (std::size_t i = 0; i < lat.node_count; ++i) integral += prod[i];
    integral *= lat.cell_volume();
    const double weak = frac_laplacian_weak(u0, phi);
    CHECK(std::abs(integral - weak) <= 1e-12 * (1.0 + std::abs(weak)));
  }
}

TEST_CASE("weak/strong duality at machine precision") {
  const FracParams p = FracParams::make(2, 0.4, 2);
  const Lattice lat = build_lattice(p, 0.25, 0.5, 1.0);
  const SphereField u = random_unit_field(lat, 2, 0x5EED);
  Field psi(lat, 2);
  std::mt19937_64 rng(13);
  std::normal_distribution<double> gauss;
  for (const uint32_t i : lat.omega_nodes)
    for (int c = 0; c < 2; ++c) psi.at(i)[c] = gauss(rng);

  const Field lap = frac_laplacian_strong(u);
  double pairing = 0.0;
  for (const uint32_t i : lat.omega_nodes)
    for (int c = 0; c < 2; ++c) pairing += lap.at(i)[c] * psi.at(i)[c];
  pairing *= lat.cell_volume();
  const double weak = frac_laplacian_weak(u, psi);
  CHECK(std::abs(pairing - weak) <= 1e-12 * (1.0 + std::abs(weak)));

  SECTION("bilinear symmetry of the weak form") {
    Field phi2(lat, 2);
    for (const uint32_t i : lat.omega_nodes)
      for (int c = 0; c < 2; ++c) phi2.at(i)[c] = gauss(rng);
    CHECK(frac_laplacian_weak(psi, phi2) ==
          Catch::Approx(frac_laplacian_weak(phi2, psi)).epsilon(1e-12));
  }

  SECTION("test function must vanish outside Omega") {
    Field bad(lat, 2);
    for (std::size_t i = 0; i < lat.node_count; ++i) bad.at(i)[0] = 1.0;
    CHECK_THROWS_AS(frac_laplacian_weak(u, bad), std::invalid_argument);
  }
}

TEST_CASE("multiplier on a characteristic field") {
  const FracParams p = FracParams::make(1, 0.25, 1);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = preset_field(lat, "char-ball", {.d = 1, .radius = 0.5});
  const ScalarNodeField lam = lagrange_multiplier(u);
  for (const uint32_t i : lat.omega_nodes) {
    CHECK(lam[i] >= 0.0);
    // lambda(i) = 2 gamma sum over opposite-sign partners of w / h^n
    double ref = 0.0;
    for (std::size_t j = 0; j < lat.node_count; ++j) {
      if (j == i) continue;
      if (u.at(i)[0] * u.at(j)[0] < 0.0) ref += lat.kernel_value(i, j);
    }
    ref *= 2.0 * lat.params.gamma * lat.cell_volume();
    CHECK(lam[i] == Catch::Approx(ref).margin(1e-13));
  }
}

TEST_CASE("EL residual structure") {
  const FracParams p = FracParams::make(1, 0.5, 3);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = random_unit_field(lat, 3, 0x5EED);
  const ElResidual r = el_residual(u);
  const Field lap = frac_laplacian_strong(u);
  // tangential part of the residual equals the tangential part of the operator
  double worst = 0.0;
  for (const uint32_t i : lat.omega_nodes) {
    double dot = 0.0;
    for (int c = 0; c < 3; ++c) dot += lap.at(i)[c] * u.at(i)[c];
    for (int c = 0; c < 3; ++c) {
      const double t = lap.at(i)[c] - dot * u.at(i)[c];
      worst = std::max(worst, std::abs(t - r.tangential.at(i)[c]));
    }
  }
  CHECK(worst <= 1e-12 * (1.0 + r.sup));
}

TEST_CASE("T field on a two-phase field") {
  const FracParams p = FracParams::make(1, 0.25, 1);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = preset_field(lat, "char-ball", {.d = 1, .radius = 0.5});
  const Field T = t_field(u);
  for (const uint32_t i : lat.omega_nodes) {
    double ref = 0.0;
    for (std::size_t j = 0; j < lat.node_count; ++j) {
      if (j == i || u.at(i)[0] * u.at(j)[0] > 0.0) continue;
      ref += (u.at(i)[0] - u.at(j)[0]) * lat.kernel_value(i, j);
    }
    ref *= lat.params.gamma * lat.cell_volume();
    CHECK(T.at(i)[0] == Catch::Approx(ref).margin(1e-12));
  }
}

TEST_CASE("omega potentials") {
  const FracParams p = FracParams::make(1, 0.5, 3);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = random_unit_field(lat, 3, 0x5EED);
  const PairField Wii = omega_field(u, 1, 1);
  for (const double v : Wii.v) CHECK(v == 0.0);
  const PairField Wab = omega_field(u, 0, 1);
  const PairField Wba = omega_field(u, 1, 0);
  const PairField ga = s_gradient(u, 0);
  const PairField gb = s_gradient(u, 1);
  for (std::size_t t = 0; t < Wab.v.size(); ++t) {
    CHECK(Wab.v[t] == -Wba.v[t]);
    // pointwise bound for unit fields
    CHECK(std::abs(Wab.v[t]) <= std::abs(ga.v[t]) + std::abs(gb.v[t]) + 1e-15);
  }
  CHECK_THROWS_AS(omega_field(u, 0, 5), std::invalid_argument);
}

TEST_CASE("decomposition identity") {
  const FracParams p = FracParams::make(1, 0.5, 3);
  const Lattice lat = build_lattice(p, 0.125, 1.0, 2.0);

  SECTION("random unit field") {
    const SphereField u = random_unit_field(lat, 3, 0x5EED);
    CHECK(decomposition_residual(u) <= 1e-11);
  }

  SECTION("hedgehog in two dimensions") {
    const FracParams p2 = FracParams::make(2, 0.5, 2);
    const Lattice lat2 = build_lattice(p2, 0.25, 0.5, 1.0);
    const SphereField u = preset_field(lat2, "hedgehog", {.d = 2});
    CHECK(decomposition_residual(u) <= 1e-11);
  }

  SECTION("broken unit norm is detected") {
    Field f = random_unit_field(lat, 3, 0x5EED);
    const uint32_t node = lat.omega_nodes[lat.omega_nodes.size() / 2];
    for (int c = 0; c < 3; ++c) f.at(node)[c] *= 2.0;
    CHECK(decomposition_residual(f) > 1e-3);
  }
}

TEST_CASE("conservation laws") {
  const FracParams p = FracParams::make(1, 0.5, 2);
  const Lattice lat = build_lattice(p, 0.125, 1.0, 2.0);
  const SphereField u = random_unit_field(lat, 2, 0x5EED);

  SECTION("diagonal components vanish exactly") {
    Field phi(lat, 1);
    phi.at(lat.omega_nodes[2])[0] = 1.0;
    const ConservationPairing cp = conservation_residual(u, phi, 0, 0);
    CHECK(cp.pairing == 0.0);
    CHECK(cp.cross == 0.0);
  }

  SECTION("pairing agrees with the cross form") {
    Field phi(lat, 1);
    std::mt19937_64 rng(99);
    std::normal_distribution<double> gauss;
    for (const uint32_t i : lat.omega_nodes) phi.at(i)[0] = gauss(rng);
    const ConservationPairing cp = conservation_residual(u, phi, 0, 1);
    CHECK(std::abs(cp.pairing - cp.cross) <= 1e-11 * (1.0 + std::abs(cp.cross)));
  }

  SECTION("indicator sweep agrees node by node") {
    const ConservationSweep sweep = conservation_residual_all_indicators(u, 0, 1);
    CHECK(sweep.max_disagreement <= 1e-11 * (1.0 + sweep.max_abs_pairing));
    // cross-check one node against the single-test-function path
    Field phi(lat, 1);
    phi.at(lat.omega_nodes[1])[0] = 1.0;
    const ConservationPairing cp = conservation_residual(u, phi, 0, 1);
    CHECK(std::abs(cp.pairing) <= sweep.max_abs_pairing + 1e-15);
  }
}

TEST_CASE("fractional perimeter") {
  const FracParams p = FracParams::make(1, 0.25, 1);
  const Lattice lat = build_lattice(p, 0.125, 1.0, 2.0);

  SECTION("empty set has zero perimeter") {
    std::vector<uint8_t> mask(lat.node_count, 0);
    CHECK(frac_perimeter(mask, lat) == 0.0);
  }

  SECTION("complement symmetry") {
    std::vector<uint8_t> mask(lat.node_count, 0);
    for (std::size_t i = 0; i < lat.node_count; ++i)
      mask[i] = std::abs(lat.node(i)[0]) <= 0.5 ? 1 : 0;
    std::vector<uint8_t> conj(lat.node_count, 0);
    for (std::size_t i = 0; i < lat.node_count; ++i) conj[i] = mask[i] ? 0 : 1;
    CHECK(frac_perimeter(mask, lat) == Catch::Approx(frac_perimeter(conj, lat)).epsilon(1e-15));
  }

  SECTION("energy identity") {
    std::vector<uint8_t> mask(lat.node_count, 0);
    for (std::size_t i = 0; i < lat.node_count; ++i)
      mask[i] = std::abs(lat.node(i)[0]) <= 0.5 ? 1 : 0;
    Field chi(lat, 1);
    for (std::size_t i = 0; i < lat.node_count; ++i) chi.at(i)[0] = mask[i] ? 1.0 : -1.0;
    const double e = energy(chi, lat);
    const double per = frac_perimeter(mask, lat);
    CHECK(std::abs(e - lat.params.gamma * per) <= 1e-12 * (1.0 + e));
  }
}

TEST_CASE("energy gradient matches finite differences of the double sum") {
  const FracParams p = FracParams::make(1, 0.3, 2);
  const Lattice lat = build_lattice(p, 0.25, 1.0, 2.0);
  const SphereField u = random_unit_field(lat, 2, 0x5EED);
  // tangent perturbation phi supported in Omega
  Field phi(lat, 2);
  std::mt19937_64 rng(7);
  std::normal_distribution<double> gauss;
  for (const uint32_t i : lat.omega_nodes) {
    double t[2] = {gauss(rng), gauss(rng)};
    const double dot = t[0] * u.at(i)[0] + t[1] * u.at(i)[1];
    for (int c = 0; c < 2; ++c) phi.at(i)[c] = t[c] - dot * u.at(i)[c];
  }
  const double eps = 1e-5;
  Field up(lat, 2), um(lat, 2);
  up.v = u.v;
  um.v = u.v;
  for (std::size_t k = 0; k < u.v.size(); ++k) {
    up.v[k] += eps * phi.v[k];
    um.v[k] -= eps * phi.v[k];
  }
  const double fd = (energy(up, lat) - energy(um, lat)) / (2.0 * eps);
  const double analytic = frac_laplacian_weak(u, phi);
  CHECK(std::abs(fd - analytic) <= 1e-5 * (1.0 + std::abs(analytic)));
}

TEST_CASE("seminorm diagnostics") {
  const FracParams p = FracParams::make(1, 0.25, 1);
  const Lattice lat = build_lattice(p, 0.125, 1.0, 2.0);

  SECTION("constants vanish") {
    Field f(lat, 1);
    for (std::size_t i = 0; i < lat.node_count; ++i) f.at(i)[0] = 3.0;
    const std::size_t center = lat.flat_index({lat.half_span, 0, 0});
    CHECK(sobolev_seminorm(f, center, 0.5, 0.25, 2.0) == 0.0);
    const BallFamily fam = default_ball_family(lat);
    CHECK(morrey_seminorm(f, 0.25, 2.0, fam) == 0.0);
    CHECK(bmo_seminorm(f, fam) == 0.0);
  }

  SECTION("p=2, s'=s matches the masked energy sum up to gamma") {
    const Field f = gaussian_field(lat);
    const std::size_t center = lat.flat_index({lat.half_span, 0, 0});
    const double r = 0.5;
    const double sn = sobolev_seminorm(f, center, r, lat.params.s, 2.0);
    // ball-restricted double sum of the energy: (gamma/2) [f]^2_{W^{s,2}(D)}
    double acc = 0.0;
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      if (std::abs(lat.node(i)[0]) > r + 1e-12) continue;
      for (std::size_t j = 0; j < lat.node_count; ++j) {
        if (i == j || std::abs(lat.node(j)[0]) > r + 1e-12) continue;
        const double df = f.at(i)[0] - f.at(j)[0];
        acc += df * df * lat.kernel_value(i, j);
      }
    }
    acc *= lat.weight_scale();
    CHECK(sn * sn == Catch::Approx(acc).epsilon(1e-12));
  }

  SECTION("linear profile converges under refinement") {
    const Lattice fine = build_lattice(p, 0.0625, 1.0, 2.0);
    const auto linear = [](const Lattice& l) {
      Field f(l, 1);
      for (std::size_t i = 0; i < l.node_count; ++i) f.at(i)[0] = l.node(i)[0];
      return f;
    };
    const std::size_t c0 = lat.flat_index({lat.half_span, 0, 0});
    const std::size_t c1 = fine.flat_index({fine.half_span, 0, 0});
    const double v0 = sobolev_seminorm(linear(lat), c0, 1.0, 0.25, 2.0);
    const double v1 = sobolev_seminorm(linear(fine), c1, 1.0, 0.25, 2.0);
    CHECK(std::abs(v0 - v1) <= 0.05 * v1);
  }
}
