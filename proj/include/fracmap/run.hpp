#pragma once

#include <chrono>
#include <filesystem>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "fracmap/analysis.hpp"
#include "fracmap/constants.hpp"
#include "fracmap/extension.hpp"
#include "fracmap/lattice.hpp"
#include "fracmap/nonlocal.hpp"
#include "fracmap/solver.hpp"
#include "fracmap/weighted_pde.hpp"

namespace fracmap {

using json = nlohmann::ordered_json;

// Full resolved configuration of one CLI run; every report embeds it.
struct RunConfig {
  // parameters
  int n = 1;
  double s = 0.5;
  int d = 2;
  // lattice
  double h = 1.0 / 16.0;
  double L = 1.0;
  double L_ext = 0.0;  // 0: defaults to 2 L
  double cutoff = 2.0;
  int subsamples = 4;
  std::string shape = "ball";
  std::string tail_mode = "zero";
  std::vector<double> tail_value;
  std::size_t max_nodes = 80000;
  // extension grid
  std::size_t levels = 32;
  double z_max = 0.0;           // 0: defaults to L_ext
  double first_thickness = 0.0; // 0: defaults to h
  // solver
  SolverConfig solver;
  // preset
  std::string preset = "constant";
  double preset_radius = 1.0;
  double preset_turns = 1.0;
  double preset_amplitude = 0.5;
  uint64_t seed = 0;
  // command specific
  std::string field_path;   // input dump, when a command consumes one
  double rho = 0.5;         // blowup scale
  std::vector<double> center;
  double epsilon = 0.0;     // singular threshold; 0 means calibrate
  double replace_radius = 0.0;
  int threads = 1;
  std::string out_dir = ".";

  void resolve() {
    if (L_ext <= 0.0) L_ext = 2.0 * L;
    if (z_max <= 0.0) z_max = L_ext;
    if (first_thickness <= 0.0) first_thickness = h;
    if (center.empty()) center.assign(std::size_t(n), 0.0);
    if (tail_mode == "constant-exterior" && tail_value.empty())
      tail_value.assign(std::size_t(d), 0.0), tail_value[0] = 1.0;
    if (threads < 1) throw config_error("threads must be >= 1");
  }

  LatticeOptions lattice_options() const {
    LatticeOptions o;
    o.cutoff = cutoff;
    o.subsamples = subsamples;
    if (shape == "ball") o.shape = DomainShape::ball;
    else if (shape == "box") o.shape = DomainShape::box;
    else throw config_error("shape must be ball or box");
    if (tail_mode == "zero") o.tail_mode = TailMode::zero;
    else if (tail_mode == "constant-exterior") o.tail_mode = TailMode::constant_exterior;
    else throw config_error("tail_mode must be zero or constant-exterior");
    o.tail_value = tail_value;
    o.max_nodes = max_nodes;
    return o;
  }

  json to_json() const {
    json j;
    j["n"] = n;
    j["s"] = s;
    j["d"] = d;
    j["h"] = h;
    j["L"] = L;
    j["L_ext"] = L_ext;
    j["cutoff"] = cutoff;
    j["subsamples"] = subsamples;
    j["shape"] = shape;
    j["tail_mode"] = tail_mode;
    j["tail_value"] = tail_value;
    j["levels"] = levels;
    j["z_max"] = z_max;
    j["first_thickness"] = first_thickness;
    j["solver"] = {{"max_iters", solver.max_iters},
                   {"tol_tangential", solver.tol_tangential},
                   {"initial_step", solver.initial_step},
                   {"backtrack_factor", solver.backtrack_factor},
                   {"armijo_c", solver.armijo_c}};
    j["preset"] = preset;
    j["preset_radius"] = preset_radius;
    j["preset_turns"] = preset_turns;
    j["preset_amplitude"] = preset_amplitude;
    j["seed"] = seed;
    j["field_path"] = field_path;
    j["rho"] = rho;
    j["center"] = center;
    j["epsilon"] = epsilon;
    j["threads"] = threads;
    j["out_dir"] = out_dir;
    return j;
  }

  static RunConfig from_json(const json& j) {
    RunConfig c;
    const auto get = [&](const char* key, auto& slot) {
      if (j.contains(key)) slot = j.at(key).get<std::decay_t<decltype(slot)>>();
    };
    get("n", c.n); get("s", c.s); get("d", c.d);
    get("h", c.h); get("L", c.L); get("L_ext", c.L_ext);
    get("cutoff", c.cutoff); get("subsamples", c.subsamples);
    get("shape", c.shape); get("tail_mode", c.tail_mode); get("tail_value", c.tail_value);
    get("max_nodes", c.max_nodes);
    get("levels", c.levels); get("z_max", c.z_max); get("first_thickness", c.first_thickness);
    if (j.contains("solver")) {
      const auto& sj = j.at("solver");
      if (sj.contains("max_iters")) c.solver.max_iters = sj.at("max_iters").get<std::size_t>();
      if (sj.contains("tol_tangential")) c.solver.tol_tangential = sj.at("tol_tangential").get<double>();
      if (sj.contains("initial_step")) c.solver.initial_step = sj.at("initial_step").get<double>();
      if (sj.contains("backtrack_factor")) c.solver.backtrack_factor = sj.at("backtrack_factor").get<double>();
      if (sj.contains("armijo_c")) c.solver.armijo_c = sj.at("armijo_c").get<double>();
    }
    get("preset", c.preset); get("preset_radius", c.preset_radius);
    get("preset_turns", c.preset_turns); get("preset_amplitude", c.preset_amplitude);
    get("seed", c.seed);
    get("field_path", c.field_path); get("rho", c.rho); get("center", c.center);
    get("epsilon", c.epsilon); get("threads", c.threads); get("out_dir", c.out_dir);
    return c;
  }
};

namespace detail_run {

inline Field make_field(const Lattice& lat, const RunConfig& cfg) {
  if (cfg.preset == "gaussian") return gaussian_field(lat);
  PresetParams pp;
  pp.d = cfg.d;
  pp.radius = cfg.preset_radius;
  pp.turns = cfg.preset_turns;
  pp.seed = cfg.seed;
  pp.amplitude = cfg.preset_amplitude;
  return preset_field(lat, cfg.preset, pp);
}

inline SphereField make_sphere_field(const Lattice& lat, const RunConfig& cfg) {
  PresetParams pp;
  pp.d = cfg.d;
  pp.radius = cfg.preset_radius;
  pp.turns = cfg.preset_turns;
  pp.seed = cfg.seed;
  pp.amplitude = cfg.preset_amplitude;
  return preset_field(lat, cfg.preset, pp);
}

}  // namespace detail_run

// Exactness-class identity suite: every residual is an exact discrete
// rearrangement and must sit at machine precision for any unit field.
inline json exactness_check(const Lattice& lat, int d, uint64_t seed, bool* all_pass,
                            double tol = 1e-11) {
  const SphereField u = random_unit_field(lat, d, seed);
  json out;
  double worst = 0.0;
  const auto note = [&](const char* name, double residual) {
    out[name] = residual;
    worst = std::max(worst, residual);
  };

  // s-gradient antisymmetry (exact lookup through the transpose entry)
  {
    const PairField g = s_gradient(u, 0);
    double sup = 0.0, scale = 0.0;
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      for (uint64_t t = lat.row_ptr[i]; t < lat.row_ptr[i + 1]; ++t) {
        const std::size_t j = lat.col[t];
        if (j < i) continue;
        const auto lo = lat.col.begin() + ptrdiff_t(lat.row_ptr[j]);
        const auto hi = lat.col.begin() + ptrdiff_t(lat.row_ptr[j + 1]);
        const auto itr = std::lower_bound(lo, hi, uint32_t(i));
        if (itr == hi || *itr != uint32_t(i)) continue;
        const uint64_t tt = uint64_t(itr - lat.col.begin());
        sup = std::max(sup, std::abs(g.v[t] + g.v[tt]));
        scale = std::max(scale, std::abs(g.v[t]));
      }
    }
    note("sgrad_antisymmetry", sup / (1.0 + scale));
  }

  // ||d_s u||^2 = 2 E_s (pair set only; run with zero tail for the identity)
  {
    double norm2 = 0.0;
    for (int c = 0; c < d; ++c) norm2 += l2od_norm_sq(s_gradient(u, c));
    std::vector<uint8_t> all_omega = lat.omega;
    const double e2 = 2.0 * energy(u, lat);
    note("dsu_norm_vs_energy", std::abs(norm2 - e2) / (1.0 + std::abs(e2)));
    (void)all_omega;
  }

  // weak/strong duality with a random interior test map
  {
    SphereField psi_raw = random_unit_field(lat, d, seed ^ 0x9E3779B97F4A7C15ull);
    Field psi(lat, d);
    for (const uint32_t i : lat.omega_nodes)
      for (int c = 0; c < d; ++c) psi.at(i)[c] = psi_raw.at(i)[c];
    const Field lap = frac_laplacian_strong(u);
    double pairing = 0.0;
    for (const uint32_t i : lat.omega_nodes)
      for (int c = 0; c < d; ++c) pairing += lap.at(i)[c] * psi.at(i)[c];
    pairing *= lat.cell_volume();
    const double weak = frac_laplacian_weak(u, psi);
    note("weak_strong_duality", std::abs(pairing - weak) / (1.0 + std::abs(weak)));
  }

  // Euler-Lagrange decomposition identity
  note("decomposition", decomposition_residual(u));

  // conservation identity agreement over all single-node indicators
  if (d >= 2) {
    const ConservationSweep sweep = conservation_residual_all_indicators(u, 0, 1);
    note("conservation_agreement", sweep.max_disagreement / (1.0 + sweep.max_abs_pairing));
  }

  // antisymmetric potentials: Omega^{aa} = 0 and Omega^{ab} = -Omega^{ba}
  if (d >= 2) {
    const PairField Waa = omega_field(u, 0, 0);
    const PairField Wab = omega_field(u, 0, 1);
    const PairField Wba = omega_field(u, 1, 0);
    double sup = 0.0;
    for (std::size_t t = 0; t < Waa.v.size(); ++t) {
      sup = std::max(sup, std::abs(Waa.v[t]));
      sup = std::max(sup, std::abs(Wab.v[t] + Wba.v[t]));
    }
    note("omega_antisymmetry", sup);
  }

  // perimeter identity on a char-ball mask
  {
    std::vector<uint8_t> mask(lat.node_count, 0);
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      double r2 = 0.0;
      for (int a = 0; a < lat.params.n; ++a) r2 += lat.node(i)[a] * lat.node(i)[a];
      mask[i] = std::sqrt(r2) <= 0.5 * lat.L ? 1 : 0;
    }
    Field chi(lat, 1);
    for (std::size_t i = 0; i < lat.node_count; ++i) chi.at(i)[0] = mask[i] ? 1.0 : -1.0;
    const double e = energy(chi, lat);
    const double per = frac_perimeter(mask, lat);
    note("perimeter_identity",
         std::abs(e - lat.params.gamma * per) / (1.0 + std::abs(e)));
  }

  *all_pass = worst <= tol;
  out["worst"] = worst;
  out["tolerance"] = tol;
  out["pass"] = *all_pass;
  return out;
}

// ---------------------------------------------------------------------------
// Command dispatch: returns the process exit status and writes artifacts.

inline int run(const std::string& command, RunConfig cfg) {
  using clock = std::chrono::steady_clock;
  const auto t0 = clock::now();
  cfg.resolve();
  set_thread_count(cfg.threads);
  std::filesystem::create_directories(cfg.out_dir);
  const auto artifact = [&](const std::string& name) {
    return (std::filesystem::path(cfg.out_dir) / name).string();
  };

  json report;
  report["command"] = command;
  report["config"] = cfg.to_json();
  json& res = report["results"];
  int status = 0;

  const auto need_params = [&] { return FracParams::make(cfg.n, cfg.s, cfg.d); };
  const auto need_lattice = [&](const FracParams& p) {
    return build_lattice(p, cfg.h, cfg.L, cfg.L_ext, cfg.lattice_options());
  };

  if (command == "constants") {
    const FracParams p = need_params();
    res["gamma"] = p.gamma;
    res["sigma"] = p.sigma;
    res["delta"] = p.delta;
    res["a"] = p.a;
    if (cfg.n >= 2) {
      const AlphaResult ar = alpha_ns(cfg.n, cfg.s);
      res["alpha_quadrature"] = ar.quadrature;
      res["alpha_closed_form"] = ar.closed_form;
    }
  } else if (command == "energy") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const Field u = detail_run::make_field(lat, cfg);
    res["energy"] = energy(u, lat);
    dump_field(u, artifact("field.bin"));
    if (cfg.n <= 2) export_field_csv(u, artifact("field.csv"));
  } else if (command == "perimeter") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    std::vector<uint8_t> mask(lat.node_count, 0);
    for (std::size_t i = 0; i < lat.node_count; ++i) {
      double r2 = 0.0;
      for (int a = 0; a < cfg.n; ++a) r2 += lat.node(i)[a] * lat.node(i)[a];
      mask[i] = std::sqrt(r2) <= cfg.preset_radius ? 1 : 0;
    }
    const double per = frac_perimeter(mask, lat);
    Field chi(lat, 1);
    for (std::size_t i = 0; i < lat.node_count; ++i) chi.at(i)[0] = mask[i] ? 1.0 : -1.0;
    const double e = energy(chi, lat);
    res["perimeter"] = per;
    res["gamma_times_perimeter"] = lat.params.gamma * per;
    res["energy_of_char_field"] = e;
    res["identity_residual"] = std::abs(e - lat.params.gamma * per) / (1.0 + e);
  } else if (command == "minimize") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const SphereField u0 = detail_run::make_sphere_field(lat, cfg);
    const MinimizeResult mr = minimize(u0, lat, cfg.solver);
    dump_field(mr.u, artifact("field.bin"));
    if (cfg.n <= 2) export_field_csv(mr.u, artifact("field.csv"));
    res["status"] = mr.report.status == SolveStatus::converged ? "converged"
                    : mr.report.status == SolveStatus::max_iters ? "max_iters"
                                                                 : "stalled";
    res["iterations"] = mr.report.iterations;
    res["final_energy"] = mr.report.final_energy;
    res["final_tangential_residual"] = mr.report.final_tangential_residual;
    res["accepted_steps"] = mr.report.accepted_steps;
    res["rejected_steps"] = mr.report.rejected_steps;
    res["energy_history"] = mr.report.energy_history;
    if (mr.report.status == SolveStatus::stalled) status = 3;
  } else if (command == "extend") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const Field u = cfg.field_path.empty() ? detail_run::make_field(lat, cfg)
                                           : load_field(lat, cfg.field_path);
    const HalfSpaceGrid grid =
        build_half_space_grid(lat, cfg.levels, cfg.z_max, cfg.first_thickness);
    const ExtensionField v = extend(u, grid);
    dump_extension(v, artifact("extension.bin"));
    res["weighted_energy"] = weighted_energy(v);
    double sup_u = 0.0, sup_v = 0.0;
    for (const double x : u.v) sup_u = std::max(sup_u, std::abs(x));
    for (const double x : v.v) sup_v = std::max(sup_v, std::abs(x));
    res["sup_trace"] = sup_u;
    res["sup_extension"] = sup_v;
  } else if (command == "density") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const Field u = cfg.field_path.empty() ? detail_run::make_field(lat, cfg)
                                           : load_field(lat, cfg.field_path);
    const HalfSpaceGrid grid =
        build_half_space_grid(lat, cfg.levels, cfg.z_max, cfg.first_thickness);
    const ExtensionField v = extend(u, grid);
    std::vector<double> radii;
    for (double r = 4.0 * lat.h; r <= 0.75 * lat.L + 1e-12; r += 2.0 * lat.h)
      radii.push_back(r);
    const DensityProfile prof =
        monotonicity_profile(u, v, cfg.center.data(), radii);
    export_profile_csv(prof, artifact("profile.csv"));
    res["xi_estimate"] = prof.xi;
    res["max_negative_increment"] = prof.max_negative_increment;
    res["radii"] = prof.radii;
    res["theta"] = prof.theta;
  } else if (command == "check") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    bool pass = false;
    res = exactness_check(lat, cfg.d, cfg.seed ? cfg.seed : 0x5EEDull, &pass);
    if (!pass) status = 1;
  } else if (command == "replace") {
    if (cfg.field_path.empty()) throw config_error("replace needs --field <extension dump>");
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    HalfSpaceGrid grid;
    const ExtensionField v = load_extension(lat, grid, cfg.field_path);
    const double R = cfg.replace_radius > 0.0 ? cfg.replace_radius
                                              : 0.5 * std::min(lat.L, grid.z_max());
    // symmetric grid mirroring the extension levels
    std::vector<double> zl;
    for (auto it = grid.zmid.rbegin(); it != grid.zmid.rend(); ++it) zl.push_back(-*it);
    for (const double z : grid.zmid) zl.push_back(z);
    const WeightedGrid wg = make_weighted_grid(cfg.n, p.a, lat.h, lat.axis_nodes, zl,
                                               std::vector<double>(std::size_t(cfg.n), 0.0), R);
    const std::size_t M = grid.levels();
    const std::size_t xc = wg.x_count();
    double e_before = 0.0, e_after = 0.0;
    json comps = json::array();
    std::vector<std::vector<double>> solved(v.d);
    for (int c = 0; c < v.d; ++c) {
      std::vector<double> w(wg.node_count());
      for (std::size_t k = 0; k < M; ++k)
        for (std::size_t xi = 0; xi < xc; ++xi) {
          const double val = v.at(xi, k)[c];
          w[wg.flat(xi, M - 1 - k)] = val;   // z < 0 mirror
          w[wg.flat(xi, M + k)] = val;       // z > 0
        }
      e_before += weighted_ball_energy(wg, w, R);
      const WeightedSolveStats st = solve_weighted_dirichlet(wg, w);
      e_after += weighted_ball_energy(wg, w, R);
      const MaxPrincipleReport mp = check_max_principle(wg, w);
      comps.push_back({{"cg_iterations", st.iterations},
                       {"relative_residual", st.relative_residual},
                       {"max_principle_pass", mp.pass}});
      solved[c] = std::move(w);
    }
    res["ball_radius"] = R;
    res["weighted_energy_before"] = e_before;
    res["weighted_energy_after"] = e_after;
    res["components"] = comps;
    std::ofstream out(artifact("replacement.bin"), std::ios::binary);
    for (const auto& w : solved)
      out.write(reinterpret_cast<const char*>(w.data()),
                static_cast<std::streamsize>(w.size() * sizeof(double)));
  } else if (command == "blowup") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const SphereField u = detail_run::make_sphere_field(lat, cfg);
    // reference lattice at the source spacing, so integer blowup scales
    // sample exactly on source nodes
    const Lattice ref = build_lattice(p, lat.h, 0.5 * lat.L, lat.L, cfg.lattice_options());
    const SphereField phi = blowup(u, cfg.center.data(), cfg.rho, ref);
    dump_field(phi, artifact("blowup.bin"));
    res["homogeneity_defect"] = homogeneity_defect(phi);
    const SymmetrySubspace sym = symmetry_subspace(phi, 0.05);
    res["symmetry_dimension"] = sym.dimension;
    res["symmetry_directions"] = sym.directions;
  } else if (command == "singular") {
    const FracParams p = need_params();
    const Lattice lat = need_lattice(p);
    const SphereField u0 = detail_run::make_sphere_field(lat, cfg);
    const MinimizeResult mr = minimize(u0, lat, cfg.solver);
    const HalfSpaceGrid grid =
        build_half_space_grid(lat, cfg.levels, cfg.z_max, cfg.first_thickness);
    const ExtensionField v = extend(mr.u, grid);
    double eps = cfg.epsilon;
    if (eps <= 0.0) {
      // calibrate against the hedgehog plateau for this configuration
      eps = kEpsilonPlateauFactor * hedgehog_plateau(mr.u, v, lat.L);
      res["calibrated_epsilon"] = eps;
    }
    std::vector<double> radii = {4.0 * lat.h, 5.0 * lat.h, 6.0 * lat.h};
    const SingularReport rep = detect_singular(mr.u, v, eps, radii);
    res["epsilon"] = rep.epsilon;
    res["r_min"] = rep.r_min;
    res["flagged_count"] = rep.flagged.size();
    json coords = json::array();
    std::ofstream csv(artifact("flagged.csv"));
    csv << (cfg.n == 1 ? "x" : (cfg.n == 2 ? "x,y" : "x,y,z")) << "\n";
    for (const uint32_t i : rep.flagged) {
      json c = json::array();
      for (int a = 0; a < cfg.n; ++a) {
        c.push_back(lat.node(i)[a]);
        csv << (a ? "," : "") << lat.node(i)[a];
      }
      csv << "\n";
      coords.push_back(c);
    }
    res["flagged_nodes"] = coords;
  } else {
    throw config_error("unknown command: " + command);
  }

  const auto t1 = clock::now();
  report["timing"] = {
      {"seconds", std::chrono::duration<double>(t1 - t0).count()}};
  std::ofstream out(artifact("report.json"));
  out << report.dump(2) << "\n";
  return status;
}

}  // namespace fracmap
