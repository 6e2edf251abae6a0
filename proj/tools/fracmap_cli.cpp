#include <cstdio>
#include <exception>
#include <fstream>
#include <string>

#include <CLI11.hpp>

#include "fracmap/run.hpp"

namespace {

// Attaches the shared override flags to one subcommand.
void add_common_flags(CLI::App* cmd, fracmap::RunConfig& cfg, std::string& config_path) {
  cmd->set_help_flag("--help", "print this help");
  cmd->add_option("--config", config_path, "JSON config file; flags override its fields");
  cmd->add_option("--n", cfg.n, "spatial dimension");
  cmd->add_option("--s", cfg.s, "fractional order in (0,1)");
  cmd->add_option("--d", cfg.d, "target dimension (sphere S^{d-1})");
  cmd->add_option("--h", cfg.h, "grid spacing");
  cmd->add_option("--L", cfg.L, "domain radius");
  cmd->add_option("--L-ext", cfg.L_ext, "truncation radius (default 2L)");
  cmd->add_option("--cutoff", cfg.cutoff, "near-diagonal averaging cutoff in cells");
  cmd->add_option("--subsamples", cfg.subsamples, "kernel subsamples per axis");
  cmd->add_option("--shape", cfg.shape, "Omega shape: ball or box");
  cmd->add_option("--tail-mode", cfg.tail_mode, "zero or constant-exterior");
  cmd->add_option("--tail-value", cfg.tail_value, "exterior constant (d components)");
  cmd->add_option("--levels", cfg.levels, "extension z levels");
  cmd->add_option("--z-max", cfg.z_max, "extension height (default L_ext)");
  cmd->add_option("--first-thickness", cfg.first_thickness, "first z cell thickness");
  cmd->add_option("--preset", cfg.preset,
                  "constant | hedgehog | char-ball | step | winding | random-perturbation | gaussian");
  cmd->add_option("--radius", cfg.preset_radius, "char-ball radius");
  cmd->add_option("--turns", cfg.preset_turns, "winding turns");
  cmd->add_option("--amplitude", cfg.preset_amplitude, "random perturbation amplitude");
  cmd->add_option("--tol", cfg.solver.tol_tangential, "solver tangential tolerance");
  cmd->add_option("--max-iters", cfg.solver.max_iters, "solver iteration cap");
  cmd->add_option("--threads", cfg.threads, "worker threads (env FRACMAP_THREADS fallback)");
  cmd->add_option("--seed", cfg.seed, "random seed");
  cmd->add_option("--out", cfg.out_dir, "output directory");
  cmd->add_option("--field", cfg.field_path, "input field dump");
  cmd->add_option("--rho", cfg.rho, "blowup scale");
  cmd->add_option("--center", cfg.center, "center point (n components)");
  cmd->add_option("--epsilon", cfg.epsilon, "singular threshold (0: calibrate)");
  cmd->add_option("--replace-radius", cfg.replace_radius, "harmonic replacement ball radius");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"fracmap: discrete fractional s-Dirichlet energies on sphere-valued maps"};
  app.set_help_flag("--help", "print this help");
  app.require_subcommand(1);

  const std::vector<std::string> commands = {"constants", "energy",  "minimize", "extend",
                                             "density",   "check",   "replace",  "blowup",
                                             "singular",  "perimeter"};
  fracmap::RunConfig cfg;
  if (const char* env = std::getenv("FRACMAP_THREADS")) {
    const int t = std::atoi(env);
    if (t >= 1) cfg.threads = t;
  }
  std::string config_path;
  std::string chosen;
  for (const auto& name : commands) {
    CLI::App* sub = app.add_subcommand(name);
    add_common_flags(sub, cfg, config_path);
    sub->callback([&chosen, name] { chosen = name; });
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  try {
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      if (!in) throw fracmap::config_error("cannot open config " + config_path);
      fracmap::json j;
      in >> j;
      fracmap::RunConfig from_file = fracmap::RunConfig::from_json(j);
      // flags already parsed into cfg win over file values: re-parse on top
      std::swap(cfg, from_file);
      CLI::App reparse{"reparse"};
      reparse.require_subcommand(1);
      std::string ignored;
      for (const auto& name : commands) {
        CLI::App* sub = reparse.add_subcommand(name);
        add_common_flags(sub, cfg, ignored);
      }
      reparse.parse(argc, argv);
    }
    return fracmap::run(chosen, cfg);
  } catch (const fracmap::config_error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const std::invalid_argument& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return 2;
  } catch (const std::domain_error& e) {
    std::fprintf(stderr, "domain error: %s\n", e.what());
    return 2;
  } catch (const fracmap::numerical_error& e) {
    std::fprintf(stderr, "numerical error: %s\n", e.what());
    return 3;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 3;
  }
}
