#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "fracmap/run.hpp"

using namespace fracmap;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "fracmap_cli" / name;
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

json read_report(const fs::path& dir) {
  std::ifstream in(dir / "report.json");
  REQUIRE(in.good());
  json j;
  in >> j;
  return j;
}

std::string file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

TEST_CASE("constants command emits the closed forms") {
  const auto dir = fresh_dir("constants");
  RunConfig cfg;
  cfg.n = 2;
  cfg.s = 0.5;
  cfg.out_dir = dir.string();
  CHECK(run("constants", cfg) == 0);
  const json rep = read_report(dir);
  CHECK(rep["command"] == "constants");
  CHECK(rep["results"]["gamma"].get<double>() ==
        Catch::Approx(0.15915494309189535).epsilon(1e-12));
  CHECK(rep["results"]["delta"].get<double>() == Catch::Approx(1.0).epsilon(1e-12));
  CHECK(rep["results"]["alpha_quadrature"].get<double>() == Catch::Approx(2.0).epsilon(1e-7));
  CHECK(rep["config"]["n"] == 2);  // resolved config is embedded
  CHECK(rep.contains("timing"));
}

TEST_CASE("check command passes on the default configuration") {
  const auto dir = fresh_dir("check");
  RunConfig cfg;
  cfg.n = 1;
  cfg.s = 0.5;
  cfg.h = 1.0 / 16.0;
  cfg.out_dir = dir.string();
  CHECK(run("check", cfg) == 0);
  const json rep = read_report(dir);
  CHECK(rep["results"]["pass"] == true);
  CHECK(rep["results"]["worst"].get<double>() <= 1e-11);
}

TEST_CASE("unknown commands are config errors") {
  RunConfig cfg;
  CHECK_THROWS_AS(run("frobnicate", cfg), config_error);
}

TEST_CASE("minimize writes a dump and a monotone energy history") {
  const auto dir = fresh_dir("minimize");
  RunConfig cfg;
  cfg.n = 1;
  cfg.s = 0.4;
  cfg.d = 2;
  cfg.h = 1.0 / 8.0;
  cfg.preset = "winding";
  cfg.solver.tol_tangential = 1e-5;
  cfg.out_dir = dir.string();
  CHECK(run("minimize", cfg) == 0);
  CHECK(fs::exists(dir / "field.bin"));
  CHECK(fs::exists(dir / "field.csv"));
  const json rep = read_report(dir);
  CHECK(rep["results"]["status"] == "converged");
  const auto hist = rep["results"]["energy_history"].get<std::vector<double>>();
  for (std::size_t t = 1; t < hist.size(); ++t) CHECK(hist[t] <= hist[t - 1] + 1e-15);
}

TEST_CASE("minimize is byte-identical across runs at four threads") {
  RunConfig cfg;
  cfg.n = 1;
  cfg.s = 0.5;
  cfg.d = 2;
  cfg.h = 1.0 / 16.0;
  cfg.preset = "random-perturbation";
  cfg.seed = 0x5EED;
  cfg.solver.tol_tangential = 1e-6;
  cfg.threads = 4;

  const auto dir_a = fresh_dir("det_a");
  cfg.out_dir = dir_a.string();
  CHECK(run("minimize", cfg) == 0);
  const auto dir_b = fresh_dir("det_b");
  cfg.out_dir = dir_b.string();
  CHECK(run("minimize", cfg) == 0);

  CHECK(file_bytes(dir_a / "field.bin") == file_bytes(dir_b / "field.bin"));
  // reports coincide except for the isolated timing section
  json ra = read_report(dir_a), rb = read_report(dir_b);
  ra.erase("timing");
  rb.erase("timing");
  ra["config"].erase("out_dir");
  rb["config"].erase("out_dir");
  CHECK(ra.dump() == rb.dump());
  set_thread_count(1);
}

TEST_CASE("perimeter command reports the energy identity") {
  const auto dir = fresh_dir("perimeter");
  RunConfig cfg;
  cfg.n = 1;
  cfg.s = 0.25;
  cfg.h = 1.0 / 8.0;
  cfg.preset_radius = 0.5;
  cfg.out_dir = dir.string();
  CHECK(run("perimeter", cfg) == 0);
  const json rep = read_report(dir);
  CHECK(rep["results"]["identity_residual"].get<double>() <= 1e-12);
}

TEST_CASE("extend, density, and replace chain through dumps") {
  const auto dir = fresh_dir("chain");
  RunConfig cfg;
  cfg.n = 1;
  cfg.s = 0.5;
  cfg.d = 1;
  cfg.h = 1.0 / 8.0;
  cfg.preset = "gaussian";
  cfg.levels = 12;
  cfg.out_dir = dir.string();
  CHECK(run("extend", cfg) == 0);
  CHECK(fs::exists(dir / "extension.bin"));

  CHECK(run("density", cfg) == 0);
  CHECK(fs::exists(dir / "profile.csv"));
  {
    std::ifstream csv(dir / "profile.csv");
    std::string header;
    std::getline(csv, header);
    CHECK(header == "r,Theta,theta_small,remainder_gap");
  }

  RunConfig rc = cfg;
  rc.field_path = (dir / "extension.bin").string();
  rc.out_dir = fresh_dir("replace").string();
  CHECK(run("replace", rc) == 0);
  const json rep = read_report(rc.out_dir);
  CHECK(rep["results"]["weighted_energy_after"].get<double>() <=
        rep["results"]["weighted_energy_before"].get<double>() + 1e-12);
  for (const auto& c : rep["results"]["components"])
    CHECK(c["max_principle_pass"] == true);
}

TEST_CASE("blowup and singular commands run end to end") {
  RunConfig cfg;
  cfg.n = 2;
  cfg.s = 0.5;
  cfg.d = 2;
  cfg.h = 1.0 / 8.0;
  cfg.preset = "hedgehog";
  cfg.levels = 10;
  cfg.rho = 1.0;
  cfg.solver.tol_tangential = 1e-4;
  cfg.solver.max_iters = 800;

  const auto bdir = fresh_dir("blowup");
  cfg.out_dir = bdir.string();
  CHECK(run("blowup", cfg) == 0);
  CHECK(fs::exists(bdir / "blowup.bin"));
  const json brep = read_report(bdir);
  CHECK(brep["results"]["symmetry_dimension"].get<int>() == 0);

  const auto sdir = fresh_dir("singular");
  cfg.out_dir = sdir.string();
  CHECK(run("singular", cfg) == 0);
  const json srep = read_report(sdir);
  CHECK(srep["results"].contains("calibrated_epsilon"));
  CHECK(fs::exists(sdir / "flagged.csv"));
  CHECK(srep["results"]["flagged_count"].get<int>() >= 1);
}

TEST_CASE("config round trip") {
  RunConfig cfg;
  cfg.n = 2;
  cfg.s = 0.35;
  cfg.h = 0.25;
  cfg.preset = "char-ball";
  cfg.resolve();
  const RunConfig back = RunConfig::from_json(cfg.to_json());
  CHECK(back.n == cfg.n);
  CHECK(back.s == cfg.s);
  CHECK(back.preset == cfg.preset);
  CHECK(back.L_ext == cfg.L_ext);
}
