#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <sstream>
#include <string>
#include <sys/wait.h>

#include "cflow/cli.hpp"
#include "cflow/report.hpp"
#include "cflow/run_io.hpp"
#include "cflow/snapshot.hpp"

using namespace cflow;
namespace fs = std::filesystem;

namespace {

const char* flat_config = R"({
  "family": "flat_torus",
  "nodes": 64,
  "length": 6.283185307179586,
  "fiber_radius": 1.0,
  "phi_amplitude": 0.0,
  "phi_mode": 1,
  "t_max": 0.2,
  "cfl_factor": 0.5,
  "rm_ratio": 1000000.0,
  "save_dt": 0.05,
  "save_rm_factor": 0,
  "regrid_threshold": 0
}
)";

const char* sphere_config = R"({
  "family": "round_sphere",
  "nodes": 64,
  "dim": 2,
  "curvature_k0": 1.0,
  "phi_amplitude": 0.0,
  "phi_mode": 1,
  "t_max": 1.0,
  "cfl_factor": 0.5,
  "rm_ratio": 10000.0,
  "save_dt": 0.005,
  "save_rm_factor": 1.05,
  "regrid_threshold": 0
}
)";

// Scratch directory removed at scope exit.
struct Scratch {
  fs::path dir;
  explicit Scratch(const std::string& name) : dir(fs::temp_directory_path() / ("cflow_cli_" + name)) {
    fs::remove_all(dir);
    fs::create_directories(dir);
  }
  ~Scratch() { fs::remove_all(dir); }
  fs::path operator/(const std::string& s) const { return dir / s; }
};

struct Result {
  int code = -1;
  std::string out, err;
};

// Runs the installed binary when COUPLED_FLOW_BIN is set, otherwise the entry point in-process.
Result invoke(const std::vector<std::string>& args, const Scratch& s) {
  Result r;
  if (const char* bin = std::getenv("COUPLED_FLOW_BIN")) {
    std::string cmd = bin;
    for (const auto& a : args) cmd += " '" + a + "'";
    const auto out = s / "stdout.txt", err = s / "stderr.txt";
    cmd += " > '" + out.string() + "' 2> '" + err.string() + "'";
    const int status = std::system(cmd.c_str());
    r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    r.out = read_text(out);
    r.err = read_text(err);
    fs::remove(out);
    fs::remove(err);
    return r;
  }
  std::vector<std::string> argv_s{"coupled-flow"};
  argv_s.insert(argv_s.end(), args.begin(), args.end());
  std::vector<char*> argv;
  for (auto& a : argv_s) argv.push_back(a.data());
  std::ostringstream out, err;
  r.code = cli_main(static_cast<int>(argv.size()), argv.data(), out, err);
  r.out = out.str();
  r.err = err.str();
  return r;
}

std::vector<std::vector<std::string>> csv_rows(const fs::path& p) {
  std::istringstream in(read_text(p));
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string c;
    while (std::getline(ss, c, ',')) cells.push_back(c);
    rows.push_back(cells);
  }
  return rows;
}

}  // namespace

TEST_CASE("flat torus run: constant diagnostics and a valid manifest") {
  Scratch s("flat");
  write_text(s / "flat.json", flat_config);
  const auto r = invoke({"run", "--config", (s / "flat.json").string(), "--out", (s / "r1").string()}, s);
  REQUIRE(r.code == 0);
  const auto rows = csv_rows(s / "r1/diagnostics.csv");
  REQUIRE(rows.size() > 3);
  CHECK(rows[0] == std::vector<std::string>{"t", "sup_rm", "sup_gradphi2", "min_phi", "max_phi", "min_S", "max_S",
                                            "grid_quality"});
  for (std::size_t k = 2; k < rows.size(); ++k)
    for (std::size_t c = 1; c < rows[k].size(); ++c) CHECK(rows[k][c] == rows[1][c]);

  const auto m = read_manifest(s / "r1");
  CHECK(m.at("config").at("nodes") == 64);
  CHECK(m.at("config").at("dt_min") == 1e-14);  // defaults are echoed
  CHECK(m.at("T_est").is_null());
  CHECK(m.at("checks").at("fail") == 0);
  CHECK(m.at("files").size() == 4 + 5);  // config, history, diagnostics, index, five states
  CHECK(manifest_mismatches(s / "r1").empty());
  for (const auto& [rel, hash] : m.at("files").items()) CHECK(sha256_file(s / "r1" / rel) == hash.get<std::string>());

  // the saved history reloads bit for bit
  const auto cfg = RunConfig::parse(flat_config);
  const auto direct = simulate(cfg);
  const auto loaded = read_run(s / "r1");
  REQUIRE(loaded.states.size() == direct.states.size());
  for (std::size_t k = 0; k < loaded.states.size(); ++k) {
    CHECK(loaded.states[k].t == direct.states[k].t);
    CHECK(loaded.states[k].metric.a == direct.states[k].metric.a);
    CHECK(loaded.states[k].metric.grid.spacing == direct.states[k].metric.grid.spacing);
  }
  CHECK(loaded.steps.size() == direct.steps.size());
  CHECK(loaded.step_count == direct.step_count);

  // a changed file is detected and refused
  write_text(s / "r1/history.json", read_text(s / "r1/history.json") + " ");
  CHECK(manifest_mismatches(s / "r1") == std::vector<std::string>{"history.json"});
  CHECK(invoke({"verify", "--run", (s / "r1").string()}, s).code == 2);
}

TEST_CASE("reruns are byte-identical") {
  Scratch s("det");
  write_text(s / "flat.json", flat_config);
  REQUIRE(invoke({"run", "--config", (s / "flat.json").string(), "--out", (s / "a").string()}, s).code == 0);
  REQUIRE(invoke({"run", "--config", (s / "flat.json").string(), "--out", (s / "b").string()}, s).code == 0);
  CHECK(read_text(s / "a/manifest.json") == read_text(s / "b/manifest.json"));
  REQUIRE(invoke({"run", "--config", (s / "flat.json").string(), "--out", (s / "a").string()}, s).code == 0);
  CHECK(read_text(s / "a/manifest.json") == read_text(s / "b/manifest.json"));
}

TEST_CASE("config errors exit with code 2 and name the field") {
  Scratch s("cfg");
  std::string missing = flat_config;
  missing.erase(missing.find("  \"nodes\": 64,\n"), std::string("  \"nodes\": 64,\n").size());
  write_text(s / "missing.json", missing);
  auto r = invoke({"run", "--config", (s / "missing.json").string()}, s);
  CHECK(r.code == 2);
  CHECK(r.err.find("'nodes'") != std::string::npos);

  std::string typed = flat_config;
  typed.replace(typed.find("64"), 2, "\"64\"");
  write_text(s / "typed.json", typed);
  r = invoke({"run", "--config", (s / "typed.json").string(), "--out", (s / "x").string()}, s);
  CHECK(r.code == 2);
  CHECK(r.err.find("line 3") != std::string::npos);

  std::string broken = flat_config;
  broken.erase(broken.find("1.0,\n  \"phi_amplitude\"") + 3, 1);  // drop a comma
  write_text(s / "broken.json", broken);
  r = invoke({"run", "--config", (s / "broken.json").string(), "--out", (s / "x").string()}, s);
  CHECK(r.code == 2);
  CHECK(r.err.find("line 6") != std::string::npos);

  CHECK(invoke({"run", "--config", (s / "nope.json").string(), "--out", (s / "x").string()}, s).code == 2);
  CHECK(invoke({"frobnicate"}, s).code == 2);
  CHECK(invoke({"verify", "--run", (s / "absent").string()}, s).code == 2);
  CHECK(invoke({"logsob", "--profile", "cauchy", "--out", s.dir.string()}, s).code == 2);

  CHECK_THROWS_AS(RunConfig::parse(R"({"family": "klein_bottle", "nodes": 64})"), ConfigError);
  try {
    RunConfig::parse(std::string(flat_config).replace(std::string(flat_config).find("0.5"), 3, "-0.5"));
    FAIL("negative cfl accepted");
  } catch (const ConfigError& e) {
    CHECK(e.field == "cfl_factor");
    CHECK(e.line == 9);
  }
}

TEST_CASE("sphere run: core suite passes and the report lists S evolution") {
  Scratch s("sphere");
  write_text(s / "sphere.json", sphere_config);
  REQUIRE(invoke({"run", "--config", (s / "sphere.json").string(), "--out", (s / "rs").string()}, s).code == 0);
  const auto m = read_manifest(s / "rs");
  REQUIRE(m.at("T_est").is_number());
  CHECK(std::abs(m.at("T_est").get<double>() - 0.5) < 1e-2);
  CHECK(std::abs(m.at("C0_measured").get<double>() - 0.5) < 1e-2);

  const std::string manifest_hash = sha256_file(s / "rs/manifest.json");
  const auto r = invoke({"verify", "--run", (s / "rs").string(), "--suite", "core"}, s);
  CHECK(r.code == 0);
  const auto reports = parse_reports(read_text(s / "rs/report.json"));
  bool found = false;
  for (const auto& rep : reports) {
    CHECK(rep.status != CheckStatus::fail);
    CHECK(rep.manifest_hash == manifest_hash);
    if (rep.id == "s_evolution") {
      found = true;
      CHECK(rep.status == CheckStatus::pass);
      CHECK(rep.resolutions.size() == 2);
    }
  }
  CHECK(found);
  CHECK(std::is_sorted(reports.begin(), reports.end(), [](auto& a, auto& b) { return a.id < b.id; }));
  CHECK(manifest_mismatches(s / "rs").empty());
  CHECK(read_manifest(s / "rs").at("stages").contains("verify_core"));

  // stage outputs in a separate directory point back at the run
  const auto l = invoke({"lgeo", "--run", (s / "rs").string(), "--base-time", "0.4", "--taus", "0.1,0.2", "--out",
                         (s / "lg").string()},
                        s);
  CHECK(l.code == 0);
  CHECK(csv_rows(s / "lg/lgeo.csv")[0] ==
        std::vector<std::string>{"tau", "q_x", "L", "ell", "K", "v_min", "status"});
  CHECK(csv_rows(s / "lg/vtilde.csv").size() == 3);
  CHECK(read_manifest(s / "lg").at("stages").at("lgeo").contains("source_run"));

  const auto c = invoke({"conj", "--run", (s / "rs").string(), "--base", "0,0.4", "--sigma0", "0.2", "--tstop", "0.2",
                         "--out", (s / "cj").string()},
                        s);
  CHECK(c.code == 0);
  CHECK(csv_rows(s / "cj/conj.csv")[0] == std::vector<std::string>{"t", "mass", "max_v", "int_v", "W"});
  const auto u = read_snapshot(s / "cj/conj/u_0000.txt");
  CHECK(u.role == FieldRole::u);
  CHECK(read_snapshot(s / "cj/conj/v_0000.txt").role == FieldRole::v);

  const auto sy = invoke({"symm", "--run", (s / "rs").string(), "--state", "0.1", "--field", "rm", "--out",
                          (s / "sy").string()},
                         s);
  CHECK(sy.code == 0);
  CHECK(csv_rows(s / "sy/symm.csv")[0] == std::vector<std::string>{"s", "vol_M", "vol_Rn"});
}

TEST_CASE("log-Sobolev subcommand on named and tabulated profiles") {
  Scratch s("logsob");
  auto r = invoke({"logsob", "--profile", "gaussian:1", "--optimized", "--out", s.dir.string()}, s);
  CHECK(r.code == 0);
  auto rows = csv_rows(s / "logsob.csv");
  REQUIRE(rows.size() == 3);
  CHECK(rows[0] == std::vector<std::string>{"case", "lhs", "rhs", "margin"});
  CHECK(std::abs(std::stod(rows[1][1])) < 1e-6);

  std::string table = "r,F\n";
  for (int i = 0; i <= 800; ++i) {
    const double x = 12.0 * i / 800;
    table += fmt17(x) + "," + fmt17(0.5 * x * x + 0.1 * std::sin(x)) + "\n";
  }
  write_text(s / "profile.csv", table);
  r = invoke({"logsob", "--profile", (s / "profile.csv").string(), "--out", (s / "t").string()}, s);
  CHECK(r.code == 0);
  rows = csv_rows(s / "t/logsob.csv");
  CHECK(std::stod(rows[1][3]) > 1e-4);
}

TEST_CASE("report JSON round trip") {
  VerificationReport a;
  a.id = "b_check";
  a.anchor = "something holds";
  a.status = CheckStatus::fail;
  a.margin = -0.25;
  a.resolutions = {{32, 1.5}, {64, std::numeric_limits<double>::quiet_NaN()}};
  a.node = 7;
  a.t = 0.125;
  VerificationReport b;
  b.id = "a_check";
  b.status = CheckStatus::monitor;
  const auto back = parse_reports(format_reports({a, b}));
  REQUIRE(back.size() == 2);
  CHECK(back[0].id == "a_check");
  CHECK_FALSE(back[0].node.has_value());
  CHECK(back[1].status == CheckStatus::fail);
  CHECK(back[1].margin == -0.25);
  CHECK(*back[1].node == 7);
  CHECK(*back[1].t == 0.125);
  CHECK(back[1].resolutions[0].value == 1.5);
  CHECK(std::isnan(back[1].resolutions[1].value));
  const auto c = count_checks(back);
  CHECK(c.fail == 1);
  CHECK(c.monitor == 1);
}
