#include "edsolve/cli_io.hpp"

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <unistd.h>

using namespace edsolve;
namespace fs = std::filesystem;

namespace {

fs::path fresh_dir(const std::string& tag) {
  const fs::path p = fs::temp_directory_path() / ("edsolve_test_" + tag + "_" + std::to_string(::getpid()));
  fs::remove_all(p);
  return p;
}

std::vector<std::vector<std::string>> read_csv(const fs::path& p) {
  std::ifstream in(p);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(in, line)) {
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(row);
  }
  return rows;
}

ConfigError config_error(const std::string& text) {
  try {
    parse_config_text(text);
  } catch (const ConfigError& e) {
    return e;
  }
  FAIL("expected a ConfigError");
  return ConfigError("");
}

}  // namespace

TEST_SUITE("cli_io") {

TEST_CASE("minimal config takes the defaults") {
  const RunConfig c = parse_config_text("m = 0.5\n");
  CHECK(c.m == 0.5);
  CHECK(c.r_max() == doctest::Approx(30.0).epsilon(1e-15));
  CHECK(c.grid.n_nodes == 2000);
  CHECK(c.eps_max == doctest::Approx(0.05));
  CHECK(c.emit == std::set<std::string>{"profiles", "branch", "certificates"});
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("eps_max as a fraction of m") {
  CHECK(parse_config_text("m = 0.5\neps_max = \"0.1m\"\n").eps_max == doctest::Approx(0.05).epsilon(1e-15));
  CHECK(parse_config_text("eps_max = \"0.1m\"\nm = 2\n").eps_max == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(parse_config_text("eps_max = 0.01\n").eps_max == 0.01);
  CHECK_THROWS_AS(parse_config_text("eps_max = \"1.5m\"\n"), ConfigError);
}

TEST_CASE("errors carry line and column") {
  const ConfigError small = config_error("m = 0.5\n[grid]\nn_nodes = 4\n");
  CHECK(small.line == 3);
  CHECK(std::string(small.what()).find("n_nodes") != std::string::npos);

  const ConfigError unknown = config_error("m = 0.5\nbogus = 1\n");
  CHECK(unknown.line == 2);
  CHECK(unknown.column >= 1);

  const ConfigError dup = config_error("m = 0.5\nm = 0.6\n");
  CHECK(dup.line == 2);

  const ConfigError syntax = config_error("m = \n");
  CHECK(syntax.line == 1);
  CHECK(syntax.column > 1);

  CHECK_THROWS_AS(parse_config_text("m = -1\n"), ConfigError);
  CHECK_THROWS_AS(parse_config_text("emit = [\"pictures\"]\n"), ConfigError);
  CHECK_THROWS_AS(parse_config("/nonexistent/edsolve.toml"), ConfigError);
}

TEST_CASE("tables, dotted keys and comments") {
  const RunConfig a = parse_config_text("# run\nm = 1 # trailing\n[grid]\nn_nodes = 400\nr_max = 20.5\n"
                                        "[solver]\ndelta_A = 0.1\n");
  const RunConfig b = parse_config_text("m = 1\ngrid.n_nodes = 400\ngrid.r_max = 20.5\nsolver.delta_A = 0.1\n");
  for (const RunConfig* c : {&a, &b}) {
    CHECK(c->grid.n_nodes == 400);
    CHECK(c->r_max() == 20.5);
    CHECK(c->solver.delta_A == 0.1);
  }
  CHECK(parse_config_text("m = 2\n[grid]\nr_max = \"auto\"\n").r_max() == doctest::Approx(15.0));
  CHECK(config_reference().find("grid.n_nodes") != std::string::npos);
}

TEST_CASE("emit list") {
  CHECK(parse_emit_list("profiles,branch") == std::set<std::string>{"profiles", "branch"});
  CHECK(parse_emit_list(" matrices , certificates ") == std::set<std::string>{"matrices", "certificates"});
  CHECK_THROWS_AS(parse_emit_list("profiles,pictures"), ConfigError);
}

TEST_CASE("format_double round trips") {
  for (double v : {0.0, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.1}) CHECK(std::strtod(format_double(v).c_str(), nullptr) == v);
  CHECK(format_double(0.5) == "0.5");
}

TEST_CASE("unwritable output is a configuration error") {
  const fs::path dir = fresh_dir("blocked");
  fs::create_directories(dir);
  const fs::path file = dir / "file";
  std::ofstream(file) << "x";
  CHECK_THROWS_AS(ensure_writable_directory((file / "sub").string()), ConfigError);

  RunConfig c;
  c.outputs = (file / "sub").string();
  std::ostringstream log;
  CHECK(run(c, log) == exit_config);
  fs::remove_all(dir);
}

TEST_CASE("small run writes consistent tables") {
  const fs::path dir = fresh_dir("run");
  RunConfig c = parse_config_text("m = 0.5\neps_max = \"0.02m\"\n[grid]\nn_nodes = 400\n");
  c.outputs = dir.string();
  std::ostringstream log;
  REQUIRE(run(c, log) == exit_ok);

  const auto branch = read_csv(dir / "branch.csv");
  REQUIRE(branch.size() >= 3);
  CHECK(branch[0].size() == 14);
  CHECK(branch[0][0] == "eps");
  CHECK(std::stod(branch[1][0]) == 0.0);
  for (int k = 10; k < 14; ++k) CHECK(std::stod(branch[1][k]) == 0.0);

  // plot_branch.csv repeats branch.csv columns at full precision.
  const auto plot = read_csv(dir / "plot_branch.csv");
  REQUIRE(plot.size() == branch.size());
  for (size_t i = 1; i < plot.size(); ++i)
    for (int k = 0; k < 4; ++k) CHECK(std::stod(plot[i][k]) == std::stod(branch[i][k]));

  CHECK(fs::exists(dir / "choquard_profile.csv"));
  CHECK(fs::exists(dir / "certificates.json"));
  CHECK(fs::exists(dir / "profile_eps_0.csv"));
  CHECK_FALSE(fs::exists(dir / "matrices"));
  fs::remove_all(dir);
}

TEST_CASE("single point branch gives single row plot files") {
  const fs::path dir = fresh_dir("single");
  fs::create_directories(dir);
  Branch br = continue_branch(0.01, SolverConfig{}, solve_ground_state(0.5, RadialGrid::build(200, default_r_max(0.5))));
  br.points.erase(br.points.begin() + 1, br.points.end());
  emit_plotdata(br, dir.string());
  CHECK(read_csv(dir / "plot_branch.csv").size() == 2);
  CHECK(read_csv(dir / "plot_profiles.csv").size() >= 1);
  fs::remove_all(dir);
}

}
