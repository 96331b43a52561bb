#include "edsolve/cli_io.hpp"

#include <CLI11.hpp>

#include <iostream>

namespace {

const char* kExitCodes =
    "Exit codes:\n"
    "  0  success\n"
    "  2  convergence failure (partial outputs, status in certificates.json)\n"
    "  3  configuration error (nothing is solved)\n";

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Einstein-Dirac branch solver", "edsolve"};
  app.require_subcommand(1);
  app.footer(std::string(kExitCodes));

  auto* solve = app.add_subcommand("solve", "Ground state, continuation in eps, verification and outputs");
  std::string config_path, emit, out;
  bool selftest = false;
  auto* config_opt = solve->add_option("--config", config_path, "Run configuration (TOML subset)");
  solve->add_flag("--selftest", selftest, "Run the built-in example suite and exit");
  solve->add_option("--emit", emit, "Comma-separated subset of profiles,branch,certificates,matrices");
  solve->add_option("--out", out, "Output directory (overrides 'outputs')");
  solve->footer(edsolve::config_reference() + "\n" + kExitCodes);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : edsolve::exit_config;
  }

  if (selftest) return edsolve::run_selftest(std::cout) == 0 ? edsolve::exit_ok : 1;

  if (!*config_opt) {
    std::cerr << "error: --config is required unless --selftest is given\n";
    return edsolve::exit_config;
  }
  edsolve::RunConfig cfg;
  try {
    cfg = edsolve::parse_config(config_path);
    if (!emit.empty()) cfg.emit = edsolve::parse_emit_list(emit);
    if (!out.empty()) cfg.outputs = out;
  } catch (const edsolve::ParameterError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return edsolve::exit_config;
  }
  return edsolve::run(cfg, std::cout);
}
