#pragma once

// Batch front end: run configuration, the solve -> continue -> verify pipeline
// and the plain-text outputs (CSV profiles and branch tables, JSON
// certificates).

#include "edsolve/choquard.hpp"
#include "edsolve/einstein_dirac.hpp"

#include <iosfwd>
#include <optional>
#include <set>
#include <string>

namespace edsolve {

/// Invalid configuration. line/column are 1-based, 0 when not tied to a
/// position in the file.
class ConfigError : public ParameterError {
 public:
  ConfigError(const std::string& what, int line = 0, int column = 0);
  int line;
  int column;
};

struct GridConfig {
  int n_nodes = 2000;
  std::optional<double> r_max;  // empty: default_r_max(m)
  double grading_exponent = 2.0;
};

struct RunConfig {
  double m = 0.5;
  GridConfig grid;
  ChoquardConfig choquard;
  SolverConfig solver;
  /// Absolute eps_max; parse_config resolves "<f>m" against m.
  double eps_max = 0.05;
  std::string outputs = "edsolve_out";
  std::set<std::string> emit{"profiles", "branch", "certificates"};

  double r_max() const;
  /// Throws ConfigError on any invalid field.
  void validate() const;
};

/// Exit codes of the command line tool.
enum ExitCode { exit_ok = 0, exit_convergence = 2, exit_config = 3 };

/// Strict parser for a TOML subset: comments, [tables], dotted keys, numbers,
/// quoted strings, booleans and flat arrays. Unknown keys are errors.
RunConfig parse_config(const std::string& path);
RunConfig parse_config_text(const std::string& text, const std::string& source = "<config>");

/// Text for --help describing every key and its default.
std::string config_reference();

/// Splits "profiles,branch" into a validated emit set.
std::set<std::string> parse_emit_list(const std::string& list);

/// Throws ConfigError unless dir exists (or can be created) and is writable.
void ensure_writable_directory(const std::string& dir);

/// %.17g formatting used by every writer.
std::string format_double(double v);

/// Full pipeline; returns the exit code. Progress goes to log.
int run(const RunConfig& cfg, std::ostream& log);

/// plot_branch.csv and plot_profiles.csv in dir.
void emit_plotdata(const Branch& branch, const std::string& dir);

/// Runs the quick built-in examples; returns the number of failures.
int run_selftest(std::ostream& log);

}  // namespace edsolve
