#pragma once

// The rescaled Einstein-Dirac system in the unknowns (phi, chi, tau) at
// eps = m - omega, its Jacobian, Newton correction, natural-parameter
// continuation in eps and the map back to the physical fields.
//
// Physical fields relate to the rescaled ones by
//   Phi1(r) = sqrt(eps) phi(sqrt(eps) r),  Phi2(r) = eps chi(sqrt(eps) r),
//   T(r) - 1 = eps tau(sqrt(eps) r).

#include "edsolve/choquard.hpp"
#include "edsolve/linearized.hpp"
#include "edsolve/radial_core.hpp"

#include <array>
#include <string>
#include <vector>

namespace edsolve {

/// A fell to or below the positivity floor.
class PositivityError : public std::runtime_error {
 public:
  PositivityError(const std::string& what, int node, double radius, double value)
      : std::runtime_error(what), node(node), radius(radius), value(value) {}
  int node;
  double radius;
  double value;
};

struct RescalingMap {
  double alpha = 0.0;
  double beta = 0.0;
  double gamma = 0.0;
  double lambda = 0.0;

  static RescalingMap for_eps(double eps);
};

struct PerturbedState {
  double m = 0.0;
  double eps = 0.0;
  RadialField phi;
  RadialField chi;
  RadialField tau;

  const RadialGrid& grid() const { return phi.grid(); }
  const GridPtr& grid_ptr() const { return phi.grid_ptr(); }
  /// (phi, chi, tau) stacked in that order.
  Vector stacked() const;
  PerturbedState with_stacked(const Vector& v) const;
  PerturbedState with_eps(double e) const;
  /// Throws ParameterError unless 0 <= eps < m and the fields share one grid.
  void validate() const;
};

/// eps = 0 state at the Choquard triple.
PerturbedState base_state(const ChoquardSolution& sol);

struct SolverConfig {
  double delta_A = 0.05;
  double newton_tol = 1e-10;
  int max_newton = 12;
  /// Newton iterates stay within ball_radius * ||base field|| of the base
  /// point, field by field, in the X norms.
  double ball_radius = 2.0;
  /// Continuation steps as fractions of eps_max.
  double initial_step = 1e-3;
  double max_step = 0.05;
  double min_step = 1e-6;  // fraction of m
  double growth = 1.5;
  double shrink = 0.5;
  int fast_iterations = 4;

  void validate() const;
};

/// A = 1 - (16 pi (m - eps) eps / r) int_0^r (1 + eps tau)^2 (phi^2 + eps chi^2).
/// Throws PositivityError at the first node with A <= delta_A.
RadialField metric_A(const PerturbedState& s, double delta_A = 0.05);

struct KTerms {
  RadialField K1;
  RadialField K2;
  RadialField K3;
  /// The separately evaluated summands of K3; K3 is their sum.
  std::array<Vector, 10> k3_terms;
};
KTerms k_terms(const PerturbedState& s);

struct ResidualD {
  Vector stacked;  // L1, L2, L3 nodal values; block ends hold the boundary rows
  /// Y norms: L^2(R^3), L^2(R^3), L^1(0, inf).
  std::array<double, 3> norms{};

  double total() const { return norms[0] + norms[1] + norms[2]; }
  RadialField res_phi(const GridPtr& g) const;
  RadialField res_chi(const GridPtr& g) const;
  RadialField res_tau(const GridPtr& g) const;
};
ResidualD residual_D(const PerturbedState& s, double delta_A = 0.05);
std::array<double, 3> residual_norms(const RadialGrid& g, const Vector& stacked);

/// Exterior value of tau at r_max given Q = int_0^{r_max} (1 + eps tau)^2 rho;
/// beyond the support the metric is the exterior solution with T = A^{-1/2}.
double tau_tail_value(double m, double eps, double q, double r_max);

/// Analytic Jacobian of the nodal residual of residual_D.
LinearOperator jacobian(const PerturbedState& s, double delta_A = 0.05);

enum class NewtonFailure { none, max_iterations, ball_exit, positivity, singular };
std::string to_string(NewtonFailure f);

class NewtonError : public ConvergenceError {
 public:
  NewtonError(const std::string& what, NewtonFailure reason, PerturbedState last, double residual)
      : ConvergenceError(what, last.stacked(), residual), reason(reason), last(std::move(last)) {}
  NewtonFailure reason;
  PerturbedState last;
};

struct NewtonResult {
  PerturbedState state;
  int iterations = 0;
  std::array<double, 3> norms{};
  std::vector<double> history;  // summed Y norms, starting with the guess
};

/// Damped Newton at fixed eps with the ball centre `base`.
NewtonResult newton_correct(double eps, const PerturbedState& guess, const PerturbedState& base,
                            const SolverConfig& cfg);

struct PhysicalSolution {
  double m = 0.0;
  double eps = 0.0;
  double omega = 0.0;
  GridPtr grid;
  Vector Phi1;
  Vector Phi2;
  Vector t_field;
  Vector A_field;
  Vector Q_field;
  double adm_mass = 0.0;
  double norm_integral = 0.0;
  double condQ_margin = 0.0;
};

/// eps = 0 yields the Minkowski vacuum on the rescaled grid.
PhysicalSolution unrescale(const PerturbedState& s);

struct PhysicalResidual {
  std::array<Vector, 4> fields;
  std::array<double, 4> norms{};  // (int e^2 dr)^{1/2}
};
PhysicalResidual physical_residual(const PhysicalSolution& ps, double m);

struct Diagnostics {
  double condQ_margin = 0.0;
  double norm_integral = 0.0;
  double norm_target_gap = 0.0;  // norm_integral - 1/(4 pi)
  double adm_from_metric = 0.0;  // r (1 - A) / 2 at r_max
  double adm_from_charge = 0.0;  // 8 pi omega int_0^inf T^2 |Phi|^2
  double adm_relative_gap = 0.0;
  double plateau_variation = 0.0;  // over the outer tenth of the nodes
  bool plateau_ok = false;
  double t_tail = 0.0;           // T(r_max) - 1
  double t_tail_exterior = 0.0;  // A(r_max)^{-1/2} - 1
  double min_A = 0.0;
};
Diagnostics diagnostics(const PhysicalSolution& ps);

struct BranchPoint {
  double eps = 0.0;
  PerturbedState state;
  PhysicalSolution physical;
  PhysicalResidual physical_res;
  Diagnostics diag;
  int newton_iters = 0;
  std::array<double, 3> residual_norms{};
};

struct StepLogEntry {
  double eps_trial = 0.0;
  double step = 0.0;
  bool accepted = false;
  int iterations = 0;
  std::string note;
};

struct Branch {
  std::vector<BranchPoint> points;
  std::vector<StepLogEntry> log;
  std::string stop_reason;  // "eps_max", "step underflow" or "positivity wall"
  /// X-norm distance of the polished eps = 0 point from the Choquard triple.
  double base_polish_shift = 0.0;
};

BranchPoint make_branch_point(const PerturbedState& s, int iterations, const std::array<double, 3>& norms);

/// Throws ConvergenceError("no branch") if the first step already fails.
Branch continue_branch(double eps_max, const SolverConfig& cfg, const ChoquardSolution& sol);

/// (||phi - phi0||_X, ||chi - chi0||_X, ||tau - tau0||_X).
std::array<double, 3> distance_x(const PerturbedState& a, const PerturbedState& b);

struct DepartureFit {
  double slope = 0.0;
  int points = 0;
  double eps_first = 0.0;
  double eps_last = 0.0;
};
/// Least-squares slope of log ||eta(eps) - eta(0)||_X against log eps over
/// eps in [eps_1, 10 eps_1], eps_1 the first positive point. Needs two points.
DepartureFit departure_slope(const Branch& br);

struct NormalizedSolution {
  double m = 0.0;
  PhysicalSolution solution;
  std::vector<std::pair<double, double>> table;  // sampled (m, norm_integral)
};

/// Secant in log m for norm_integral = target at eps = eps_over_m * m.
NormalizedSolution normalized_solution(double eps_over_m, double target, const SolverConfig& cfg,
                                       int n_nodes = 1000, double grading = 2.0, double tol = 1e-9);

}  // namespace edsolve
