#pragma once

// Ground state of the radial Choquard (Schroedinger-Newton) problem
//
//   -phi'' + 2 m phi - 16 pi m^3 K[phi^2] phi = 0,   phi = r u,
//
// together with the derived profiles chi0 and tau0 of the unperturbed system.

#include "edsolve/radial_core.hpp"
#include "edsolve/structured_operator.hpp"

namespace edsolve {

/// First-derivative matrices of the first-order system at mass m. The phi-
/// and chi-type stencils are shifted in opposite directions (a collocated
/// stand-in for a staggered grid) and continue the fields beyond r_max with
/// the free decay rate sqrt(2m); the tau-type stencil is one-sided toward
/// r_max with the 1/r tail.
struct SystemDerivatives {
  SparseMatrix phi;
  SparseMatrix phi_second;  // centered second derivative, same tail
  SparseMatrix chi;
  SparseMatrix tau;
};
SystemDerivatives system_derivatives(const RadialGrid& grid, double m);

struct ChoquardConfig {
  double scf_mixing = 0.5;
  double scf_tol = 1e-8;
  double newton_tol = 1e-10;
  int max_scf = 2000;
  int max_newton = 40;

  void validate() const;
};

struct ChoquardSolution {
  double m = 0.0;
  RadialField phi0;
  RadialField chi0;
  RadialField tau0;
  double lambda_scf = 0.0;
  double residual_norm = 0.0;
  double mass_integral = 0.0;
  int scf_iterations = 0;
  int newton_iterations = 0;
  int positivity_projections = 0;

  const RadialGrid& grid() const { return phi0.grid(); }
  const GridPtr& grid_ptr() const { return phi0.grid_ptr(); }
  /// u0 = phi0 / r.
  RadialField u0() const;
};

/// Truncation radius with an e^{-30} tail for the ground state of mass m.
double default_r_max(double m);

ChoquardSolution solve_ground_state(double m, GridPtr grid, const ChoquardConfig& cfg = {});

/// chi = (phi / r - phi') / 2m.
RadialField derive_chi(const RadialField& phi0, double m);
/// chi = -(r / 2m) d/dr (phi / r); same quantity by a different route.
RadialField derive_chi_from_quotient(const RadialField& phi0, double m);
/// tau = 8 pi m K[phi^2].
RadialField derive_tau(const RadialField& phi0, double m);

/// Nodal residual; the last entry enforces phi(r_max) = 0.
Vector choquard_residual_vector(const RadialField& phi, double m);
/// Discrete L^2(R^3) norm of the u-form residual.
double choquard_residual(const RadialField& phi, double m);
double choquard_residual_norm(const RadialGrid& grid, const Vector& residual);

/// Jacobian of choquard_residual_vector at phi (profile form of the
/// linearized Choquard operator plus the boundary row).
StructuredOperator choquard_jacobian(const RadialField& phi, double m);

}  // namespace edsolve
