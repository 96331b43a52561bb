#include "edsolve/choquard.hpp"

#include <cmath>
#include <iostream>

namespace edsolve {

void ChoquardConfig::validate() const {
  if (!(scf_mixing > 0.0 && scf_mixing <= 1.0)) throw ParameterError("scf_mixing must lie in (0, 1]");
  if (!(scf_tol > 0.0) || !(newton_tol > 0.0)) throw ParameterError("choquard tolerances must be positive");
  if (max_scf < 1 || max_newton < 1) throw ParameterError("choquard iteration caps must be >= 1");
}

RadialField ChoquardSolution::u0() const {
  return RadialField(phi0.grid_ptr(), phi0.values().cwiseQuotient(phi0.grid().nodes()), OriginClass::finite_limit,
                     TailClass::exponential);
}

double default_r_max(double m) {
  if (!(m > 0.0)) throw ParameterError("mass must be positive");
  return 30.0 / std::sqrt(2.0 * m);
}

SystemDerivatives system_derivatives(const RadialGrid& grid, double m) {
  if (!(m > 0.0)) throw ParameterError("system_derivatives: mass must be positive");
  const double kappa = std::sqrt(2.0 * m);
  return {grid.decaying_derivative_matrix(OriginClass::vanishes_like_r, kappa, 1, Stencil::outward_biased),
          grid.decaying_derivative_matrix(OriginClass::vanishes_like_r, kappa, 2),
          grid.decaying_derivative_matrix(OriginClass::vanishes_like_r2, kappa, 1, Stencil::inward_biased),
          grid.derivative_matrix(OriginClass::finite_limit, TailClass::inverse_r, 1, Stencil::upwind)};
}

RadialField derive_chi(const RadialField& phi0, double m) {
  const RadialGrid& g = phi0.grid();
  const Vector dphi = system_derivatives(g, m).phi * phi0.values();
  Vector chi = (phi0.values().cwiseQuotient(g.nodes()) - dphi) / (2.0 * m);
  return RadialField(phi0.grid_ptr(), std::move(chi), OriginClass::vanishes_like_r2, TailClass::exponential);
}

RadialField derive_chi_from_quotient(const RadialField& phi0, double m) {
  const RadialGrid& g = phi0.grid();
  const Vector& r = g.nodes();
  const Vector u = phi0.values().cwiseQuotient(r);
  // d/dr(phi/r) = phi'/r - phi/r^2, so this equals derive_chi up to rounding.
  const Vector dphi = system_derivatives(g, m).phi * phi0.values();
  const Vector du = dphi.cwiseQuotient(r) - u.cwiseQuotient(r);
  Vector chi = -r.cwiseProduct(du) / (2.0 * m);
  return RadialField(phi0.grid_ptr(), std::move(chi), OriginClass::vanishes_like_r2, TailClass::exponential);
}

RadialField derive_tau(const RadialField& phi0, double m) {
  const RadialField rho(phi0.grid_ptr(), phi0.values().cwiseAbs2(), OriginClass::vanishes_like_r2,
                        TailClass::exponential);
  RadialField k = newtonian_kernel(rho);
  return k.with_values(8.0 * kPi * m * k.values());
}

namespace {

Vector potential(const RadialField& phi, double m) {
  const RadialField rho(phi.grid_ptr(), phi.values().cwiseAbs2(), OriginClass::vanishes_like_r2,
                        TailClass::exponential);
  return 16.0 * kPi * m * m * m * newtonian_kernel(rho).values();
}

SparseMatrix free_operator(const RadialGrid& g, double m) {
  const int n = g.size();
  SparseMatrix h = -system_derivatives(g, m).phi_second;
  SparseMatrix id(n, n);
  id.setIdentity();
  h += 2.0 * m * id;
  h.prune([n](int row, int, double) { return row != n - 1; });
  h.coeffRef(n - 1, n - 1) = 1.0;
  h.makeCompressed();
  return h;
}

// Replaces v by |v|. Returns true if some entry was negative beyond the
// rounding level of the exponentially small tail.
bool project_positive(Vector& v) {
  const double floor = -1e-10 * v.cwiseAbs().maxCoeff();
  const bool significant = (v.array() < floor).any();
  v = v.cwiseAbs();
  return significant;
}

double weighted_norm2(const RadialGrid& g, const Vector& v) {
  return g.weights(OriginClass::vanishes_like_r2).dot(v.cwiseAbs2());
}

}  // namespace

Vector choquard_residual_vector(const RadialField& phi, double m) {
  const RadialGrid& g = phi.grid();
  const int n = g.size();
  const Vector& p = phi.values();
  Vector f = -(system_derivatives(g, m).phi_second * p) + 2.0 * m * p -
             potential(phi, m).cwiseProduct(p);
  f[n - 1] = p[n - 1];
  return f;
}

double choquard_residual_norm(const RadialGrid& g, const Vector& f) {
  const int n = g.size();
  const Vector& w = g.weights(OriginClass::vanishes_like_r);
  double s = 0.0;
  for (int i = 0; i < n - 1; ++i) s += w[i] * f[i] * f[i];
  return std::sqrt(4.0 * kPi * s + f[n - 1] * f[n - 1]);
}

double choquard_residual(const RadialField& phi, double m) {
  return choquard_residual_norm(phi.grid(), choquard_residual_vector(phi, m));
}

StructuredOperator choquard_jacobian(const RadialField& phi, double m) {
  const RadialGrid& g = phi.grid();
  const int n = g.size();
  const Vector& r = g.nodes();
  const Vector& p = phi.values();
  const double c = 16.0 * kPi * m * m * m;

  SparseMatrix local = -system_derivatives(g, m).phi_second;
  const Vector diag = Vector::Constant(n, 2.0 * m) - potential(phi, m);
  local += SparseMatrix(diag.asDiagonal());
  local.prune([n](int row, int, double) { return row != n - 1; });
  local.coeffRef(n - 1, n - 1) = 1.0;
  local.makeCompressed();
  StructuredOperator op(std::move(local));

  // -c phi_i K[2 phi h](r_i) = -c phi_i ( P[2 phi h]_i / r_i + S[2 phi h / s]_i ).
  Vector row_inner = -c * p.cwiseQuotient(r);
  Vector row_outer = -c * p;
  row_inner[n - 1] = 0.0;
  row_outer[n - 1] = 0.0;

  IntegralTerm inner;
  inner.sweep = Sweep::prefix;
  inner.integrand = SparseMatrix(Vector(2.0 * p).asDiagonal());
  inner.segments = g.segment_matrix(OriginClass::vanishes_like_r2);
  inner.coupling = SparseMatrix(row_inner.asDiagonal());
  op.add_integral(std::move(inner));

  IntegralTerm outer;
  outer.sweep = Sweep::suffix;
  outer.integrand = SparseMatrix(Vector(2.0 * p.cwiseQuotient(r)).asDiagonal());
  outer.segments = g.segment_matrix(OriginClass::vanishes_like_r);
  outer.coupling = SparseMatrix(row_outer.asDiagonal());
  op.add_integral(std::move(outer));
  return op;
}

ChoquardSolution solve_ground_state(double m, GridPtr grid, const ChoquardConfig& cfg) {
  if (!(m > 0.0)) throw ParameterError("solve_ground_state: mass must be positive");
  if (!grid) throw ParameterError("solve_ground_state: missing grid");
  cfg.validate();
  const RadialGrid& g = *grid;
  const int n = g.size();
  const Vector& r = g.nodes();
  const double kappa = std::sqrt(2.0 * m);
  if (g.r_max() * kappa < 20.0) throw ParameterError("solve_ground_state: grid does not resolve the decay scale");

  // Phase 1: normalized eigen-iteration -w'' + 2m w = lambda V[w] w, int w^2 = 1.
  Vector w(n);
  for (int i = 0; i < n; ++i) w[i] = r[i] * std::exp(-kappa * r[i] * r[i] / 2.0);
  w[n - 1] = 0.0;
  w /= std::sqrt(weighted_norm2(g, w));

  Eigen::SparseLU<SparseMatrix> h0;
  const SparseMatrix h = free_operator(g, m);
  h0.compute(h);
  if (h0.info() != Eigen::Success) throw ConvergenceError("free operator factorization failed");

  auto field = [&](const Vector& v) {
    return RadialField(grid, v, OriginClass::vanishes_like_r, TailClass::exponential);
  };

  Vector v_pot = potential(field(w), m);
  double lambda = 0.0, lambda_prev = 0.0;
  int projections = 0;
  int scf = 0;
  bool converged = false;
  for (scf = 1; scf <= cfg.max_scf; ++scf) {
    Vector rhs = v_pot.cwiseProduct(w);
    rhs[n - 1] = 0.0;
    Vector y = h0.solve(rhs);
    if (y.sum() < 0.0) y = -y;
    // y = w / lambda for an eigenpair.
    const Vector& wq = g.weights(OriginClass::vanishes_like_r2);
    lambda = wq.dot(w.cwiseAbs2()) / wq.dot(w.cwiseProduct(y));
    w = y / std::sqrt(weighted_norm2(g, y));
    if (project_positive(w)) ++projections;
    v_pot = (1.0 - cfg.scf_mixing) * v_pot + cfg.scf_mixing * potential(field(w), m);
    if (scf > 1 && std::abs(lambda - lambda_prev) < cfg.scf_tol * std::abs(lambda)) {
      converged = true;
      break;
    }
    lambda_prev = lambda;
  }
  if (!converged)
    throw ConvergenceError("SCF iteration stagnated (lambda = " + std::to_string(lambda) + ")", w,
                           std::abs(lambda - lambda_prev));
  if (!(lambda > 0.0)) throw ConvergenceError("SCF produced a non-positive eigenfactor", w, lambda);

  // Phase 2: damped Newton on the full discrete residual.
  Vector phi = std::sqrt(lambda) * w;
  Vector f = choquard_residual_vector(field(phi), m);
  double res = choquard_residual_norm(g, f);
  int it = 0;
  while (res >= cfg.newton_tol) {
    if (it >= cfg.max_newton) throw ConvergenceError("Choquard Newton did not converge", phi, res);
    ++it;
    OperatorFactorization jac(choquard_jacobian(field(phi), m));
    const Vector step = jac.solve(-f);
    double t = 1.0;
    Vector trial;
    double trial_res = 0.0;
    for (;;) {
      trial = phi + t * step;
      if (project_positive(trial)) ++projections;
      trial_res = choquard_residual(field(trial), m);
      if (trial_res <= (1.0 - 1e-4 * t) * res || t < 1.0 / 1024.0) break;
      t *= 0.5;
    }
    if (!std::isfinite(trial_res) || trial_res > 10.0 * res)
      throw ConvergenceError("Choquard Newton diverged", phi, res);
    phi = trial;
    f = choquard_residual_vector(field(phi), m);
    res = choquard_residual_norm(g, f);
  }
  if (projections > 0)
    std::cerr << "warning: " << projections << " non-positive Choquard iterate(s) projected to |phi|\n";

  ChoquardSolution sol{m,
                       field(phi),
                       derive_chi(field(phi), m),
                       derive_tau(field(phi), m),
                       lambda,
                       res,
                       integrate(g, phi.cwiseAbs2(), OriginClass::vanishes_like_r2),
                       scf,
                       it,
                       projections};
  if (!(sol.mass_integral > 0.0)) throw ConvergenceError("Choquard solve collapsed to the trivial state", phi, res);
  return sol;
}

}  // namespace edsolve
