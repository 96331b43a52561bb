#include "edsolve/einstein_dirac.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace edsolve {

RescalingMap RescalingMap::for_eps(double eps) {
  if (!(eps >= 0.0)) throw ParameterError("rescaling needs eps >= 0");
  const double a = std::sqrt(eps);
  return {a, eps, eps, a};
}

Vector PerturbedState::stacked() const {
  const int n = phi.size();
  Vector v(3 * n);
  v << phi.values(), chi.values(), tau.values();
  return v;
}

PerturbedState PerturbedState::with_stacked(const Vector& v) const {
  const int n = phi.size();
  if (v.size() != 3 * n) throw ParameterError("stacked state has the wrong size");
  return {m, eps, phi.with_values(v.head(n)), chi.with_values(v.segment(n, n)), tau.with_values(v.tail(n))};
}

PerturbedState PerturbedState::with_eps(double e) const { return {m, e, phi, chi, tau}; }

void PerturbedState::validate() const {
  if (!(m > 0.0)) throw ParameterError("perturbed state: mass must be positive");
  if (!(eps >= 0.0 && eps < m)) throw ParameterError("perturbed state: need 0 <= eps < m");
  if (chi.grid_ptr() != phi.grid_ptr() || tau.grid_ptr() != phi.grid_ptr())
    throw ParameterError("perturbed state: fields live on different grids");
}

PerturbedState base_state(const ChoquardSolution& sol) { return {sol.m, 0.0, sol.phi0, sol.chi0, sol.tau0}; }

void SolverConfig::validate() const {
  if (!(delta_A > 0.0 && delta_A < 1.0)) throw ParameterError("delta_A must lie in (0, 1)");
  if (!(ball_radius > 1.0)) throw ParameterError("ball radius must exceed 1");
  if (!(newton_tol > 0.0) || max_newton < 1) throw ParameterError("invalid Newton controls");
  if (!(initial_step > 0.0 && initial_step <= max_step && max_step <= 1.0))
    throw ParameterError("continuation steps must satisfy 0 < initial_step <= max_step <= 1");
  if (!(min_step > 0.0)) throw ParameterError("min_step must be positive");
  if (!(growth >= 1.0) || !(shrink > 0.0 && shrink < 1.0)) throw ParameterError("invalid step growth/shrink");
  if (fast_iterations < 1) throw ParameterError("fast_iterations must be >= 1");
}

namespace {

// Exterior tau at radius r for total charge q: T = A^{-1/2} with the exterior
// metric A = 1 - 16 pi (m - eps) eps q / r.
double closure_value(double m, double eps, double q, double r_max) {
  const double omega = m - eps;
  if (eps == 0.0) return 8.0 * kPi * m * q / r_max;
  const double x = 16.0 * kPi * omega * eps * q / r_max;
  if (!(x < 1.0)) throw PositivityError("exterior metric is not positive at r_max", -1, r_max, 1.0 - x);
  return std::expm1(-0.5 * std::log1p(-x)) / eps;
}

// dF/dQ of closure_value.
double closure_slope(double m, double eps, double q, double r_max) {
  const double omega = m - eps;
  const double x = 16.0 * kPi * omega * eps * q / r_max;
  return 8.0 * kPi * omega / r_max * std::pow(1.0 - x, -1.5);
}

// Nodal quantities shared by the residual and the Jacobian.
struct Pointwise {
  double m, eps, omega, c_a;
  Vector r, phi, chi, tau;
  Vector sigma;   // 1 + eps tau
  Vector rho;     // phi^2 + eps chi^2
  Vector q;       // int_0^r sigma^2 rho
  Vector a;       // metric
  Vector dphi, dchi, dtau;
  Vector dtau_dq;  // sensitivity of dtau to the total charge through the exterior
};

Pointwise evaluate_pointwise(const PerturbedState& s, double delta_A) {
  s.validate();
  const RadialGrid& g = s.grid();
  const SystemDerivatives d = system_derivatives(g, s.m);
  Pointwise p;
  p.m = s.m;
  p.eps = s.eps;
  p.omega = s.m - s.eps;
  p.c_a = 16.0 * kPi * p.omega * p.eps;
  p.r = g.nodes();
  p.phi = s.phi.values();
  p.chi = s.chi.values();
  p.tau = s.tau.values();
  p.sigma = (1.0 + p.eps * p.tau.array()).matrix();
  p.rho = (p.phi.array().square() + p.eps * p.chi.array().square()).matrix();
  p.q = prefix_integral(g, (p.sigma.array().square() * p.rho.array()).matrix(), OriginClass::vanishes_like_r2);
  p.a = (1.0 - p.c_a * p.q.array() / p.r.array()).matrix();
  for (int i = 0; i < p.a.size(); ++i) {
    if (!(p.a[i] > delta_A)) {
      std::ostringstream os;
      os << "metric A = " << p.a[i] << " <= " << delta_A << " at node " << i << " (r = " << p.r[i] << ")";
      throw PositivityError(os.str(), i, p.r[i], p.a[i]);
    }
  }
  p.dphi = d.phi * p.phi;
  p.dchi = d.chi * p.chi;
  p.dtau = d.tau * p.tau;
  p.dtau_dq = Vector::Zero(p.r.size());
  if (p.eps != 0.0) {
    // The tau stencil continues tau beyond r_max as tau_N r_max / r; replace
    // that by the exact exterior solution.
    const OuterGhosts og = g.outer_ghosts(OriginClass::finite_limit, 1, Stencil::upwind);
    const double r_max = g.r_max(), qn = p.q[p.q.size() - 1];
    const double fn = closure_value(p.m, p.eps, qn, r_max), sn = closure_slope(p.m, p.eps, qn, r_max);
    Vector delta(og.radii.size()), slope(og.radii.size());
    for (int k = 0; k < og.radii.size(); ++k) {
      const double rk = og.radii[k];
      delta[k] = closure_value(p.m, p.eps, qn, rk) - fn * r_max / rk;
      slope[k] = closure_slope(p.m, p.eps, qn, rk) - sn * r_max / rk;
    }
    p.dtau += og.weights * delta;
    p.dtau_dq = og.weights * slope;
  }
  return p;
}

using Triplets = std::vector<Eigen::Triplet<double>>;
using RowMajor = Eigen::SparseMatrix<double, Eigen::RowMajor>;

}  // namespace

double tau_tail_value(double m, double eps, double q, double r_max) { return closure_value(m, eps, q, r_max); }

RadialField metric_A(const PerturbedState& s, double delta_A) {
  const Pointwise p = evaluate_pointwise(s, delta_A);
  return RadialField(s.grid_ptr(), p.a, OriginClass::finite_limit, TailClass::inverse_r);
}

KTerms k_terms(const PerturbedState& s) {
  s.validate();
  const RadialGrid& g = s.grid();
  const double m = s.m, e = s.eps, w = m - s.eps;
  const Vector& r = g.nodes();
  const Eigen::ArrayXd phi = s.phi.values().array(), chi = s.chi.values().array(), tau = s.tau.values().array();
  const Eigen::ArrayXd sig = 1.0 + e * tau;
  const Eigen::ArrayXd rho = phi.square() + e * chi.square();
  const Eigen::ArrayXd rho_m = phi.square() - e * chi.square();
  const Eigen::ArrayXd ir = r.array().inverse(), ir2 = ir.square();
  auto prefix = [&](const Eigen::ArrayXd& f) {
    return prefix_integral(g, f.matrix(), OriginClass::vanishes_like_r2).array().eval();
  };
  const Eigen::ArrayXd q = prefix(sig.square() * rho);

  KTerms k{s.chi.with_values((-e * chi + e * w * tau * chi).matrix()), s.tau.with_values((e * tau * phi).matrix()),
           s.tau, {}};
  auto& t = k.k3_terms;
  t[0] = (8.0 * kPi * m * e * ir2 * prefix(chi.square())).matrix();
  t[1] = (16.0 * kPi * m * e * ir2 * prefix(tau * rho)).matrix();
  t[2] = (8.0 * kPi * m * e * e * ir2 * prefix(tau.square() * rho)).matrix();
  t[3] = (-8.0 * kPi * e * ir2 * q).matrix();
  t[4] = (8.0 * kPi * w * e * ir2 * q * tau).matrix();
  t[5] = (16.0 * kPi * m * e * chi.square() * ir).matrix();
  t[6] = (8.0 * kPi * m * e * (3.0 * tau + 3.0 * e * tau.square() + e * e * tau.cube()) * rho * ir).matrix();
  t[7] = (-8.0 * kPi * m * e * (2.0 * tau + e * tau.square()) * rho_m * ir).matrix();
  t[8] = (-8.0 * kPi * e * sig.cube() * rho * ir).matrix();
  t[9] = (-16.0 * kPi * e * sig.square() * phi * chi * ir2).matrix();
  Vector sum = Vector::Zero(g.size());
  for (const auto& term : t) sum += term;
  k.K3 = s.tau.with_values(sum);
  return k;
}

std::array<double, 3> residual_norms(const RadialGrid& g, const Vector& v) {
  const int n = g.size();
  if (v.size() != 3 * n) throw ParameterError("residual has the wrong size");
  const Vector& r = g.nodes();
  const Vector& w2 = g.weights(OriginClass::vanishes_like_r2);
  const Vector& w = g.weights();
  std::array<double, 3> out{};
  for (int b = 0; b < 2; ++b) {
    double s = 0.0;
    for (int i = 0; i + 1 < n; ++i) s += w2[i] * r[i] * r[i] * v[b * n + i] * v[b * n + i];
    out[b] = std::sqrt(4.0 * kPi * s + v[b * n + n - 1] * v[b * n + n - 1]);
  }
  double s = 0.0;
  for (int i = 0; i + 1 < n; ++i) s += w[i] * std::abs(v[2 * n + i]);
  out[2] = s + std::abs(v[3 * n - 1]);
  return out;
}

ResidualD residual_D(const PerturbedState& s, double delta_A) {
  const Pointwise p = evaluate_pointwise(s, delta_A);
  const int n = s.grid().size();
  const double m = p.m, e = p.eps, w = p.omega;
  const Eigen::ArrayXd r = p.r.array(), ir = r.inverse(), ir2 = ir.square();
  const Eigen::ArrayXd phi = p.phi.array(), chi = p.chi.array(), tau = p.tau.array(), sig = p.sigma.array();
  const Eigen::ArrayXd sq = p.a.array().sqrt();

  ResidualD out;
  out.stacked.resize(3 * n);
  out.stacked.head(n) = (sq * p.dphi.array() * ir - phi * ir2 + ((2.0 * m - e) + e * w * tau) * chi * ir).matrix();
  out.stacked.segment(n, n) = (sq * p.dchi.array() * ir + chi * ir2 + (1.0 - w * tau) * phi * ir).matrix();
  // The pointwise part of the third equation, with the eps-free terms
  // cancelled analytically: (8 pi eps sigma^2 / r) (2m chi^2 + (w tau - 1) rho - 2 phi chi / r).
  const Eigen::ArrayXd g3 = sig.square() * (2.0 * m * chi.square() + (w * tau - 1.0) * p.rho.array() - 2.0 * phi * chi * ir);
  out.stacked.tail(n) =
      (p.a.array() * p.dtau.array() + 8.0 * kPi * w * ir2 * p.q.array() * sig + 8.0 * kPi * e * g3 * ir).matrix();
  out.stacked[n - 1] = phi[n - 1];
  out.stacked[2 * n - 1] = chi[n - 1];
  out.stacked[3 * n - 1] = tau[n - 1] - closure_value(m, e, p.q[n - 1], r[n - 1]);
  out.norms = residual_norms(s.grid(), out.stacked);
  return out;
}

RadialField ResidualD::res_phi(const GridPtr& g) const {
  return RadialField(g, stacked.head(g->size()), OriginClass::finite_limit, TailClass::exponential);
}
RadialField ResidualD::res_chi(const GridPtr& g) const {
  return RadialField(g, stacked.segment(g->size(), g->size()), OriginClass::finite_limit, TailClass::exponential);
}
RadialField ResidualD::res_tau(const GridPtr& g) const {
  return RadialField(g, stacked.tail(g->size()), OriginClass::finite_limit, TailClass::inverse_r);
}

LinearOperator jacobian(const PerturbedState& s, double delta_A) {
  const Pointwise p = evaluate_pointwise(s, delta_A);
  const RadialGrid& g = s.grid();
  const int n = g.size();
  const double m = p.m, e = p.eps, w = p.omega;
  const SystemDerivatives d = system_derivatives(g, m);
  const RowMajor dh(d.phi), dk(d.chi), dl(d.tau);

  Triplets t;
  t.reserve(static_cast<size_t>(3 * n * (RadialGrid::kStencilWidth + 3)));
  for (int i = 0; i + 1 < n; ++i) {
    const double ri = p.r[i], ir = 1.0 / ri, ir2 = ir * ir;
    const double phi = p.phi[i], chi = p.chi[i], tau = p.tau[i], sig = p.sigma[i], rho = p.rho[i];
    const double sq = std::sqrt(p.a[i]);
    // L1
    for (RowMajor::InnerIterator it(dh, i); it; ++it) t.emplace_back(i, it.col(), sq * it.value() * ir);
    t.emplace_back(i, i, -ir2);
    t.emplace_back(i, n + i, ((2.0 * m - e) + e * w * tau) * ir);
    if (e != 0.0) t.emplace_back(i, 2 * n + i, e * w * chi * ir);
    // L2
    for (RowMajor::InnerIterator it(dk, i); it; ++it) t.emplace_back(n + i, n + it.col(), sq * it.value() * ir);
    t.emplace_back(n + i, n + i, ir2);
    t.emplace_back(n + i, i, (1.0 - w * tau) * ir);
    t.emplace_back(n + i, 2 * n + i, -w * phi * ir);
    // L3
    for (RowMajor::InnerIterator it(dl, i); it; ++it) t.emplace_back(2 * n + i, 2 * n + it.col(), p.a[i] * it.value());
    if (e != 0.0) {
      const double bracket = 2.0 * m * chi * chi + (w * tau - 1.0) * rho - 2.0 * phi * chi * ir;
      const double g_phi = sig * sig * (2.0 * (w * tau - 1.0) * phi - 2.0 * chi * ir);
      const double g_chi = sig * sig * (4.0 * m * chi + 2.0 * e * (w * tau - 1.0) * chi - 2.0 * phi * ir);
      const double g_tau = 2.0 * e * sig * bracket + sig * sig * w * rho;
      const double c = 8.0 * kPi * e * ir;
      t.emplace_back(2 * n + i, i, c * g_phi);
      t.emplace_back(2 * n + i, n + i, c * g_chi);
      t.emplace_back(2 * n + i, 2 * n + i, c * g_tau + 8.0 * kPi * w * e * p.q[i] * ir2);
    }
  }
  t.emplace_back(n - 1, n - 1, 1.0);
  t.emplace_back(2 * n - 1, 2 * n - 1, 1.0);
  t.emplace_back(3 * n - 1, 3 * n - 1, 1.0);
  SparseMatrix local(3 * n, 3 * n);
  local.setFromTriplets(t.begin(), t.end());
  local.makeCompressed();
  StructuredOperator op(std::move(local));

  // Directional derivative of Q: int_0^r (2 sigma^2 phi h1 + 2 eps sigma^2 chi h2 + 2 eps sigma rho h3).
  IntegralTerm dq;
  dq.sweep = Sweep::prefix;
  Triplets a, c;
  for (int i = 0; i < n; ++i) {
    const double s2 = p.sigma[i] * p.sigma[i];
    a.emplace_back(i, i, 2.0 * s2 * p.phi[i]);
    if (e != 0.0) {
      a.emplace_back(i, n + i, 2.0 * e * s2 * p.chi[i]);
      a.emplace_back(i, 2 * n + i, 2.0 * e * p.sigma[i] * p.rho[i]);
    }
  }
  dq.integrand = SparseMatrix(n, 3 * n);
  dq.integrand.setFromTriplets(a.begin(), a.end());
  dq.segments = g.segment_matrix(OriginClass::vanishes_like_r2);
  for (int i = 0; i + 1 < n; ++i) {
    const double ri = p.r[i];
    // dA = -(c_a / r) dQ enters through sqrt(A) phi'/r, sqrt(A) chi'/r and A tau'.
    if (p.c_a != 0.0) {
      const double da = -p.c_a / ri;
      const double sq = std::sqrt(p.a[i]);
      c.emplace_back(i, i, 0.5 * da / sq * p.dphi[i] / ri);
      c.emplace_back(n + i, i, 0.5 * da / sq * p.dchi[i] / ri);
      c.emplace_back(2 * n + i, i, da * p.dtau[i] + 8.0 * kPi * w * p.sigma[i] / (ri * ri));
    } else {
      c.emplace_back(2 * n + i, i, 8.0 * kPi * w * p.sigma[i] / (ri * ri));
    }
  }
  for (int i = 0; i + 1 < n; ++i)
    if (p.dtau_dq[i] != 0.0) c.emplace_back(2 * n + i, n - 1, p.a[i] * p.dtau_dq[i]);
  c.emplace_back(3 * n - 1, n - 1, -closure_slope(m, e, p.q[n - 1], p.r[n - 1]));
  dq.coupling = SparseMatrix(3 * n, n);
  dq.coupling.setFromTriplets(c.begin(), c.end());
  op.add_integral(std::move(dq));

  LinearOperator out{std::move(op), Provenance::jacobian_eps, {{"h", n}, {"k", n}, {"l", n}}, s.grid_ptr(), {}, {},
                     {n - 1, 2 * n - 1, 3 * n - 1}};
  apply_standard_weights(out);
  out.validate();
  return out;
}

std::string to_string(NewtonFailure f) {
  switch (f) {
    case NewtonFailure::none: return "none";
    case NewtonFailure::max_iterations: return "max_iterations";
    case NewtonFailure::ball_exit: return "ball_exit";
    case NewtonFailure::positivity: return "positivity";
    case NewtonFailure::singular: return "singular";
  }
  return "?";
}

std::array<double, 3> distance_x(const PerturbedState& a, const PerturbedState& b) {
  return {h1_profile_norm(a.phi.with_values(a.phi.values() - b.phi.values())),
          h1_profile_norm(a.chi.with_values(a.chi.values() - b.chi.values())),
          tau_norm(a.tau.with_values(a.tau.values() - b.tau.values()))};
}

NewtonResult newton_correct(double eps, const PerturbedState& guess, const PerturbedState& base,
                            const SolverConfig& cfg) {
  cfg.validate();
  PerturbedState x = guess.with_eps(eps);
  x.validate();
  const std::array<double, 3> radius{cfg.ball_radius * h1_profile_norm(base.phi),
                                     cfg.ball_radius * h1_profile_norm(base.chi),
                                     cfg.ball_radius * tau_norm(base.tau)};
  auto inside = [&](const PerturbedState& s) {
    const auto d = distance_x(s, base);
    return d[0] <= radius[0] && d[1] <= radius[1] && d[2] <= radius[2];
  };
  if (!inside(x)) throw NewtonError("Newton guess lies outside the solution balls", NewtonFailure::ball_exit, x, 0.0);

  ResidualD res = [&] {
    try {
      return residual_D(x, cfg.delta_A);
    } catch (const PositivityError& e) {
      throw NewtonError(e.what(), NewtonFailure::positivity, x, 0.0);
    }
  }();
  NewtonResult out{x, 0, res.norms, {res.total()}};
  auto converged = [&](const ResidualD& r) {
    return std::max({r.norms[0], r.norms[1], r.norms[2]}) < cfg.newton_tol;
  };
  while (!converged(res)) {
    if (out.iterations >= cfg.max_newton)
      throw NewtonError("Newton reached the iteration cap", NewtonFailure::max_iterations, x, res.total());
    ++out.iterations;
    Vector step;
    try {
      const LinearOperator j = jacobian(x, cfg.delta_A);
      OperatorFactorization f(j.op);
      step = f.solve(-res.stacked);
      step += f.solve(-res.stacked - j.apply(step));
    } catch (const SingularOperatorError& e) {
      throw NewtonError(e.what(), NewtonFailure::singular, x, res.total());
    }
    if (!step.allFinite()) throw NewtonError("Newton step is not finite", NewtonFailure::singular, x, res.total());

    // Armijo backtracking on the summed Y norms; trial points must keep A
    // above the floor and stay inside the balls.
    double t = 1.0;
    NewtonFailure last_failure = NewtonFailure::none;
    for (;;) {
      const PerturbedState trial = x.with_stacked(x.stacked() + t * step);
      bool ok = false;
      ResidualD trial_res;
      if (!inside(trial)) {
        last_failure = NewtonFailure::ball_exit;
      } else {
        try {
          trial_res = residual_D(trial, cfg.delta_A);
          ok = trial_res.total() <= (1.0 - 1e-4 * t) * res.total() || converged(trial_res);
          last_failure = NewtonFailure::max_iterations;
        } catch (const PositivityError&) {
          last_failure = NewtonFailure::positivity;
        }
      }
      if (ok) {
        x = trial;
        res = trial_res;
        break;
      }
      t *= 0.5;
      if (t < 1.0 / 1024.0) {
        if (last_failure == NewtonFailure::max_iterations)
          throw NewtonError("Newton line search stalled", NewtonFailure::max_iterations, x, res.total());
        throw NewtonError(last_failure == NewtonFailure::positivity ? "Newton iterate lost metric positivity"
                                                                    : "Newton iterate left the solution balls",
                          last_failure, x, res.total());
      }
    }
    out.history.push_back(res.total());
  }
  out.state = x;
  out.norms = res.norms;
  return out;
}

PhysicalSolution unrescale(const PerturbedState& s) {
  s.validate();
  PhysicalSolution ps;
  ps.m = s.m;
  ps.eps = s.eps;
  ps.omega = s.m - s.eps;
  const RadialGrid& g = s.grid();
  const int n = g.size();
  if (s.eps == 0.0) {
    ps.grid = s.grid_ptr();
    ps.Phi1 = ps.Phi2 = ps.t_field = ps.Q_field = Vector::Zero(n);
    ps.A_field = Vector::Ones(n);
    ps.condQ_margin = 1.0 / (16.0 * kPi * ps.omega);
    return ps;
  }
  const RescalingMap k = RescalingMap::for_eps(s.eps);
  ps.grid = RadialGrid::build(n, g.r_max() / k.lambda, g.grading_exponent());
  const Vector& r = ps.grid->nodes();
  ps.Phi1.resize(n);
  ps.Phi2.resize(n);
  ps.t_field.resize(n);
  for (int i = 0; i < n; ++i) {
    const double x = std::min(k.lambda * r[i], g.r_max());
    ps.Phi1[i] = k.alpha * s.phi.evaluate(x);
    ps.Phi2[i] = k.beta * s.chi.evaluate(x);
    ps.t_field[i] = k.gamma * s.tau.evaluate(x);
  }
  const Eigen::ArrayXd tt = 1.0 + ps.t_field.array();
  const Eigen::ArrayXd dens = ps.Phi1.array().square() + ps.Phi2.array().square();
  ps.Q_field = prefix_integral(*ps.grid, (tt.square() * dens).matrix(), OriginClass::vanishes_like_r2);
  ps.A_field = (1.0 - 16.0 * kPi * ps.omega * ps.Q_field.array() / r.array()).matrix();
  ps.adm_mass = 8.0 * kPi * ps.omega * ps.Q_field[n - 1];
  ps.norm_integral = integrate(*ps.grid, (dens * tt / ps.A_field.array().sqrt()).matrix(), OriginClass::vanishes_like_r2);
  ps.condQ_margin = (1.0 / (16.0 * kPi * ps.omega) - ps.Q_field.array() / r.array()).minCoeff();
  return ps;
}

PhysicalResidual physical_residual(const PhysicalSolution& ps, double m) {
  const RadialGrid& g = *ps.grid;
  const int n = g.size();
  const double w = ps.omega;
  PhysicalResidual out;
  const Eigen::ArrayXd r = g.nodes().array();
  const Eigen::ArrayXd p1 = ps.Phi1.array(), p2 = ps.Phi2.array(), a = ps.A_field.array();
  const Eigen::ArrayXd tt = 1.0 + ps.t_field.array();
  Eigen::ArrayXd dp1 = Eigen::ArrayXd::Zero(n), dp2 = dp1, dt = dp1, da = dp1;
  if (ps.eps > 0.0) {
    // Physical decay rate of the spinor: sqrt(m^2 - omega^2).
    const double kappa = std::sqrt(m * m - w * w);
    dp1 = (g.decaying_derivative_matrix(OriginClass::vanishes_like_r, kappa, 1) * ps.Phi1).array();
    dp2 = (g.decaying_derivative_matrix(OriginClass::vanishes_like_r2, kappa, 1) * ps.Phi2).array();
    const SparseMatrix& d = g.derivative_matrix(OriginClass::finite_limit, TailClass::inverse_r, 1);
    // Outside the support T^{-2} - 1 = A - 1 is exactly proportional to 1/r.
    const Eigen::ArrayXd tt0 = 1.0 + ps.t_field.array();
    dt = -0.5 * tt0.cube() * (d * Vector(tt0.square().inverse() - 1.0)).array();
    da = (d * Vector(ps.A_field.array() - 1.0)).array();
  }
  const Eigen::ArrayXd dens = p1.square() + p2.square();
  const Eigen::ArrayXd sa = a.sqrt();
  out.fields[0] = (sa * dp1 - p1 / r + (w * tt + m) * p2).matrix();
  out.fields[1] = (sa * dp2 - (w * tt - m) * p1 + p2 / r).matrix();
  out.fields[2] = (r * da - 1.0 + a + 16.0 * kPi * w * tt.square() * dens).matrix();
  out.fields[3] = (2.0 * r * a * dt / tt - (a - 1.0 - 16.0 * kPi * w * tt.square() * dens + 32.0 * kPi * tt * p1 * p2 / r +
                                            16.0 * kPi * m * tt * (p1.square() - p2.square())))
                      .matrix();
  for (int k = 0; k < 4; ++k) out.norms[k] = std::sqrt(g.weights().dot(out.fields[k].cwiseAbs2()));
  return out;
}

Diagnostics diagnostics(const PhysicalSolution& ps) {
  Diagnostics d;
  const RadialGrid& g = *ps.grid;
  const int n = g.size();
  const Vector& r = g.nodes();
  d.condQ_margin = ps.condQ_margin;
  d.norm_integral = ps.norm_integral;
  d.norm_target_gap = ps.norm_integral - 1.0 / (4.0 * kPi);
  d.min_A = ps.A_field.minCoeff();
  const Vector adm = (r.array() * (1.0 - ps.A_field.array()) / 2.0).matrix();
  d.adm_from_metric = adm[n - 1];
  const Eigen::ArrayXd tt = 1.0 + ps.t_field.array();
  d.adm_from_charge = 8.0 * kPi * ps.omega *
                      integrate(g, (tt.square() * (ps.Phi1.array().square() + ps.Phi2.array().square())).matrix(),
                                OriginClass::vanishes_like_r2);
  const double scale = std::max(std::abs(d.adm_from_metric), std::abs(d.adm_from_charge));
  d.adm_relative_gap = scale > 0.0 ? std::abs(d.adm_from_metric - d.adm_from_charge) / scale : 0.0;
  const int start = n - std::max(1, n / 10);
  const Vector tail = adm.tail(n - start);
  const double hi = tail.maxCoeff(), lo = tail.minCoeff();
  d.plateau_variation = hi > 0.0 ? (hi - lo) / hi : 0.0;
  d.plateau_ok = d.plateau_variation < 0.01;
  d.t_tail = ps.t_field[n - 1];
  d.t_tail_exterior = 1.0 / std::sqrt(ps.A_field[n - 1]) - 1.0;
  return d;
}

BranchPoint make_branch_point(const PerturbedState& s, int iterations, const std::array<double, 3>& norms) {
  PhysicalSolution ps = unrescale(s);
  PhysicalResidual pr = physical_residual(ps, s.m);
  Diagnostics dg = diagnostics(ps);
  return {s.eps, s, std::move(ps), std::move(pr), dg, iterations, norms};
}

Branch continue_branch(double eps_max, const SolverConfig& cfg, const ChoquardSolution& sol) {
  cfg.validate();
  const double m = sol.m;
  if (!(eps_max > 0.0 && eps_max < m)) throw ParameterError("eps_max must lie in (0, m)");
  const PerturbedState base = base_state(sol);
  Branch br;

  const NewtonResult first = [&] {
    try {
      return newton_correct(0.0, base, base, cfg);
    } catch (const NewtonError& e) {
      throw ConvergenceError(std::string("no branch: ") + e.what(), e.iterate, e.residual);
    }
  }();
  br.points.push_back(make_branch_point(first.state, first.iterations, first.norms));
  const auto shift = distance_x(first.state, base);
  br.base_polish_shift = shift[0] + shift[1] + shift[2];
  br.log.push_back({0.0, 0.0, true, first.iterations, "eps = 0 polish"});

  double step = cfg.initial_step * eps_max;
  const double max_step = cfg.max_step * eps_max;
  bool saw_positivity = false;
  while (br.points.back().eps < eps_max) {
    const BranchPoint& last = br.points.back();
    const double e_new = std::min(last.eps + step, eps_max);
    const double h = e_new - last.eps;
    // Secant predictor from the last two points, order 0 at the start.
    PerturbedState guess = last.state;
    if (br.points.size() >= 2) {
      const BranchPoint& prev = br.points[br.points.size() - 2];
      const double ratio = h / (last.eps - prev.eps);
      guess = last.state.with_stacked(last.state.stacked() + ratio * (last.state.stacked() - prev.state.stacked()));
    }
    StepLogEntry entry{e_new, h, false, 0, ""};
    try {
      NewtonResult nr = newton_correct(e_new, guess, base, cfg);
      BranchPoint bp = make_branch_point(nr.state, nr.iterations, nr.norms);
      if (!(bp.diag.min_A >= cfg.delta_A) || !(bp.diag.condQ_margin > 0.0))
        throw NewtonError("accepted point violates the positivity window", NewtonFailure::positivity, nr.state, 0.0);
      entry.accepted = true;
      entry.iterations = nr.iterations;
      br.log.push_back(entry);
      br.points.push_back(std::move(bp));
      if (nr.iterations <= cfg.fast_iterations) step = std::min(step * cfg.growth, max_step);
    } catch (const NewtonError& e) {
      entry.note = to_string(e.reason);
      br.log.push_back(entry);
      if (e.reason == NewtonFailure::positivity) saw_positivity = true;
      step *= cfg.shrink;
      if (step < cfg.min_step * m) {
        if (br.points.size() == 1) throw ConvergenceError("no branch: the first continuation step failed");
        br.stop_reason = saw_positivity ? "positivity wall" : "step underflow";
        return br;
      }
    }
  }
  br.stop_reason = "eps_max";
  return br;
}

namespace {

double norm_at(double m, double eps_over_m, const SolverConfig& cfg, int n_nodes, double grading) {
  const GridPtr g = RadialGrid::build(n_nodes, default_r_max(m), grading);
  const ChoquardSolution sol = solve_ground_state(m, g);
  SolverConfig c = cfg;
  c.initial_step = 0.25;
  c.max_step = 0.5;
  const Branch br = continue_branch(eps_over_m * m, c, sol);
  if (br.stop_reason != "eps_max")
    throw ConvergenceError("normalization: branch stopped early (" + br.stop_reason + ")");
  return br.points.back().physical.norm_integral;
}

}  // namespace

NormalizedSolution normalized_solution(double eps_over_m, double target, const SolverConfig& cfg, int n_nodes,
                                       double grading, double tol) {
  if (!(target > 0.0)) throw ParameterError("normalization target must be positive");
  if (!(eps_over_m > 0.0 && eps_over_m < 1.0)) throw ParameterError("eps/m must lie in (0, 1)");
  NormalizedSolution out;
  auto sample_at = [&](double m) {
    const double v = norm_at(m, eps_over_m, cfg, n_nodes, grading);
    out.table.emplace_back(m, v);
    return v;
  };
  // At fixed eps/m the norm scales close to m^{-2}; use that for the bracket.
  const double n1 = sample_at(1.0);
  const double m_guess = std::sqrt(n1 / target);
  double a = m_guess * 0.8, b = m_guess * 1.25;
  double fa = std::log(sample_at(a) / target), fb = std::log(sample_at(b) / target);
  if (fa * fb > 0.0) {
    std::ostringstream os;
    os << "normalization: no sign change in the bracket; samples (m, norm):";
    for (const auto& [mm, v] : out.table) os << " (" << mm << ", " << v << ")";
    throw ConvergenceError(os.str());
  }
  // Illinois-modified regula falsi in (log m, log norm).
  double la = std::log(a), lb = std::log(b);
  int side = 0;
  for (int it = 0; it < 40; ++it) {
    const double lc = (la * fb - lb * fa) / (fb - fa);
    const double fc = std::log(sample_at(std::exp(lc)) / target);
    if (std::abs(fc) < tol || std::abs(lb - la) < 1e-14) {
      out.m = std::exp(lc);
      break;
    }
    if (fc * fb < 0.0) {
      la = lb;
      fa = fb;
      side = 0;
    } else if (side == -1) {
      fa *= 0.5;
    } else {
      side = -1;
    }
    lb = lc;
    fb = fc;
  }
  if (out.m == 0.0) throw ConvergenceError("normalization: secant did not converge");
  const GridPtr g = RadialGrid::build(n_nodes, default_r_max(out.m), grading);
  const ChoquardSolution sol = solve_ground_state(out.m, g);
  SolverConfig c = cfg;
  c.initial_step = 0.25;
  c.max_step = 0.5;
  out.solution = continue_branch(eps_over_m * out.m, c, sol).points.back().physical;
  return out;
}

DepartureFit departure_slope(const Branch& br) {
  if (br.points.size() < 3 || br.points[0].eps != 0.0) throw ParameterError("departure slope needs eps = 0 and two more points");
  const PerturbedState& base = br.points[0].state;
  const double eps1 = br.points[1].eps;
  std::vector<double> x, y;
  for (size_t i = 1; i < br.points.size() && br.points[i].eps <= 10.0 * eps1 * (1.0 + 1e-12); ++i) {
    const auto d = distance_x(br.points[i].state, base);
    x.push_back(std::log(br.points[i].eps));
    y.push_back(std::log(d[0] + d[1] + d[2]));
  }
  DepartureFit fit;
  fit.points = static_cast<int>(x.size());
  if (fit.points < 2) throw ParameterError("departure slope: fewer than two points in the first decade");
  fit.eps_first = std::exp(x.front());
  fit.eps_last = std::exp(x.back());
  const double n = fit.points;
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (int i = 0; i < fit.points; ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  fit.slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return fit;
}

}  // namespace edsolve
