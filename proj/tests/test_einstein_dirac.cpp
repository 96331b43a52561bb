#include "edsolve/einstein_dirac.hpp"
#include "fixtures.hpp"

#include <doctest.h>

#include <cmath>

using namespace edsolve;
using edsolve::testing::ground_state;
using edsolve::testing::sup_abs;

namespace {

constexpr double kM = 0.5;

PerturbedState zero_state(const GridPtr& g, double m, double eps) {
  return {m, eps, RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential),
          RadialField::zeros(g, OriginClass::vanishes_like_r2, TailClass::exponential),
          RadialField::zeros(g, OriginClass::finite_limit, TailClass::inverse_r)};
}

Vector bump(const RadialGrid& g, double a, double b, double c) {
  const int n = g.size();
  const Vector& r = g.nodes();
  Vector d(3 * n);
  for (int i = 0; i < n; ++i) {
    const double e = std::exp(-r[i] * r[i] / 8.0);
    d[i] = a * r[i] * e;
    d[n + i] = b * r[i] * r[i] * e;
    d[2 * n + i] = c * e;
  }
  return d;
}

const Branch& coarse_branch() {
  static const Branch br = continue_branch(0.05 * kM, SolverConfig{}, ground_state(kM, 500));
  return br;
}

}  // namespace

TEST_SUITE("einstein_dirac") {

TEST_CASE("rescaling constants") {
  const RescalingMap k = RescalingMap::for_eps(0.25);
  CHECK(k.alpha == 0.5);
  CHECK(k.beta == 0.25);
  CHECK(k.gamma == 0.25);
  CHECK(k.lambda == 0.5);
  CHECK_THROWS_AS(RescalingMap::for_eps(-1.0), ParameterError);
}

TEST_CASE("metric A") {
  const ChoquardSolution& s = ground_state(kM, 1000);
  CHECK((metric_A(base_state(s)).values().array() == 1.0).all());

  // eps = 0.01, m = 1, chi = tau = 0: A = 1 - 0.1584 pi / r int_0^r phi0^2,
  // against an O(N^2) trapezoid evaluation.
  const ChoquardSolution& s1 = ground_state(1.0, 2000);
  const GridPtr g = s1.grid_ptr();
  const PerturbedState st{1.0, 0.01, s1.phi0, RadialField::zeros(g, OriginClass::vanishes_like_r2, TailClass::exponential),
                          RadialField::zeros(g, OriginClass::finite_limit, TailClass::inverse_r)};
  const Vector a = metric_A(st).values();
  const Vector& r = g->nodes();
  const Vector f = s1.phi0.values().cwiseAbs2();
  double worst = 0.0, scale = 0.0;
  for (int i = 0; i < g->size(); i += 37) {
    double q = 0.5 * r[0] * f[0];
    for (int j = 1; j <= i; ++j) q += 0.5 * (r[j] - r[j - 1]) * (f[j] + f[j - 1]);
    const double want = 1.0 - 0.1584 * kPi / r[i] * q;
    worst = std::max(worst, std::abs(a[i] - want));
    scale = std::max(scale, 1.0 - want);
  }
  CHECK(worst / scale < 1e-5);

  // A decreases as eps grows from 0 for fixed nonnegative data.
  const Vector a1 = metric_A(st.with_eps(0.001)).values(), a2 = metric_A(st.with_eps(0.002)).values();
  CHECK(((a2 - a1).array() <= 0.0).all());
}

TEST_CASE("K terms") {
  const ChoquardSolution& s = ground_state(kM, 500);
  const KTerms k0 = k_terms(base_state(s));
  CHECK(sup_abs(k0.K1.values()) == 0.0);
  CHECK(sup_abs(k0.K2.values()) == 0.0);
  CHECK(sup_abs(k0.K3.values()) == 0.0);

  const GridPtr g = s.grid_ptr();
  const int n = g->size();
  const PerturbedState ones{1.0, 0.1, s.phi0,
                            RadialField(g, Vector::Ones(n), OriginClass::vanishes_like_r2, TailClass::exponential),
                            RadialField(g, Vector::Ones(n), OriginClass::finite_limit, TailClass::inverse_r)};
  CHECK(sup_abs(k_terms(ones).K1.values() + 0.01 * Vector::Ones(n)) < 1e-15);
}

TEST_CASE("residual decomposes into the eps = 0 operator plus K terms") {
  const ChoquardSolution& s = ground_state(kM, 1000);
  const GridPtr g = s.grid_ptr();
  const int n = g->size();
  const double eps = 0.03;
  const Vector x = base_state(s).stacked() + bump(*g, 0.2, -0.1, 0.3);
  const PerturbedState st = base_state(s).with_eps(eps).with_stacked(x);
  const Vector res = residual_D(st).stacked;
  const KTerms k = k_terms(st);
  const SystemDerivatives d = system_derivatives(*g, kM);
  const Vector& r = g->nodes();
  const Eigen::ArrayXd sa = metric_A(st).values().array().sqrt();
  const Eigen::ArrayXd phi = st.phi.values().array(), chi = st.chi.values().array(), tau = st.tau.values().array();
  const Eigen::ArrayXd ra = r.array();
  const Eigen::ArrayXd l1 = sa * (d.phi * st.phi.values()).array() / ra - phi / ra.square() + 2.0 * kM * chi / ra +
                            k.K1.values().array() / ra;
  const Eigen::ArrayXd l2 = sa * (d.chi * st.chi.values()).array() / ra + chi / ra.square() +
                            (1.0 - kM * tau) * phi / ra + k.K2.values().array() / ra;
  const Vector q = prefix_integral(*g, st.phi.values().cwiseAbs2(), OriginClass::vanishes_like_r2);
  const Eigen::ArrayXd l3 = metric_A(st).values().array() * (d.tau * st.tau.values()).array() +
                            8.0 * kPi * kM * q.array() / ra.square() + k.K3.values().array();
  // Rows whose stencils stay inside (0, r_max].
  const int inner = n - RadialGrid::kStencilWidth;
  auto rel = [&](const Eigen::ArrayXd& want, int block) {
    const Vector diff = (res.segment(block * n, n).array() - want).matrix().head(inner);
    return sup_abs(diff) / sup_abs(want.matrix().head(inner));
  };
  CHECK(rel(l1, 0) < 1e-10);
  CHECK(rel(l2, 1) < 1e-10);
  CHECK(rel(l3, 2) < 1e-10);
}

TEST_CASE("residual examples") {
  const ChoquardSolution& s = ground_state(kM, 1000);
  CHECK(sup_abs(residual_D(zero_state(s.grid_ptr(), kM, 0.0)).stacked) == 0.0);
  const ResidualD r0 = residual_D(base_state(s));
  for (double v : r0.norms) CHECK(v < 1e-6);

  // First-order Taylor behaviour of a 1e-3 perturbation.
  const Vector d = bump(s.grid(), 1.0, 1.0, 1.0);
  const PerturbedState b = base_state(s);
  const ResidualD r1 = residual_D(b.with_stacked(b.stacked() + 1e-3 * d));
  const ResidualD r2 = residual_D(b.with_stacked(b.stacked() + 2e-3 * d));
  CHECK(r1.total() > 0.0);
  CHECK(r1.total() < 1e-1);
  CHECK(r2.total() / r1.total() == doctest::Approx(2.0).epsilon(0.02));
}

TEST_CASE("jacobian against D' and finite differences") {
  const ChoquardSolution& s = ground_state(kM, 300);
  const PerturbedState b = base_state(s);
  const Matrix j0 = jacobian(b).dense(), dp = assemble_D_prime(s).dense();
  CHECK((j0 - dp).cwiseAbs().maxCoeff() / dp.cwiseAbs().maxCoeff() < 1e-12);

  const PerturbedState st = b.with_eps(0.01 * kM);
  const LinearOperator J = jacobian(st);
  const Vector d = bump(s.grid(), 0.7, -1.3, 0.4);
  const Vector x = st.stacked();
  auto central = [&](double h) {
    return Vector((residual_D(st.with_stacked(x + h * d)).stacked - residual_D(st.with_stacked(x - h * d)).stacked) /
                  (2.0 * h));
  };
  const Vector jd = J.apply(d);
  const Vector fd = (100.0 * central(1e-5) - central(1e-4)) / 99.0;
  const auto ne = residual_norms(s.grid(), fd - jd), nj = residual_norms(s.grid(), jd);
  for (int k = 0; k < 3; ++k) CHECK(ne[k] / nj[k] < 1e-5);
}

TEST_CASE("dL1/dtau with phi' = 0") {
  const ChoquardSolution& s = ground_state(kM, 500);
  const GridPtr g = s.grid_ptr();
  const int n = g->size();
  const double eps = 0.01;
  const PerturbedState st{kM, eps, zero_state(g, kM, eps).phi, s.chi0, s.tau0};
  Vector d = Vector::Zero(3 * n);
  d.tail(n) = sample(*g, [](double r) { return std::exp(-0.2 * r); });
  const Vector jd = jacobian(st).apply(d);
  const Vector want = eps * (kM - eps) * d.tail(n).cwiseProduct(s.chi0.values()).cwiseQuotient(g->nodes());
  CHECK(sup_abs((jd.head(n) - want).head(n - 1)) / sup_abs(want) < 1e-12);
}

TEST_CASE("newton converges quadratically from a perturbed guess") {
  const ChoquardSolution& s = ground_state(kM, 500);
  const PerturbedState b = base_state(s);
  const PerturbedState guess = b.with_stacked(b.stacked() + 1e-2 * bump(s.grid(), 1.0, 1.0, 1.0));
  const NewtonResult res = newton_correct(0.0, guess, b, SolverConfig{});
  REQUIRE(res.history.size() >= 3);
  for (size_t k = 0; k + 1 < res.history.size(); ++k) {
    if (res.history[k + 1] < 1e-11) break;
    CHECK(res.history[k + 1] / (res.history[k] * res.history[k]) < 1e3);
  }
  CHECK(res.iterations <= 8);
}

TEST_CASE("positivity failure is reported, not clamped") {
  const ChoquardSolution& s = ground_state(kM, 500);
  SolverConfig cfg;
  cfg.delta_A = 0.999;
  const PerturbedState b = base_state(s);
  bool reported = false;
  try {
    newton_correct(0.2 * kM, b.with_eps(0.2 * kM), b, cfg);
  } catch (const NewtonError& e) {
    reported = e.reason == NewtonFailure::positivity;
  } catch (const PositivityError&) {
    reported = true;
  }
  CHECK(reported);
  CHECK_THROWS_AS(metric_A(b.with_eps(0.2 * kM), 0.999), PositivityError);
}

TEST_CASE("branch from the ground state") {
  const Branch& br = coarse_branch();
  CHECK((br.stop_reason == "eps_max" || br.stop_reason == "positivity wall"));
  CHECK(br.points.front().eps == 0.0);
  CHECK(br.points.size() >= 20);
  CHECK(br.base_polish_shift < 1e-6);
  for (const auto& p : br.points) {
    CHECK(p.newton_iters <= 8);
    for (double v : p.residual_norms) CHECK(v < 1e-8);
    CHECK(p.diag.condQ_margin > 0.0);
    CHECK(p.diag.min_A >= 0.05);
    CHECK(p.diag.adm_relative_gap < 5e-3);
  }
  CHECK(departure_slope(br).slope >= 0.9);

  // norm_integral ~ sqrt(eps) int phi0^2 for small eps.
  const BranchPoint& p1 = br.points[1];
  const double lead = std::sqrt(p1.eps) * integrate(ground_state(kM, 500).grid(),
                                                   ground_state(kM, 500).phi0.values().cwiseAbs2(),
                                                   OriginClass::vanishes_like_r2);
  CHECK(p1.physical.norm_integral / lead == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("unrescale and physical residual") {
  // phi(x) = x at eps = 0.25: Phi1(r) = 0.5 * (0.5 r).
  const GridPtr g = RadialGrid::build(64, 1.0);
  PerturbedState st = zero_state(g, 1.0, 0.25);
  st.phi = st.phi.with_values(g->nodes());
  const PhysicalSolution ps = unrescale(st);
  CHECK(sup_abs(ps.Phi1 - 0.25 * ps.grid->nodes()) < 1e-14);

  const ChoquardSolution& s = ground_state(kM, 500);
  const PhysicalSolution vac = unrescale(base_state(s));
  const PhysicalResidual pr = physical_residual(vac, kM);
  for (double v : pr.norms) CHECK(v == 0.0);
  const Diagnostics dg = diagnostics(vac);
  CHECK(dg.condQ_margin == doctest::Approx(1.0 / (16.0 * kPi * kM)));
  CHECK(dg.norm_integral == 0.0);
  CHECK(dg.adm_from_metric == 0.0);

  // Scaling Phi1 while A stays fixed violates the third equation
  // quadratically in the scale factor.
  PhysicalSolution hot = coarse_branch().points.back().physical;
  const Vector p1 = hot.Phi1;
  hot.Phi1 = 10.0 * p1;
  const double r10 = physical_residual(hot, kM).norms[2];
  hot.Phi1 = 20.0 * p1;
  const double r20 = physical_residual(hot, kM).norms[2];
  CHECK(r20 / r10 == doctest::Approx(399.0 / 99.0).epsilon(1e-3));
}

TEST_CASE("normalized solution") {
  CHECK_THROWS_AS(normalized_solution(0.01, 0.0, SolverConfig{}), ParameterError);
  const NormalizedSolution ns = normalized_solution(0.01, 1.0 / (4.0 * kPi), SolverConfig{}, 500);
  CHECK(std::abs(ns.solution.norm_integral - 1.0 / (4.0 * kPi)) < 1e-6);
  CHECK(ns.solution.eps == doctest::Approx(0.01 * ns.m));
  // norm_integral falls with m at fixed eps / m.
  auto table = ns.table;
  std::sort(table.begin(), table.end());
  for (size_t i = 1; i < table.size(); ++i) CHECK(table[i].second < table[i - 1].second);
}

}
