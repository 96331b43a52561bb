#include "edsolve/choquard.hpp"
#include "fixtures.hpp"
#include "shooting_oracle.hpp"

#include <doctest.h>

#include <cmath>

using namespace edsolve;
using edsolve::testing::ground_state;
using edsolve::testing::sup_abs;

TEST_SUITE("choquard") {

TEST_CASE("ground state converges, is positive and decreasing") {
  const ChoquardSolution& s = ground_state(0.5, 1000);
  CHECK(s.residual_norm < 1e-10);
  CHECK(choquard_residual(s.phi0, 0.5) < 1e-10);
  CHECK(s.mass_integral > 0.0);
  const Vector u = s.u0().values();
  for (int i = 0; i < u.size(); ++i) CHECK(u[i] > 0.0);
  for (int i = 1; i < u.size(); ++i) CHECK(u[i] <= u[i - 1]);
}

TEST_CASE("collocation agrees with the shooting oracle") {
  const ChoquardSolution& s = ground_state(0.5, 1000);
  const edsolve::testing::ShootingOracle oracle(0.5);
  const Vector u = s.u0().values();
  double err = 0.0;
  for (int i = 0; i < u.size(); ++i) err = std::max(err, std::abs(u[i] - oracle.u0(s.grid().node(i))));
  CHECK(err < 1e-6);
}

TEST_CASE("scaling law in m") {
  // sqrt(m) u0_m(y / sqrt(2m)) does not depend on m; at m = 2 against
  // m = 1/2 this reads u0_2(x) = u0_half(2 x) / 2.
  const ChoquardSolution& half = ground_state(0.5, 1000);
  const ChoquardSolution& two = ground_state(2.0, 1000);
  const RadialField v0 = half.u0();
  const Vector u2 = two.u0().values();
  double worst = 0.0;
  for (int i = 0; i < u2.size(); ++i) {
    const double x = two.grid().node(i);
    const double want = v0.evaluate(2.0 * x) / 2.0;
    worst = std::max(worst, std::abs(u2[i] - want) / sup_abs(u2));
  }
  CHECK(worst < 1e-6);
}

TEST_CASE("derive_chi examples") {
  const ChoquardSolution& s = ground_state(0.5, 1000);
  CHECK(sup_abs(derive_chi(s.phi0, 0.5).values() - derive_chi_from_quotient(s.phi0, 0.5).values()) < 1e-12);
  CHECK(sup_abs(derive_chi(s.phi0, 0.5).values() - s.chi0.values()) < 1e-12);

  // phi = r exp(-r^2), m = 1 -> chi = r^2 exp(-r^2).
  const GridPtr g = RadialGrid::build(1000, 10.0);
  const RadialField phi(g, sample(*g, [](double r) { return r * std::exp(-r * r); }), OriginClass::vanishes_like_r,
                        TailClass::exponential);
  const RadialField chi = derive_chi(phi, 1.0);
  CHECK(chi.origin_class() == OriginClass::vanishes_like_r2);
  CHECK(sup_abs(chi.values() - sample(*g, [](double r) { return r * r * std::exp(-r * r); })) < 1e-8);
}

TEST_CASE("derive_tau examples") {
  const ChoquardSolution& s = ground_state(0.5, 1000);
  const GridPtr g = s.grid_ptr();
  CHECK(sup_abs(derive_tau(RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential), 0.5).values()) ==
        0.0);
  // tau(0+) = 8 pi m int phi^2 / s.
  const Vector q = s.phi0.values().cwiseAbs2().cwiseQuotient(g->nodes());
  const double want = 8.0 * kPi * 0.5 * integrate(*g, q, OriginClass::vanishes_like_r);
  CHECK(std::abs(s.tau0.evaluate(0.0) - want) / want < 1e-6);

  // phi^2 = s^2 on (0, 1], m = 1 -> tau = 8 pi / (3 r) for r >= 1.
  const GridPtr b = RadialGrid::build(2000, 1.0);
  const RadialField tau = derive_tau(RadialField(b, b->nodes(), OriginClass::vanishes_like_r, TailClass::zero), 1.0);
  for (double r : {1.0, 2.0, 5.0}) CHECK(std::abs(tau.evaluate(r) * 3.0 * r / (8.0 * kPi) - 1.0) < 1e-8);
}

TEST_CASE("choquard residual examples") {
  const ChoquardSolution& s = ground_state(0.5, 1000);
  CHECK(choquard_residual(RadialField::zeros(s.grid_ptr(), OriginClass::vanishes_like_r, TailClass::exponential), 0.5) ==
        0.0);
  CHECK(choquard_residual(s.phi0.with_values(2.0 * s.phi0.values()), 0.5) > 1.0);
}

TEST_CASE("config validation") {
  ChoquardConfig c;
  c.scf_mixing = 0.0;
  CHECK_THROWS_AS(c.validate(), ParameterError);
  CHECK_THROWS_AS(default_r_max(-1.0), ParameterError);
}

}
