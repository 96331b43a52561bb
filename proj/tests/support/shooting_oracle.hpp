#pragma once

// Test-only oracle for the Choquard ground state. It never touches the
// collocation machinery: the nonlocal equation is rewritten as the local
// Schroedinger-Newton ODE pair
//
//   u'' + 2u'/r = -P u,     P'' + 2P'/r = -4 pi a u^2,   a = 4 m^3,
//
// with P = a (|x|^{-1} * u^2) - 2m. We shoot from the origin with u(0) = 1,
// bisect on P(0) for the decaying solution, read off P(inf) from the
// Coulomb tail and use the exact scaling u -> s^2 u(s r), P -> s^2 P(s r)
// to enforce P(inf) = -2m.

#include <cmath>
#include <vector>

namespace edsolve::testing {

class ShootingOracle {
 public:
  explicit ShootingOracle(double m, double step = 5e-4) : m_(m), a_(4.0 * m * m * m), h_(step) { solve(); }

  /// u0 at radius r (physical units of mass m); zero beyond the trusted range.
  double u0(double r) const {
    const double x = scale_ * r;
    if (x >= r_cut_) return 0.0;
    return scale_ * scale_ * interp(x);
  }
  /// Radius beyond which the oracle reports zero.
  double trusted_radius() const { return r_cut_ / scale_; }
  double shooting_parameter() const { return p0_; }

 private:
  struct State {
    double u, du, p, dp;
  };

  State rhs(double r, const State& s) const {
    return {s.du, -2.0 * s.du / r - s.p * s.u, s.dp, -2.0 * s.dp / r - 4.0 * M_PI * a_ * s.u * s.u};
  }

  static State axpy(const State& s, double t, const State& k) {
    return {s.u + t * k.u, s.du + t * k.du, s.p + t * k.p, s.dp + t * k.dp};
  }

  State rk4(double r, const State& s) const {
    const State k1 = rhs(r, s);
    const State k2 = rhs(r + h_ / 2, axpy(s, h_ / 2, k1));
    const State k3 = rhs(r + h_ / 2, axpy(s, h_ / 2, k2));
    const State k4 = rhs(r + h_, axpy(s, h_, k3));
    return {s.u + h_ / 6 * (k1.u + 2 * k2.u + 2 * k3.u + k4.u), s.du + h_ / 6 * (k1.du + 2 * k2.du + 2 * k3.du + k4.du),
            s.p + h_ / 6 * (k1.p + 2 * k2.p + 2 * k3.p + k4.p), s.dp + h_ / 6 * (k1.dp + 2 * k2.dp + 2 * k3.dp + k4.dp)};
  }

  State start(double p0) const {
    const double r = r0();
    return {1.0 - p0 * r * r / 6.0, -p0 * r / 3.0, p0 - 4.0 * M_PI * a_ * r * r / 6.0, -4.0 * M_PI * a_ * r / 3.0};
  }
  double r0() const { return h_; }

  // +1: overshoot (u crosses zero), -1: undershoot (u turns up), 0: neither.
  int classify(double p0, std::vector<State>* path) const {
    State s = start(p0);
    double r = r0();
    if (path) {
      path->clear();
      path->push_back(s);
    }
    const double r_end = 60.0;
    while (r < r_end) {
      s = rk4(r, s);
      r += h_;
      if (path) path->push_back(s);
      if (s.u < 0.0) return +1;
      if (s.du > 0.0) return -1;
    }
    return 0;
  }

  void solve() {
    double lo = 0.0, hi = 1.0;
    while (classify(hi, nullptr) < 0) hi *= 2.0;
    for (int k = 0; k < 200; ++k) {
      const double mid = 0.5 * (lo + hi);
      if (mid == lo || mid == hi) break;
      (classify(mid, nullptr) > 0 ? hi : lo) = mid;
    }
    p0_ = lo;
    classify(p0_, &path_);
    // Trust the trajectory while u is monotonically decaying and not yet
    // dominated by the growing mode.
    std::size_t cut = 1;
    while (cut + 1 < path_.size() && path_[cut].u > 1e-7 && path_[cut].du < 0.0) ++cut;
    r_cut_ = r0() + h_ * static_cast<double>(cut);
    const State& c = path_[cut];
    const double p_inf = c.p + r_cut_ * c.dp;
    const double energy = -p_inf;
    scale_ = std::sqrt(2.0 * m_ / energy);
  }

  double interp(double x) const {
    double t = (x - r0()) / h_;
    if (t < 0.0) t = 0.0;
    std::size_t k = static_cast<std::size_t>(t);
    if (k + 1 >= path_.size()) k = path_.size() - 2;
    const double s = t - static_cast<double>(k);
    const State& a = path_[k];
    const State& b = path_[k + 1];
    const double h00 = (1 + 2 * s) * (1 - s) * (1 - s), h10 = s * (1 - s) * (1 - s);
    const double h01 = s * s * (3 - 2 * s), h11 = s * s * (s - 1);
    if (x < r0()) return 1.0 - p0_ * x * x / 6.0;
    return h00 * a.u + h10 * h_ * a.du + h01 * b.u + h11 * h_ * b.du;
  }

  double m_, a_, h_;
  double p0_ = 0.0;
  double r_cut_ = 0.0;
  double scale_ = 1.0;
  std::vector<State> path_;
};

}  // namespace edsolve::testing
