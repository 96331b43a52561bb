#include "edsolve/radial_core.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace edsolve {

std::string to_string(OriginClass c) {
  switch (c) {
    case OriginClass::vanishes_like_r: return "vanishes_like_r";
    case OriginClass::vanishes_like_r2: return "vanishes_like_r2";
    case OriginClass::finite_limit: return "finite_limit";
  }
  return "?";
}

std::string to_string(TailClass c) {
  switch (c) {
    case TailClass::exponential: return "exponential";
    case TailClass::inverse_r: return "inverse_r";
    case TailClass::zero: return "zero";
  }
  return "?";
}

namespace {

// Fornberg's recursion: c(k, d) is the weight of x[k] in the d-th derivative
// at z.
Matrix fornberg_weights(double z, const std::vector<double>& x, int max_order) {
  const int n = static_cast<int>(x.size());
  Matrix c = Matrix::Zero(n, max_order + 1);
  double c1 = 1.0;
  double c4 = x[0] - z;
  c(0, 0) = 1.0;
  for (int i = 1; i < n; ++i) {
    const int mn = std::min(i, max_order);
    double c2 = 1.0;
    const double c5 = c4;
    c4 = x[i] - z;
    for (int j = 0; j < i; ++j) {
      const double c3 = x[i] - x[j];
      c2 *= c3;
      if (j == i - 1) {
        for (int k = mn; k >= 1; --k) c(i, k) = c1 * (k * c(i - 1, k - 1) - c5 * c(i - 1, k)) / c2;
        c(i, 0) = -c1 * c5 * c(i - 1, 0) / c2;
      }
      for (int k = mn; k >= 1; --k) c(j, k) = (c4 * c(j, k) - k * c(j, k - 1)) / c3;
      c(j, 0) = c4 * c(j, 0) / c3;
    }
    c1 = c2;
  }
  return c;
}

// Stencils run over an extended node set: mirror images -r_j carry the
// parity of the field (odd for vanishes_like_r, even otherwise), r = 0 is a
// node with value 0 for vanishing fields, and nodes beyond r_max continue the
// grading with values f_N r_max / r (inverse_r) or 0 (zero). Exponential
// tails get no outer nodes; their stencils shift inward near r_max.
// Each extended node is a multiple of one interior value.
struct ExtendedNode {
  double r;
  int col;  // -1: identically zero
  double factor;
};

std::vector<ExtendedNode> extended_nodes(const Vector& r, double p, OriginClass origin, TailClass tail, int pad,
                                         double decay_rate = 0.0) {
  const int n = static_cast<int>(r.size());
  const double r_max = r[n - 1];
  std::vector<ExtendedNode> ext;
  const double parity = origin == OriginClass::vanishes_like_r ? -1.0 : 1.0;
  for (int j = pad; j >= 1; --j) ext.push_back({-r[j - 1], j - 1, parity});
  if (vanishes_at_origin(origin)) ext.push_back({0.0, -1, 0.0});
  for (int i = 0; i < n; ++i) ext.push_back({r[i], i, 1.0});
  if (tail == TailClass::exponential && !(decay_rate > 0.0)) return ext;
  for (int k = 1; k <= pad; ++k) {
    const double rk = r_max * std::pow(static_cast<double>(n + k) / n, p);
    if (tail == TailClass::inverse_r)
      ext.push_back({rk, n - 1, r_max / rk});
    else if (tail == TailClass::exponential)
      ext.push_back({rk, n - 1, std::exp(-decay_rate * (rk - r_max))});
    else
      ext.push_back({rk, -1, 0.0});
  }
  return ext;
}

SparseMatrix build_derivative(const Vector& r, double p, OriginClass origin, TailClass tail, int order,
                              Stencil stencil, double decay_rate = 0.0) {
  const int n = static_cast<int>(r.size());
  const int width = RadialGrid::kStencilWidth;
  const int pad = width - 1;
  const std::vector<ExtendedNode> ext = extended_nodes(r, p, origin, tail, pad, decay_rate);
  const int first = pad + (vanishes_at_origin(origin) ? 1 : 0);

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(n) * width);
  std::vector<double> x(width);
  for (int i = 0; i < n; ++i) {
    const int e = first + i;
    int start = e - width / 2;
    if (stencil == Stencil::upwind) start = e;
    if (stencil == Stencil::outward_biased) start = e - width / 2 + 1;
    if (stencil == Stencil::inward_biased) start = e - width / 2 - 1;
    start = std::min(start, static_cast<int>(ext.size()) - width);
    for (int k = 0; k < width; ++k) x[k] = ext[start + k].r;
    const Matrix c = fornberg_weights(ext[e].r, x, order);
    for (int k = 0; k < width; ++k) {
      const ExtendedNode& node = ext[start + k];
      if (node.col >= 0) trip.emplace_back(i, node.col, node.factor * c(k, order));
    }
  }
  SparseMatrix d(n, n);
  d.setFromTriplets(trip.begin(), trip.end());
  d.makeCompressed();
  return d;
}

// Weights of each row's stencil on the ghost nodes beyond r_max, before any
// tail continuation is folded in.
SparseMatrix build_outer_weights(const Vector& r, double p, OriginClass origin, int order, Stencil stencil,
                                 Vector& radii) {
  const int n = static_cast<int>(r.size());
  const int width = RadialGrid::kStencilWidth;
  const int pad = width - 1;
  const std::vector<ExtendedNode> ext = extended_nodes(r, p, origin, TailClass::zero, pad);
  const int first = pad + (vanishes_at_origin(origin) ? 1 : 0);
  const int outer0 = first + n;
  radii.resize(pad);
  for (int k = 0; k < pad; ++k) radii[k] = ext[outer0 + k].r;

  std::vector<Eigen::Triplet<double>> trip;
  std::vector<double> x(width);
  for (int i = 0; i < n; ++i) {
    const int e = first + i;
    int start = e - width / 2;
    if (stencil == Stencil::upwind) start = e;
    if (stencil == Stencil::outward_biased) start = e - width / 2 + 1;
    if (stencil == Stencil::inward_biased) start = e - width / 2 - 1;
    start = std::min(start, static_cast<int>(ext.size()) - width);
    if (start + width <= outer0) continue;
    for (int k = 0; k < width; ++k) x[k] = ext[start + k].r;
    const Matrix c = fornberg_weights(ext[e].r, x, order);
    for (int k = 0; k < width; ++k)
      if (start + k >= outer0) trip.emplace_back(i, start + k - outer0, c(k, order));
  }
  SparseMatrix w(n, pad);
  w.setFromTriplets(trip.begin(), trip.end());
  w.makeCompressed();
  return w;
}

// Piecewise-cubic cumulative rule in the uniform coordinate x = (r/r_max)^{1/p}.
SparseMatrix build_segments(int n, double r_max, double p, bool ghost) {
  const double h = 1.0 / n;
  auto dr_dx = [&](int j) { return p * r_max * std::pow(static_cast<double>(j) * h, p - 1.0); };
  // Ghost node j = 0 contributes only when dr/dx does not vanish there (p = 1).
  const double jac0 = (p == 1.0) ? r_max : 0.0;

  std::vector<Eigen::Triplet<double>> trip;
  trip.reserve(static_cast<size_t>(n) * 4 + 8);
  // g_j = f_j * dr/dx(x_j); column j-1 holds node j.
  auto add = [&](int seg, int node, double coeff) {
    if (node == 0) {
      if (jac0 == 0.0 || ghost) return;
      // Cubic extrapolation f(0) = 4 f1 - 6 f2 + 4 f3 - f4.
      const double ex[4] = {4.0, -6.0, 4.0, -1.0};
      for (int k = 0; k < 4; ++k) trip.emplace_back(seg, k, coeff * jac0 * ex[k] * h / 24.0);
      return;
    }
    trip.emplace_back(seg, node - 1, coeff * dr_dx(node) * h / 24.0);
  };
  for (int j = 1; j <= n; ++j) {
    const int seg = j - 1;
    if (j == 1) {
      add(seg, 0, 9.0); add(seg, 1, 19.0); add(seg, 2, -5.0); add(seg, 3, 1.0);
    } else if (j == n) {
      add(seg, n - 3, 1.0); add(seg, n - 2, -5.0); add(seg, n - 1, 19.0); add(seg, n, 9.0);
    } else {
      add(seg, j - 2, -1.0); add(seg, j - 1, 13.0); add(seg, j, 13.0); add(seg, j + 1, -1.0);
    }
  }
  SparseMatrix s(n, n);
  s.setFromTriplets(trip.begin(), trip.end());
  return s;
}

Vector column_sums(const SparseMatrix& s) {
  Vector w = Vector::Zero(s.cols());
  for (int k = 0; k < s.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(s, k); it; ++it) w[it.col()] += it.value();
  return w;
}

}  // namespace

Vector RadialGrid::node_positions(int n_nodes, double r_max, double grading_exponent) {
  if (n_nodes < 1) throw ParameterError("node_positions needs at least one node");
  if (!(r_max > 0.0) || !std::isfinite(r_max)) throw ParameterError("grid r_max must be positive and finite");
  if (!(grading_exponent >= 1.0) || !std::isfinite(grading_exponent))
    throw ParameterError("grading exponent must be >= 1");
  Vector r(n_nodes);
  for (int j = 1; j <= n_nodes; ++j) r[j - 1] = r_max * std::pow(static_cast<double>(j) / n_nodes, grading_exponent);
  r[n_nodes - 1] = r_max;
  return r;
}

std::shared_ptr<const RadialGrid> RadialGrid::build(int n_nodes, double r_max, double grading_exponent) {
  if (n_nodes < 16) throw ParameterError("grid needs at least 16 nodes, got " + std::to_string(n_nodes));
  if (!(r_max > 0.0) || !std::isfinite(r_max)) throw ParameterError("grid r_max must be positive and finite");
  if (!(grading_exponent >= 1.0) || !std::isfinite(grading_exponent))
    throw ParameterError("grading exponent must be >= 1");

  std::shared_ptr<RadialGrid> g(new RadialGrid());
  g->r_max_ = r_max;
  g->grading_ = grading_exponent;
  g->nodes_ = node_positions(n_nodes, r_max, grading_exponent);

  g->segment_finite_ = build_segments(n_nodes, r_max, grading_exponent, false);
  g->segment_ghost_ = build_segments(n_nodes, r_max, grading_exponent, true);
  g->weights_finite_ = column_sums(g->segment_finite_);
  g->weights_ghost_ = column_sums(g->segment_ghost_);

  for (int o = 0; o < 3; ++o)
    for (int t = 0; t < 2; ++t)
      for (int order = 1; order <= 2; ++order)
        for (int s = 0; s < kStencilKinds; ++s)
          g->derivatives_[derivative_slot(o, t, order, s)] =
              build_derivative(g->nodes_, grading_exponent, static_cast<OriginClass>(o),
                               t == 0 ? TailClass::exponential : TailClass::inverse_r, order, static_cast<Stencil>(s));
  return g;
}

const Vector& RadialGrid::weights(OriginClass integrand) const {
  return vanishes_at_origin(integrand) ? weights_ghost_ : weights_finite_;
}

const SparseMatrix& RadialGrid::segment_matrix(OriginClass integrand) const {
  return vanishes_at_origin(integrand) ? segment_ghost_ : segment_finite_;
}

SparseMatrix RadialGrid::decaying_derivative_matrix(OriginClass field, double decay_rate, int order,
                                                 Stencil stencil) const {
  if (order != 1 && order != 2) throw ParameterError("derivative order must be 1 or 2");
  if (!(decay_rate > 0.0)) throw ParameterError("decay rate must be positive");
  return build_derivative(nodes_, grading_, field, TailClass::exponential, order, stencil, decay_rate);
}

OuterGhosts RadialGrid::outer_ghosts(OriginClass field, int order, Stencil stencil) const {
  if (order != 1 && order != 2) throw ParameterError("outer_ghosts: order must be 1 or 2");
  OuterGhosts out;
  out.weights = build_outer_weights(nodes_, grading_, field, order, stencil, out.radii);
  return out;
}

int RadialGrid::derivative_slot(int origin, int tail, int order, int stencil) {
  return ((origin * 2 + tail) * 2 + (order - 1)) * kStencilKinds + stencil;
}

const SparseMatrix& RadialGrid::derivative_matrix(OriginClass field, TailClass tail, int order,
                                                  Stencil stencil) const {
  if (order != 1 && order != 2) throw ParameterError("derivative order must be 1 or 2");
  const int t = tail == TailClass::inverse_r ? 1 : 0;
  return derivatives_[derivative_slot(static_cast<int>(field), t, order, static_cast<int>(stencil))];
}

// ---------------------------------------------------------------------------

RadialField::RadialField(GridPtr grid, Vector values, OriginClass origin, TailClass tail,
                         std::optional<double> slope_bound)
    : grid_(std::move(grid)), values_(std::move(values)), origin_(origin), tail_(tail) {
  if (!grid_) throw ParameterError("radial field without grid");
  if (values_.size() != grid_->size()) throw ParameterError("radial field size does not match its grid");
  if (!values_.allFinite()) throw ParameterError("radial field has non-finite values");
  if (slope_bound && origin_ == OriginClass::vanishes_like_r) {
    if (std::abs(values_[0]) / grid_->node(0) > *slope_bound)
      throw ParameterError("radial field violates its declared origin slope bound");
  }
}

RadialField RadialField::zeros(GridPtr grid, OriginClass origin, TailClass tail) {
  const int n = grid->size();
  return RadialField(std::move(grid), Vector::Zero(n), origin, tail);
}

RadialField RadialField::with_values(Vector values) const {
  return RadialField(grid_, std::move(values), origin_, tail_);
}

double RadialField::evaluate(double r) const {
  const Vector& x = grid_->nodes();
  const int n = size();
  if (r > x[n - 1]) {
    const double fR = values_[n - 1];
    switch (tail_) {
      case TailClass::zero: return 0.0;
      case TailClass::inverse_r: return fR * x[n - 1] / r;
      case TailClass::exponential: {
        const double a = values_[n - 2];
        if (fR == 0.0 || a == 0.0 || (a > 0) != (fR > 0) || std::abs(a) <= std::abs(fR)) return 0.0;
        const double kappa = std::log(a / fR) / (x[n - 1] - x[n - 2]);
        return fR * std::exp(-kappa * (r - x[n - 1]));
      }
    }
  }
  if (r <= 0.0) {
    if (vanishes_at_origin(origin_)) return 0.0;
    r = 0.0;
  }

  // Knots: optional origin knot followed by the grid nodes.
  auto knot = [&](int k, double& xk, double& yk) {
    if (k < 0) {
      xk = 0.0;
      if (vanishes_at_origin(origin_)) {
        yk = 0.0;
      } else {
        // Quadratic extrapolation to r = 0.
        const double x0 = x[0], x1 = x[1], x2 = x[2];
        const double l0 = (x1 * x2) / ((x0 - x1) * (x0 - x2));
        const double l1 = (x0 * x2) / ((x1 - x0) * (x1 - x2));
        const double l2 = (x0 * x1) / ((x2 - x0) * (x2 - x1));
        yk = l0 * values_[0] + l1 * values_[1] + l2 * values_[2];
      }
    } else {
      xk = x[k];
      yk = values_[k];
    }
  };
  // Interval [k, k+1] in knot indexing where k = -1 is the origin knot.
  int k = static_cast<int>(std::upper_bound(x.data(), x.data() + n, r) - x.data()) - 1;
  if (k >= n - 1) k = n - 2;
  const int lo = -1, hi = n - 1;

  auto slope = [&](int a) {
    double xa, ya, xb, yb;
    knot(a, xa, ya);
    knot(a + 1, xb, yb);
    return (yb - ya) / (xb - xa);
  };
  auto width = [&](int a) {
    double xa, ya, xb, yb;
    knot(a, xa, ya);
    knot(a + 1, xb, yb);
    return xb - xa;
  };
  auto deriv = [&](int j) {
    if (j == lo || j == hi) {
      // One-sided three-point end slope with the usual monotonicity guards.
      const int a = (j == lo) ? lo : hi - 1;
      const int b = (j == lo) ? lo + 1 : hi - 2;
      const double h0 = width(a), h1 = width(b);
      const double d0 = slope(a), d1 = slope(b);
      double d = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
      if ((d > 0) != (d0 > 0)) d = 0.0;
      else if ((d0 > 0) != (d1 > 0) && std::abs(d) > std::abs(3.0 * d0)) d = 3.0 * d0;
      return d;
    }
    const double dm = slope(j - 1), dp = slope(j);
    if (dm == 0.0 || dp == 0.0 || (dm > 0) != (dp > 0)) return 0.0;
    const double hm = width(j - 1), hp = width(j);
    const double w1 = 2.0 * hp + hm, w2 = hp + 2.0 * hm;
    return (w1 + w2) / (w1 / dm + w2 / dp);
  };

  double xa, ya, xb, yb;
  knot(k, xa, ya);
  knot(k + 1, xb, yb);
  const double hk = xb - xa;
  const double t = (r - xa) / hk;
  const double da = deriv(k), db = deriv(k + 1);
  const double h00 = (1 + 2 * t) * (1 - t) * (1 - t);
  const double h10 = t * (1 - t) * (1 - t);
  const double h01 = t * t * (3 - 2 * t);
  const double h11 = t * t * (t - 1);
  return h00 * ya + h10 * hk * da + h01 * yb + h11 * hk * db;
}

// ---------------------------------------------------------------------------

double integrate(const RadialGrid& grid, const Vector& f, OriginClass origin) {
  return grid.weights(origin).dot(f);
}

double integrate(const RadialField& f) { return integrate(f.grid(), f.values(), f.origin_class()); }

Vector prefix_integral(const RadialGrid& grid, const Vector& f, OriginClass origin) {
  const Vector seg = grid.segment_matrix(origin) * f;
  Vector g(seg.size());
  double acc = 0.0;
  for (int i = 0; i < seg.size(); ++i) {
    acc += seg[i];
    g[i] = acc;
  }
  return g;
}

Vector suffix_integral(const RadialGrid& grid, const Vector& f, OriginClass origin) {
  const Vector seg = grid.segment_matrix(origin) * f;
  const int n = static_cast<int>(seg.size());
  Vector g(n);
  double acc = 0.0;
  for (int i = n - 1; i >= 0; --i) {
    g[i] = acc;
    acc += seg[i];
  }
  return g;
}

RadialField integrate_prefix(const RadialField& f) {
  const OriginClass out =
      f.origin_class() == OriginClass::finite_limit ? OriginClass::vanishes_like_r : OriginClass::vanishes_like_r2;
  return RadialField(f.grid_ptr(), prefix_integral(f.grid(), f.values(), f.origin_class()), out, f.tail_class());
}

RadialField newtonian_kernel(const RadialField& f) {
  if (f.tail_class() == TailClass::inverse_r)
    throw ParameterError("newtonian_kernel: inverse_r tails make the outer integral truncation dominated");
  if (f.origin_class() == OriginClass::finite_limit)
    throw ParameterError("newtonian_kernel: integrand must vanish at the origin");
  const RadialGrid& g = f.grid();
  const Vector& r = g.nodes();
  const OriginClass over_s =
      f.origin_class() == OriginClass::vanishes_like_r2 ? OriginClass::vanishes_like_r : OriginClass::finite_limit;
  const Vector inner = prefix_integral(g, f.values(), f.origin_class());
  const Vector outer = suffix_integral(g, f.values().cwiseQuotient(r), over_s);
  Vector k = inner.cwiseQuotient(r) + outer;
  return RadialField(f.grid_ptr(), std::move(k), OriginClass::finite_limit, TailClass::inverse_r);
}

RadialField differentiate(const RadialField& f) {
  Vector d = f.grid().derivative_matrix(f.origin_class(), f.tail_class(), 1) * f.values();
  // parity flips under differentiation
  const OriginClass out = f.origin_class() == OriginClass::vanishes_like_r ? OriginClass::finite_limit
                                                                           : OriginClass::vanishes_like_r;
  return RadialField(f.grid_ptr(), std::move(d), out, f.tail_class());
}

// ---------------------------------------------------------------------------

namespace {

void require_profile(const RadialField& rho, const char* what) {
  if (rho.origin_class() == OriginClass::finite_limit) {
    const double scale = rho.values().cwiseAbs().maxCoeff();
    if (std::abs(rho[0]) > 1e-8 * std::max(scale, 1e-300))
      throw ParameterError(std::string(what) + ": profile with nonzero limit at the origin");
  }
}

}  // namespace

double h1_profile_norm(const RadialField& rho) {
  require_profile(rho, "h1_profile_norm");
  const RadialGrid& g = rho.grid();
  const Vector& r = g.nodes();
  const Vector u = rho.values().cwiseQuotient(r);
  const Vector du = g.derivative_matrix(OriginClass::finite_limit, TailClass::exponential, 1) * u;
  const Vector integrand = (u.array().square() + du.array().square()).matrix().cwiseProduct(r.cwiseProduct(r));
  return std::sqrt(4.0 * kPi * integrate(g, integrand, OriginClass::vanishes_like_r2));
}

double tau_norm(const RadialField& tau) {
  const RadialGrid& g = tau.grid();
  const Vector dt = g.derivative_matrix(tau.origin_class(), tau.tail_class(), 1) * tau.values();
  double total = integrate(g, dt.cwiseAbs(), OriginClass::finite_limit);
  if (tau.tail_class() == TailClass::inverse_r) total += std::abs(tau[tau.size() - 1]);
  return total;
}

double hardy_ratio(const RadialField& rho) {
  require_profile(rho, "hardy_ratio");
  const RadialGrid& g = rho.grid();
  const Vector& r = g.nodes();
  const Vector u = rho.values().cwiseQuotient(r);
  const Vector du = g.derivative_matrix(OriginClass::finite_limit, TailClass::exponential, 1) * u;
  const double lhs = integrate(g, u.cwiseProduct(u), OriginClass::finite_limit);
  const double rhs = integrate(g, du.cwiseProduct(du).cwiseProduct(r).cwiseProduct(r), OriginClass::vanishes_like_r2);
  if (rhs == 0.0) return lhs == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return lhs / rhs;
}

NormReport norms(const RadialField& phi, const RadialField& chi, const RadialField& tau) {
  if (&phi.grid() != &chi.grid() || &phi.grid() != &tau.grid())
    throw ParameterError("norms: fields live on different grids");
  NormReport rep;
  rep.x_phi = h1_profile_norm(phi);
  rep.x_chi = h1_profile_norm(chi);
  rep.x_tau = tau_norm(tau);
  rep.hardy_ratio = hardy_ratio(phi);
  rep.sup_tau = tau.values().cwiseAbs().maxCoeff();
  return rep;
}

PointwiseBound pointwise_bound_check(const RadialField& rho, double tolerance) {
  const RadialGrid& g = rho.grid();
  const Vector& r = g.nodes();
  const Vector u = rho.values().cwiseQuotient(r);
  const Vector du = g.derivative_matrix(OriginClass::finite_limit, TailClass::exponential, 1) * u;
  const double dnorm =
      std::sqrt(integrate(g, du.cwiseProduct(du).cwiseProduct(r).cwiseProduct(r), OriginClass::vanishes_like_r2));
  PointwiseBound out;
  const double umax = u.cwiseAbs().maxCoeff();
  if (umax == 0.0) return out;
  if (dnorm <= 1e-8 * umax * std::sqrt(g.r_max())) {
    out.degenerate = true;
    return out;
  }
  for (int i = 0; i < g.size(); ++i)
    out.worst_ratio = std::max(out.worst_ratio, std::abs(rho[i]) / (std::sqrt(r[i]) * dnorm));
  out.pass = out.worst_ratio <= 1.0 + tolerance;
  return out;
}

}  // namespace edsolve
