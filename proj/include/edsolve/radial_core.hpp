#pragma once

// Radial discretization substrate: graded grids on (0, r_max], cumulative
// quadrature, finite-difference differentiation, the Newtonian radial kernel
// and the function-space norms used by the solvers.

#include <Eigen/Dense>
#include <Eigen/Sparse>

#include <array>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace edsolve {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using SparseMatrix = Eigen::SparseMatrix<double>;

inline constexpr double kPi = 3.14159265358979323846;

/// Invalid sizes, values or combinations of inputs.
class ParameterError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// An iterative solve did not reach its tolerance. Carries the last iterate
/// (possibly empty) and the last residual norm.
class ConvergenceError : public std::runtime_error {
 public:
  ConvergenceError(const std::string& what, Vector last_iterate = {}, double last_residual = 0.0)
      : std::runtime_error(what), iterate(std::move(last_iterate)), residual(last_residual) {}
  Vector iterate;
  double residual;
};

/// Behaviour of a radial profile as r -> 0.
enum class OriginClass { vanishes_like_r, vanishes_like_r2, finite_limit };

/// Behaviour of a radial profile beyond the truncation radius.
enum class TailClass { exponential, inverse_r, zero };

std::string to_string(OriginClass c);
std::string to_string(TailClass c);

inline bool vanishes_at_origin(OriginClass c) { return c != OriginClass::finite_limit; }

/// Stencil placement for derivative matrices: centered, one-sided toward
/// r_max, or shifted by one node toward r_max (outward) or the origin (inward).
enum class Stencil { centered, upwind, outward_biased, inward_biased };

/// Stencil weights on the nodes beyond r_max: weights(i, k) multiplies the
/// field value at radii[k] in row i.
struct OuterGhosts {
  SparseMatrix weights;
  Vector radii;
};

/// Graded mesh r_j = r_max (j/N)^p, j = 1..N, with an implicit ghost node at
/// r = 0. Quadrature and differentiation matrices are built once at
/// construction; the object is immutable afterwards.
class RadialGrid {
 public:
  static std::shared_ptr<const RadialGrid> build(int n_nodes, double r_max, double grading_exponent = 2.0);
  /// The node positions alone; any n >= 1 (build() additionally needs n >= 16).
  static Vector node_positions(int n_nodes, double r_max, double grading_exponent = 2.0);

  int size() const { return static_cast<int>(nodes_.size()); }
  const Vector& nodes() const { return nodes_; }
  double node(int i) const { return nodes_[i]; }
  double r_max() const { return r_max_; }
  double grading_exponent() const { return grading_; }

  /// Quadrature weights for finite_limit integrands; they sum to r_max.
  const Vector& weights() const { return weights_finite_; }
  /// Weights for integrands that vanish at the origin (ghost value 0).
  const Vector& weights(OriginClass integrand) const;

  /// Maps nodal values f_1..f_N to the segment integrals over
  /// [r_{j-1}, r_j] (r_0 = 0). Fourth order in the mapped coordinate.
  const SparseMatrix& segment_matrix(OriginClass integrand) const;

  /// First (order = 1) or second (order = 2) derivative matrix for a field of
  /// the given classes. Fields are restrictions of smooth radial functions:
  /// vanishes_like_r fields extend oddly through the origin, all others
  /// evenly.
  const SparseMatrix& derivative_matrix(OriginClass field, TailClass tail, int order = 1,
                                        Stencil stencil = Stencil::centered) const;

  /// As derivative_matrix for an exponential tail f(r) = f(r_max)
  /// exp(-decay_rate (r - r_max)) beyond r_max; built on each call.
  SparseMatrix decaying_derivative_matrix(OriginClass field, double decay_rate, int order = 1,
                                          Stencil stencil = Stencil::centered) const;

  /// Raw ghost weights of derivative_matrix beyond r_max, for callers that
  /// supply their own exterior continuation.
  OuterGhosts outer_ghosts(OriginClass field, int order = 1, Stencil stencil = Stencil::centered) const;

  /// Points per finite-difference stencil.
  static constexpr int kStencilWidth = 7;

 private:
  RadialGrid() = default;

  Vector nodes_;
  double r_max_ = 0.0;
  double grading_ = 1.0;
  Vector weights_finite_;
  Vector weights_ghost_;
  SparseMatrix segment_finite_;
  SparseMatrix segment_ghost_;
  static int derivative_slot(int origin, int tail, int order, int stencil);
  static constexpr int kStencilKinds = 4;
  std::array<SparseMatrix, 3 * 2 * 2 * kStencilKinds> derivatives_;
};

using GridPtr = std::shared_ptr<const RadialGrid>;

/// Sampled real function on a RadialGrid.
class RadialField {
 public:
  RadialField(GridPtr grid, Vector values, OriginClass origin, TailClass tail,
              std::optional<double> slope_bound = std::nullopt);

  static RadialField zeros(GridPtr grid, OriginClass origin, TailClass tail);

  const RadialGrid& grid() const { return *grid_; }
  const GridPtr& grid_ptr() const { return grid_; }
  const Vector& values() const { return values_; }
  double operator[](int i) const { return values_[i]; }
  int size() const { return static_cast<int>(values_.size()); }
  OriginClass origin_class() const { return origin_; }
  TailClass tail_class() const { return tail_; }

  /// Monotone cubic (PCHIP) evaluation; outside (0, r_max] the declared
  /// origin and tail classes decide the extension.
  double evaluate(double r) const;

  RadialField with_values(Vector values) const;

 private:
  GridPtr grid_;
  Vector values_;
  OriginClass origin_;
  TailClass tail_;
};

/// Nodal map f -> f(r) on the grid.
template <class F>
Vector sample(const RadialGrid& grid, F&& f) {
  Vector v(grid.size());
  for (int i = 0; i < grid.size(); ++i) v[i] = f(grid.node(i));
  return v;
}

/// Sum of the grid quadrature, ghost handled by the origin class.
double integrate(const RadialField& f);
double integrate(const RadialGrid& grid, const Vector& f, OriginClass origin);

/// g(r_j) = int_0^{r_j} f ds.
RadialField integrate_prefix(const RadialField& f);
Vector prefix_integral(const RadialGrid& grid, const Vector& f, OriginClass origin);
/// g(r_j) = int_{r_j}^{r_max} f ds.
Vector suffix_integral(const RadialGrid& grid, const Vector& f, OriginClass origin);

/// K[f](r) = int_0^inf f(s) / max(r, s) ds, computed by prefix sums.
RadialField newtonian_kernel(const RadialField& f);

RadialField differentiate(const RadialField& f);

struct NormReport {
  double x_phi = 0.0;
  double x_chi = 0.0;
  double x_tau = 0.0;
  double hardy_ratio = 0.0;
  double sup_tau = 0.0;  // diagnostic only, not part of the X_tau norm
};

/// H^1(R^3) norm of rho(|x|)/|x|.
double h1_profile_norm(const RadialField& rho);
/// int_0^inf |d tau / dr| dr, with the analytic 1/r tail beyond r_max.
double tau_norm(const RadialField& tau);
/// (int |u|^2 / |x|^2) / (int |grad u|^2) for u = rho / r.
double hardy_ratio(const RadialField& rho);

NormReport norms(const RadialField& phi, const RadialField& chi, const RadialField& tau);

struct PointwiseBound {
  bool pass = true;
  double worst_ratio = 0.0;
  bool degenerate = false;  // zero derivative norm; passes by convention
};

/// |rho(r)| <= r^{1/2} || d/dr (rho / r) ||_{L^2(r^2 dr)}.
PointwiseBound pointwise_bound_check(const RadialField& rho, double tolerance = 1e-6);

}  // namespace edsolve
