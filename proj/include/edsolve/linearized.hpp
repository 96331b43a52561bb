#pragma once

// Discrete linear operators of the perturbation problem and the numerical
// certificates (smallest singular values under refinement) that stand in for
// their invertibility.
//
// Unknowns are stacked blocks of nodal values on one RadialGrid, in the order
// given by block_layout (h, k, l for the three-field operators). Every block
// row ends with its boundary row at r_max.

#include "edsolve/choquard.hpp"
#include "edsolve/radial_core.hpp"
#include "edsolve/structured_operator.hpp"

#include <optional>
#include <string>
#include <vector>

namespace edsolve {

enum class Provenance { L_choquard, V, W, S, D_prime, jacobian_eps };
std::string to_string(Provenance p);

struct BlockSpec {
  std::string role;
  int size = 0;
};

struct LinearOperator {
  StructuredOperator op;
  Provenance provenance = Provenance::L_choquard;
  std::vector<BlockSpec> block_layout;
  GridPtr grid;
  /// Y-norm row weights and X-norm column weights; the certificate operator
  /// is diag(row_weights) * op * diag(col_weights)^{-1}.
  Vector row_weights;
  Vector col_weights;
  /// Boundary rows; each one is paired with the unknown of the same index.
  /// Certificates act on the Schur complement that eliminates them.
  std::vector<int> boundary;

  int size() const { return op.size(); }
  Vector apply(const Vector& x) const { return op.apply(x); }
  Matrix dense() const { return op.dense(); }
  StructuredOperator weighted() const;
  /// Throws ParameterError if the layout, weights or entries are inconsistent.
  void validate() const;
};

/// Profile form of the linearized Choquard operator at the ground state.
LinearOperator assemble_linearized_choquard(const ChoquardSolution& sol);
/// Same operator around an arbitrary profile phi (phi = 0 gives -D2 + 2m).
LinearOperator assemble_linearized_choquard(const RadialField& phi, double m);

LinearOperator assemble_V(double m, GridPtr grid);
LinearOperator assemble_W(const ChoquardSolution& sol);
LinearOperator assemble_S(const ChoquardSolution& sol);
/// Assembled directly from the linearization, not as assemble_W + assemble_S.
LinearOperator assemble_D_prime(const ChoquardSolution& sol);

/// Weights used by the certificates for the given layout of N-blocks.
/// Roles "h", "k", "xi" carry L^2(R^3) weights, "l" carries L^1-consistent
/// weights; rows follow the same role of the equation they belong to.
void apply_standard_weights(LinearOperator& op);

/// 0.5 (B + B^T) with B = diag(c) A diag(c)^{-1}, c = col_weights, restricted
/// to the interior rows and columns.
Matrix symmetrized(const LinearOperator& op);
/// max |B_ij - B_ji| / max |B_ij| for B as in symmetrized().
double weighted_asymmetry(const LinearOperator& op);

/// Smallest singular value of the weighted operator; 0 if it is singular.
double smallest_singular_value(const LinearOperator& op);

struct SpectrumReport {
  double smallest_singular_value = 0.0;
  std::optional<double> smallest_abs_eigenvalue;
  int grid_size = 0;
  bool stable_under_refinement = false;
  std::vector<int> ladder_sizes;
  std::vector<double> ladder_values;
};

/// One operator per refinement level, coarse to fine. Stable iff all values
/// exceed 1e-6 and (max - min) / max < 0.2.
SpectrumReport nondegeneracy_report(const std::vector<LinearOperator>& ladder);

/// Singular values, descending, of the weighted h-block of op measured with
/// the discrete X_phi (H^1) norm on the columns.
Vector h1_singular_values(const LinearOperator& op);

/// Factorization handle; not safe for concurrent use.
class LinearSolver {
 public:
  explicit LinearSolver(const LinearOperator& op);
  /// Direct solve with one refinement step; throws SingularOperatorError when
  /// the relative residual stays above 1e-12.
  Vector solve(const Vector& rhs);

 private:
  const LinearOperator* op_;
  OperatorFactorization factor_;
};

Vector solve_linear(const LinearOperator& op, const Vector& rhs);

/// Writes <stem>.bin (column-major float64, little endian) and <stem>.json.
void dump_matrix(const LinearOperator& op, const std::string& stem);

}  // namespace edsolve
