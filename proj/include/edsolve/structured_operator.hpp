#pragma once

// Operators of the form
//
//   A x = L x + sum_k E_k C_k(B_k x)
//
// where L is sparse (banded differentiation plus diagonal terms), B_k maps the
// stacked unknowns to a nodal integrand, C_k is a cumulative (prefix or
// suffix) radial quadrature and E_k couples the running integral back into
// the rows. Every linearization in this project has this shape. Solves go
// through an augmented sparse system in which the running integrals are
// extra unknowns tied together by a bidiagonal recurrence, which keeps the
// factorization banded.

#include "edsolve/radial_core.hpp"

#include <Eigen/SparseLU>

#include <stdexcept>
#include <vector>

namespace edsolve {

class SingularOperatorError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Sweep { prefix, suffix };

struct IntegralTerm {
  Sweep sweep = Sweep::prefix;
  SparseMatrix integrand;  // N x n
  SparseMatrix segments;   // N x N, nodal integrand -> segment integrals
  SparseMatrix coupling;   // n x N
};

class StructuredOperator {
 public:
  explicit StructuredOperator(int n = 0);
  explicit StructuredOperator(SparseMatrix local);

  int size() const { return static_cast<int>(local_.rows()); }
  const SparseMatrix& local() const { return local_; }
  SparseMatrix& local() { return local_; }
  const std::vector<IntegralTerm>& integrals() const { return integrals_; }
  void add_integral(IntegralTerm term);

  Vector apply(const Vector& x) const;
  Matrix dense() const;

  /// diag(row) * A * diag(col).
  StructuredOperator scaled(const Vector& row, const Vector& col) const;

  /// Square sparse system whose Schur complement onto the first size()
  /// unknowns is this operator.
  SparseMatrix augmented() const;

  friend StructuredOperator operator+(const StructuredOperator& a, const StructuredOperator& b);

 private:
  SparseMatrix local_;
  std::vector<IntegralTerm> integrals_;
};

/// Sparse LU of the augmented system; solves with A and A^T.
class OperatorFactorization {
 public:
  explicit OperatorFactorization(const StructuredOperator& op);

  Vector solve(const Vector& b);
  Vector solve_transpose(const Vector& b);
  int size() const { return n_; }

 private:
  int n_ = 0;
  int total_ = 0;
  Eigen::SparseLU<SparseMatrix, Eigen::COLAMDOrdering<int>> lu_;
};

/// Smallest singular value via Lanczos on (A^T A)^{-1}. Throws
/// SingularOperatorError when the factorization breaks down.
double smallest_singular_value(const StructuredOperator& op, int max_steps = 150, double rel_tol = 1e-9);
/// Same for the Schur complement of op onto the unknowns not listed in
/// eliminated (rows with the same indices are the eliminated equations).
double smallest_singular_value(const StructuredOperator& op, const std::vector<int>& eliminated,
                               int max_steps = 150, double rel_tol = 1e-9);

}  // namespace edsolve
