#include "edsolve/structured_operator.hpp"

#include <Eigen/Eigenvalues>

#include <cmath>
#include <random>

namespace edsolve {

namespace {

// Shift rows up by one: out_i = in_{i+1}, last row empty.
SparseMatrix shift_up(const SparseMatrix& in) {
  std::vector<Eigen::Triplet<double>> trip;
  for (int k = 0; k < in.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(in, k); it; ++it)
      if (it.row() > 0) trip.emplace_back(it.row() - 1, it.col(), it.value());
  SparseMatrix out(in.rows(), in.cols());
  out.setFromTriplets(trip.begin(), trip.end());
  return out;
}

void append(std::vector<Eigen::Triplet<double>>& trip, const SparseMatrix& m, int row0, int col0, double scale) {
  for (int k = 0; k < m.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(m, k); it; ++it)
      trip.emplace_back(row0 + it.row(), col0 + it.col(), scale * it.value());
}

}  // namespace

StructuredOperator::StructuredOperator(int n) : local_(n, n) {}

StructuredOperator::StructuredOperator(SparseMatrix local) : local_(std::move(local)) {
  if (local_.rows() != local_.cols()) throw ParameterError("structured operator must be square");
}

void StructuredOperator::add_integral(IntegralTerm term) {
  const int n = size();
  const auto nodes = term.segments.rows();
  if (term.integrand.rows() != nodes || term.integrand.cols() != n || term.segments.cols() != nodes ||
      term.coupling.rows() != n || term.coupling.cols() != nodes)
    throw ParameterError("integral term has inconsistent shapes");
  integrals_.push_back(std::move(term));
}

Vector StructuredOperator::apply(const Vector& x) const {
  Vector y = local_ * x;
  for (const auto& t : integrals_) {
    const Vector seg = t.segments * (t.integrand * x);
    Vector q(seg.size());
    double acc = 0.0;
    if (t.sweep == Sweep::prefix) {
      for (int i = 0; i < seg.size(); ++i) q[i] = (acc += seg[i]);
    } else {
      for (int i = static_cast<int>(seg.size()) - 1; i >= 0; --i) {
        q[i] = acc;
        acc += seg[i];
      }
    }
    y += t.coupling * q;
  }
  return y;
}

Matrix StructuredOperator::dense() const {
  Matrix a = Matrix(local_);
  for (const auto& t : integrals_) {
    Matrix q = Matrix(t.segments * t.integrand);
    const int nodes = static_cast<int>(q.rows());
    if (t.sweep == Sweep::prefix) {
      for (int i = 1; i < nodes; ++i) q.row(i) += q.row(i - 1);
    } else {
      for (int i = nodes - 1; i >= 1; --i) q.row(i - 1) += q.row(i);
      // suffix value at i excludes segment i itself
      Matrix shifted = Matrix::Zero(nodes, q.cols());
      shifted.topRows(nodes - 1) = q.bottomRows(nodes - 1);
      q = std::move(shifted);
    }
    a += t.coupling * q;
  }
  return a;
}

StructuredOperator StructuredOperator::scaled(const Vector& row, const Vector& col) const {
  if (row.size() != size() || col.size() != size()) throw ParameterError("scaling vectors have wrong size");
  StructuredOperator out(SparseMatrix(row.asDiagonal() * local_ * col.asDiagonal()));
  for (const auto& t : integrals_) {
    IntegralTerm s = t;
    s.integrand = t.integrand * col.asDiagonal();
    s.coupling = row.asDiagonal() * t.coupling;
    out.integrals_.push_back(std::move(s));
  }
  return out;
}

StructuredOperator operator+(const StructuredOperator& a, const StructuredOperator& b) {
  if (a.size() != b.size()) throw ParameterError("operator sum of different sizes");
  StructuredOperator out(SparseMatrix(a.local_ + b.local_));
  out.integrals_ = a.integrals_;
  out.integrals_.insert(out.integrals_.end(), b.integrals_.begin(), b.integrals_.end());
  return out;
}

SparseMatrix StructuredOperator::augmented() const {
  const int n = size();
  int total = n;
  for (const auto& t : integrals_) total += static_cast<int>(t.segments.rows());

  std::vector<Eigen::Triplet<double>> trip;
  append(trip, local_, 0, 0, 1.0);
  int offset = n;
  for (const auto& t : integrals_) {
    const int nodes = static_cast<int>(t.segments.rows());
    append(trip, t.coupling, 0, offset, 1.0);
    SparseMatrix feed = t.segments * t.integrand;
    if (t.sweep == Sweep::prefix) {
      // q_i - q_{i-1} = seg_i
      for (int i = 0; i < nodes; ++i) {
        trip.emplace_back(offset + i, offset + i, 1.0);
        if (i > 0) trip.emplace_back(offset + i, offset + i - 1, -1.0);
      }
    } else {
      // q_i - q_{i+1} = seg_{i+1}, q_{N-1} = 0
      feed = shift_up(feed);
      for (int i = 0; i < nodes; ++i) {
        trip.emplace_back(offset + i, offset + i, 1.0);
        if (i + 1 < nodes) trip.emplace_back(offset + i, offset + i + 1, -1.0);
      }
    }
    append(trip, feed, offset, 0, -1.0);
    offset += nodes;
  }
  SparseMatrix m(total, total);
  m.setFromTriplets(trip.begin(), trip.end());
  m.makeCompressed();
  return m;
}

// ---------------------------------------------------------------------------

OperatorFactorization::OperatorFactorization(const StructuredOperator& op) : n_(op.size()) {
  const SparseMatrix m = op.augmented();
  total_ = static_cast<int>(m.rows());
  lu_.analyzePattern(m);
  lu_.factorize(m);
  if (lu_.info() != Eigen::Success)
    throw SingularOperatorError("sparse LU failed: " + lu_.lastErrorMessage());
}

Vector OperatorFactorization::solve(const Vector& b) {
  Vector rhs = Vector::Zero(total_);
  rhs.head(n_) = b;
  const Vector x = lu_.solve(rhs);
  if (!x.allFinite()) throw SingularOperatorError("linear solve produced non-finite values");
  return x.head(n_);
}

Vector OperatorFactorization::solve_transpose(const Vector& b) {
  Vector rhs = Vector::Zero(total_);
  rhs.head(n_) = b;
  const Vector x = lu_.transpose().solve(rhs);
  if (!x.allFinite()) throw SingularOperatorError("transpose solve produced non-finite values");
  return x.head(n_);
}

double smallest_singular_value(const StructuredOperator& op, int max_steps, double rel_tol) {
  return smallest_singular_value(op, {}, max_steps, rel_tol);
}

double smallest_singular_value(const StructuredOperator& op, const std::vector<int>& eliminated, int max_steps,
                               double rel_tol) {
  OperatorFactorization f(op);
  const int n = op.size();
  std::vector<char> keep_mask(n, 1);
  for (int i : eliminated) {
    if (i < 0 || i >= n) throw ParameterError("eliminated index out of range");
    keep_mask[i] = 0;
  }
  std::vector<int> keep;
  for (int i = 0; i < n; ++i)
    if (keep_mask[i]) keep.push_back(i);
  const int k_dim = static_cast<int>(keep.size());
  // (A^{-1})_{kept, kept} is the inverse of the Schur complement onto the kept
  // unknowns, so the Lanczos operator only needs restricted full solves.
  auto lift = [&](const Vector& v) {
    Vector full = Vector::Zero(n);
    for (int i = 0; i < k_dim; ++i) full[keep[i]] = v[i];
    return full;
  };
  auto restrict_to = [&](const Vector& full) {
    Vector v(k_dim);
    for (int i = 0; i < k_dim; ++i) v[i] = full[keep[i]];
    return v;
  };
  const int steps = std::min(max_steps, k_dim);

  std::mt19937_64 rng(20091002ULL);
  std::normal_distribution<double> gauss;
  Vector v(k_dim);
  for (int i = 0; i < k_dim; ++i) v[i] = gauss(rng);
  v.normalize();

  std::vector<Vector> basis;
  std::vector<double> alpha, beta;
  double previous = 0.0;
  for (int k = 0; k < steps; ++k) {
    basis.push_back(v);
    Vector w = restrict_to(f.solve(lift(restrict_to(f.solve_transpose(lift(v))))));
    const double a = v.dot(w);
    alpha.push_back(a);
    for (const auto& b : basis) w -= b.dot(w) * b;  // full reorthogonalization
    for (const auto& b : basis) w -= b.dot(w) * b;
    const double bnorm = w.norm();

    if ((k + 1) % 5 == 0 || bnorm < 1e-14 * std::abs(a) || k + 1 == steps) {
      const int m = static_cast<int>(alpha.size());
      Matrix t = Matrix::Zero(m, m);
      for (int i = 0; i < m; ++i) {
        t(i, i) = alpha[i];
        if (i + 1 < m) t(i, i + 1) = t(i + 1, i) = beta[i];
      }
      const double theta = Eigen::SelfAdjointEigenSolver<Matrix>(t, Eigen::EigenvaluesOnly).eigenvalues().maxCoeff();
      if (!(theta > 0.0) || !std::isfinite(theta)) throw SingularOperatorError("operator is numerically singular");
      if (std::abs(theta - previous) <= rel_tol * theta || bnorm < 1e-14 * std::abs(a) || k + 1 == steps)
        return 1.0 / std::sqrt(theta);
      previous = theta;
    }
    beta.push_back(bnorm);
    v = w / bnorm;
  }
  return 1.0 / std::sqrt(previous);
}

}  // namespace edsolve
