#include "edsolve/linearized.hpp"

#include <Eigen/Eigenvalues>
#include <Eigen/SVD>

#include "json.hpp"

#include <cmath>
#include <fstream>
#include <limits>
#include <random>

namespace edsolve {

std::string to_string(Provenance p) {
  switch (p) {
    case Provenance::L_choquard: return "L_choquard";
    case Provenance::V: return "V";
    case Provenance::W: return "W";
    case Provenance::S: return "S";
    case Provenance::D_prime: return "D_prime";
    case Provenance::jacobian_eps: return "jacobian_eps";
  }
  return "?";
}

namespace {

using Triplets = std::vector<Eigen::Triplet<double>>;


// Adds block * scale at (row0, col0), skipping the rows listed as boundary rows
// of the target block (local row index n - 1).
void place(Triplets& t, const SparseMatrix& block, int row0, int col0, bool skip_last_row = true) {
  const int n = static_cast<int>(block.rows());
  for (int k = 0; k < block.outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(block, k); it; ++it)
      if (!skip_last_row || it.row() != n - 1) t.emplace_back(row0 + it.row(), col0 + it.col(), it.value());
}

void place_diag(Triplets& t, const Vector& d, int row0, int col0) {
  for (int i = 0; i + 1 < d.size(); ++i)
    if (d[i] != 0.0) t.emplace_back(row0 + i, col0 + i, d[i]);
}

SparseMatrix scale_rows(const Vector& s, const SparseMatrix& m) { return SparseMatrix(s.asDiagonal() * m); }

SparseMatrix from_triplets(const Triplets& t, int n) {
  SparseMatrix m(n, n);
  m.setFromTriplets(t.begin(), t.end());
  m.makeCompressed();
  return m;
}

std::vector<int> block_ends(int blocks, int n) {
  std::vector<int> out;
  for (int b = 1; b <= blocks; ++b) out.push_back(b * n - 1);
  return out;
}

std::vector<int> interior_indices(const LinearOperator& op) {
  std::vector<char> mask(op.size(), 1);
  for (int i : op.boundary) mask[i] = 0;
  std::vector<int> out;
  for (int i = 0; i < op.size(); ++i)
    if (mask[i]) out.push_back(i);
  return out;
}

Matrix interior_weighted_dense(const LinearOperator& op) {
  const std::vector<int> idx = interior_indices(op);
  const Vector& c = op.col_weights;
  const Matrix a = op.dense();
  Matrix b(idx.size(), idx.size());
  for (size_t j = 0; j < idx.size(); ++j)
    for (size_t i = 0; i < idx.size(); ++i) b(i, j) = c[idx[i]] * a(idx[i], idx[j]) / c[idx[j]];
  return b;
}

std::vector<BlockSpec> layout(std::initializer_list<const char*> roles, int n) {
  std::vector<BlockSpec> out;
  for (const char* r : roles) out.push_back({r, n});
  return out;
}

// Rows of the first-order pair shared by V, W and D'.
void place_v_rows(Triplets& t, const RadialGrid& g, double m) {
  const int n = g.size();
  const Vector& r = g.nodes();
  const Vector inv_r = r.cwiseInverse();
  const Vector inv_r2 = inv_r.cwiseAbs2();
  const SystemDerivatives d = system_derivatives(g, m);
  const SparseMatrix& d_h = d.phi;
  const SparseMatrix& d_k = d.chi;
  // h'/r - h/r^2 + 2m k/r
  place(t, scale_rows(inv_r, d_h), 0, 0);
  place_diag(t, -inv_r2, 0, 0);
  place_diag(t, 2.0 * m * inv_r, 0, n);
  // k'/r + k/r^2 + h/r
  place(t, scale_rows(inv_r, d_k), n, n);
  place_diag(t, inv_r2, n, n);
  place_diag(t, inv_r, n, 0);
  t.emplace_back(n - 1, n - 1, 1.0);
  t.emplace_back(2 * n - 1, 2 * n - 1, 1.0);
}

// l' row and its boundary row l(r_max) = 0, plus the -m phi0 l / r coupling.
void place_l_rows(Triplets& t, const RadialGrid& g, double m, const Vector& phi0) {
  const int n = g.size();
  place(t, system_derivatives(g, m).tau, 2 * n, 2 * n);
  t.emplace_back(3 * n - 1, 3 * n - 1, 1.0);
  place_diag(t, -m * phi0.cwiseQuotient(g.nodes()), n, 2 * n);
}

// (8 pi m / r^2) P[2 phi0 h] on interior l-rows; the boundary row carries the
// linearized tail closure -(8 pi m / r_max) P[2 phi0 h](r_max).
IntegralTerm density_integral(const RadialGrid& g, double m, const Vector& phi0) {
  const int n = g.size();
  IntegralTerm term;
  term.sweep = Sweep::prefix;
  Triplets a;
  for (int i = 0; i < n; ++i) a.emplace_back(i, i, 2.0 * phi0[i]);
  term.integrand = SparseMatrix(n, 3 * n);
  term.integrand.setFromTriplets(a.begin(), a.end());
  term.segments = g.segment_matrix(OriginClass::vanishes_like_r2);
  Triplets c;
  const Vector& r = g.nodes();
  for (int i = 0; i + 1 < n; ++i) c.emplace_back(2 * n + i, i, 8.0 * kPi * m / (r[i] * r[i]));
  c.emplace_back(3 * n - 1, n - 1, -8.0 * kPi * m / g.r_max());
  term.coupling = SparseMatrix(3 * n, n);
  term.coupling.setFromTriplets(c.begin(), c.end());
  return term;
}

Vector block_col_weights(const RadialGrid& g, const std::string& role) {
  if (role == "l") return g.weights().cwiseSqrt();
  return (4.0 * kPi * g.weights(OriginClass::vanishes_like_r)).cwiseSqrt();
}

Vector block_row_weights(const RadialGrid& g, const std::string& role) {
  Vector w = block_col_weights(g, role);
  const int n = g.size();
  if (role == "h" || role == "k") w.head(n - 1) = w.head(n - 1).cwiseProduct(g.nodes().head(n - 1));
  return w;
}

}  // namespace

void apply_standard_weights(LinearOperator& op) {
  const RadialGrid& g = *op.grid;
  op.row_weights.resize(op.size());
  op.col_weights.resize(op.size());
  int offset = 0;
  for (const auto& b : op.block_layout) {
    if (b.size != g.size()) throw ParameterError("standard weights need N-sized blocks");
    op.row_weights.segment(offset, b.size) = block_row_weights(g, b.role);
    op.col_weights.segment(offset, b.size) = block_col_weights(g, b.role);
    offset += b.size;
  }
}

StructuredOperator LinearOperator::weighted() const { return op.scaled(row_weights, col_weights.cwiseInverse()); }

void LinearOperator::validate() const {
  int total = 0;
  for (const auto& b : block_layout) total += b.size;
  if (total != op.size()) throw ParameterError("block layout does not cover the operator");
  if (row_weights.size() != op.size() || col_weights.size() != op.size())
    throw ParameterError("certificate weights have the wrong size");
  if ((col_weights.array() <= 0.0).any() || (row_weights.array() <= 0.0).any())
    throw ParameterError("certificate weights must be positive");
  for (int k = 0; k < op.local().outerSize(); ++k)
    for (SparseMatrix::InnerIterator it(op.local(), k); it; ++it)
      if (!std::isfinite(it.value())) throw ParameterError("operator has non-finite entries");
}

LinearOperator assemble_linearized_choquard(const RadialField& phi, double m) {
  LinearOperator out{choquard_jacobian(phi, m), Provenance::L_choquard, layout({"xi"}, phi.size()), phi.grid_ptr(),
                     {}, {}};
  const Vector w = (4.0 * kPi * phi.grid().weights(OriginClass::vanishes_like_r)).cwiseSqrt();
  out.row_weights = w;
  out.col_weights = w;
  out.boundary = {phi.size() - 1};
  out.validate();
  return out;
}

LinearOperator assemble_linearized_choquard(const ChoquardSolution& sol) {
  return assemble_linearized_choquard(sol.phi0, sol.m);
}

LinearOperator assemble_V(double m, GridPtr grid) {
  if (!grid) throw ParameterError("assemble_V: missing grid");
  const int n = grid->size();
  Triplets t;
  place_v_rows(t, *grid, m);
  LinearOperator out{StructuredOperator(from_triplets(t, 2 * n)), Provenance::V, layout({"h", "k"}, n), grid, {}, {}};
  out.boundary = block_ends(2, n);
  apply_standard_weights(out);
  out.validate();
  return out;
}

LinearOperator assemble_W(const ChoquardSolution& sol) {
  const RadialGrid& g = sol.grid();
  const int n = g.size();
  Triplets t;
  place_v_rows(t, g, sol.m);
  place_l_rows(t, g, sol.m, sol.phi0.values());
  LinearOperator out{StructuredOperator(from_triplets(t, 3 * n)), Provenance::W, layout({"h", "k", "l"}, n),
                     sol.grid_ptr(), {}, {}};
  out.boundary = block_ends(3, n);
  apply_standard_weights(out);
  out.validate();
  return out;
}

LinearOperator assemble_S(const ChoquardSolution& sol) {
  const RadialGrid& g = sol.grid();
  const int n = g.size();
  Triplets t;
  place_diag(t, -sol.m * sol.tau0.values().cwiseQuotient(g.nodes()), n, 0);
  StructuredOperator op(from_triplets(t, 3 * n));
  op.add_integral(density_integral(g, sol.m, sol.phi0.values()));
  LinearOperator out{std::move(op), Provenance::S, layout({"h", "k", "l"}, n), sol.grid_ptr(), {}, {}};
  out.boundary = block_ends(3, n);
  apply_standard_weights(out);
  out.validate();
  return out;
}

LinearOperator assemble_D_prime(const ChoquardSolution& sol) {
  const RadialGrid& g = sol.grid();
  const int n = g.size();
  const double m = sol.m;
  const Vector& r = g.nodes();
  const Vector& phi0 = sol.phi0.values();
  const Vector& tau0 = sol.tau0.values();
  const SystemDerivatives d = system_derivatives(g, m);
  const SparseMatrix& d_h = d.phi;
  const SparseMatrix& d_k = d.chi;
  const SparseMatrix& d_l = d.tau;

  Triplets t;
  // Row-major copies make per-row access cheap.
  const Eigen::SparseMatrix<double, Eigen::RowMajor> dh(d_h), dk(d_k), dl(d_l);
  for (int i = 0; i + 1 < n; ++i) {
    const double ri = r[i];
    // h'/r - h/r^2 + 2m k/r
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(dh, i); it; ++it)
      t.emplace_back(i, it.col(), it.value() / ri);
    t.emplace_back(i, i, -1.0 / (ri * ri));
    t.emplace_back(i, n + i, 2.0 * m / ri);
    // k'/r + k/r^2 + h/r - m (h/r) tau0 - m (phi0/r) l
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(dk, i); it; ++it)
      t.emplace_back(n + i, n + it.col(), it.value() / ri);
    t.emplace_back(n + i, n + i, 1.0 / (ri * ri));
    t.emplace_back(n + i, i, (1.0 - m * tau0[i]) / ri);
    t.emplace_back(n + i, 2 * n + i, -m * phi0[i] / ri);
    // l' (+ integral term below)
    for (Eigen::SparseMatrix<double, Eigen::RowMajor>::InnerIterator it(dl, i); it; ++it)
      t.emplace_back(2 * n + i, 2 * n + it.col(), it.value());
  }
  t.emplace_back(n - 1, n - 1, 1.0);
  t.emplace_back(2 * n - 1, 2 * n - 1, 1.0);
  t.emplace_back(3 * n - 1, 3 * n - 1, 1.0);

  StructuredOperator op(from_triplets(t, 3 * n));
  IntegralTerm term;
  term.sweep = Sweep::prefix;
  Triplets a, c;
  for (int i = 0; i < n; ++i) a.emplace_back(i, i, phi0[i]);
  term.integrand = SparseMatrix(n, 3 * n);
  term.integrand.setFromTriplets(a.begin(), a.end());
  term.segments = g.segment_matrix(OriginClass::vanishes_like_r2);
  // (16 pi m / r^2) int_0^r phi0 h ds; tail closure on the last row
  for (int i = 0; i + 1 < n; ++i) c.emplace_back(2 * n + i, i, 16.0 * kPi * m / (r[i] * r[i]));
  c.emplace_back(3 * n - 1, n - 1, -16.0 * kPi * m / g.r_max());
  term.coupling = SparseMatrix(3 * n, n);
  term.coupling.setFromTriplets(c.begin(), c.end());
  op.add_integral(std::move(term));

  LinearOperator out{std::move(op), Provenance::D_prime, layout({"h", "k", "l"}, n), sol.grid_ptr(), {}, {}};
  out.boundary = block_ends(3, n);
  apply_standard_weights(out);
  out.validate();
  return out;
}

Matrix symmetrized(const LinearOperator& op) {
  const Matrix b = interior_weighted_dense(op);
  return 0.5 * (b + b.transpose());
}

double weighted_asymmetry(const LinearOperator& op) {
  const Matrix b = interior_weighted_dense(op);
  const double scale = b.cwiseAbs().maxCoeff();
  if (scale == 0.0) return 0.0;
  return (b - b.transpose()).cwiseAbs().maxCoeff() / scale;
}

double smallest_singular_value(const LinearOperator& op) {
  try {
    return smallest_singular_value(op.weighted(), op.boundary);
  } catch (const SingularOperatorError&) {
    return 0.0;
  }
}

SpectrumReport nondegeneracy_report(const std::vector<LinearOperator>& ladder) {
  if (ladder.empty()) throw ParameterError("nondegeneracy_report: empty refinement ladder");
  SpectrumReport rep;
  for (const auto& op : ladder) {
    rep.ladder_sizes.push_back(op.grid ? op.grid->size() : op.size());
    rep.ladder_values.push_back(smallest_singular_value(op));
  }
  rep.grid_size = rep.ladder_sizes.back();
  rep.smallest_singular_value = rep.ladder_values.back();
  double lo = rep.ladder_values.front(), hi = lo;
  for (double v : rep.ladder_values) {
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  rep.stable_under_refinement = lo > 1e-6 && (hi - lo) < 0.2 * hi;

  const LinearOperator& fine = ladder.back();
  if (fine.provenance == Provenance::L_choquard && fine.size() <= 2500) {
    const Vector ev = Eigen::SelfAdjointEigenSolver<Matrix>(symmetrized(fine), Eigen::EigenvaluesOnly).eigenvalues();
    rep.smallest_abs_eigenvalue = ev.cwiseAbs().minCoeff();
  }
  return rep;
}

Vector h1_singular_values(const LinearOperator& op) {
  const RadialGrid& g = *op.grid;
  const int n = g.size();
  int offset = -1, acc = 0;
  for (const auto& b : op.block_layout) {
    if (b.role == "h" || b.role == "xi") {
      offset = acc;
      break;
    }
    acc += b.size;
  }
  if (offset < 0) throw ParameterError("h1_singular_values: operator has no h block");

  const std::vector<int> rows_kept = interior_indices(op);
  const Matrix weighted_rows = op.row_weights.asDiagonal() * op.dense();
  // interior rows, h columns without the boundary node
  Matrix m(rows_kept.size(), n - 1);
  for (size_t i = 0; i < rows_kept.size(); ++i) m.row(i) = weighted_rows.row(rows_kept[i]).segment(offset, n - 1);

  // Gram matrix of ||h/r||_{H^1(R^3)}: nodal mass term plus forward
  // differences of u = h/r between neighbouring nodes.
  const Vector& r = g.nodes();
  const Vector& w = g.weights(OriginClass::vanishes_like_r);
  Matrix gram = Matrix::Zero(n - 1, n - 1);
  for (int i = 0; i + 1 < n; ++i) gram(i, i) += 4.0 * kPi * w[i];
  for (int i = 0; i + 2 < n; ++i) {
    const double dr = r[i + 1] - r[i];
    const double mid = 0.5 * (r[i] + r[i + 1]);
    const double c = 4.0 * kPi * mid * mid / dr;
    const double a = 1.0 / r[i], b = 1.0 / r[i + 1];
    gram(i, i) += c * a * a;
    gram(i + 1, i + 1) += c * b * b;
    gram(i, i + 1) -= c * a * b;
    gram(i + 1, i) -= c * a * b;
  }
  const Eigen::LLT<Matrix> llt(gram);
  if (llt.info() != Eigen::Success) throw SingularOperatorError("H^1 Gram matrix is not positive definite");
  // M L^{-T} = (L^{-1} M^T)^T
  const Matrix mt = llt.matrixL().solve(m.transpose()).transpose();
  return Eigen::BDCSVD<Matrix>(mt).singularValues();
}

LinearSolver::LinearSolver(const LinearOperator& op) : op_(&op), factor_(op.weighted()) {}

Vector LinearSolver::solve(const Vector& rhs) {
  if (rhs.size() != op_->size()) throw ParameterError("solve_linear: rhs has the wrong size");
  const Vector& row = op_->row_weights;
  const Vector& col = op_->col_weights;
  const Vector b = row.cwiseProduct(rhs);
  const double bnorm = b.norm();
  if (bnorm == 0.0) return Vector::Zero(rhs.size());
  const StructuredOperator a = op_->weighted();
  Vector y = factor_.solve(b);
  y += factor_.solve(b - a.apply(y));
  const double rel = (b - a.apply(y)).norm() / bnorm;
  if (!(rel < 1e-12)) {
    double cond = std::numeric_limits<double>::infinity();
    try {
      const double smin = smallest_singular_value(a, 60, 1e-6);
      std::mt19937_64 rng(7);
      std::normal_distribution<double> gauss;
      double smax = 0.0;
      for (int k = 0; k < 8; ++k) {
        Vector x(a.size());
        for (int i = 0; i < x.size(); ++i) x[i] = gauss(rng);
        smax = std::max(smax, a.apply(x).norm() / x.norm());
      }
      cond = smax / smin;
    } catch (const SingularOperatorError&) {
    }
    throw SingularOperatorError("linear solve residual " + std::to_string(rel) + " above 1e-12 (condition estimate " +
                                std::to_string(cond) + ")");
  }
  return y.cwiseQuotient(col);
}

Vector solve_linear(const LinearOperator& op, const Vector& rhs) {
  LinearSolver s(op);
  return s.solve(rhs);
}

void dump_matrix(const LinearOperator& op, const std::string& stem) {
  const Matrix a = op.dense();
  std::ofstream bin(stem + ".bin", std::ios::binary);
  if (!bin) throw ParameterError("cannot write " + stem + ".bin");
  bin.write(reinterpret_cast<const char*>(a.data()), static_cast<std::streamsize>(sizeof(double) * a.size()));
  nlohmann::json blocks = nlohmann::json::array();
  for (const auto& b : op.block_layout) blocks.push_back({{"role", b.role}, {"size", b.size}});
  const nlohmann::json header = {{"provenance", to_string(op.provenance)},
                                 {"N", op.grid ? op.grid->size() : op.size()},
                                 {"rows", a.rows()},
                                 {"cols", a.cols()},
                                 {"dtype", "float64"},
                                 {"byte_order", "little"},
                                 {"storage", "column-major"},
                                 {"block_layout", blocks}};
  std::ofstream js(stem + ".json");
  if (!js) throw ParameterError("cannot write " + stem + ".json");
  js << header.dump(2) << "\n";
}

}  // namespace edsolve
