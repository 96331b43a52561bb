#include "edsolve/cli_io.hpp"
#include "edsolve/linearized.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <ostream>
#include <sstream>

namespace edsolve {

namespace {

namespace fs = std::filesystem;

constexpr double kMass = 0.5;

struct Fixture {
  GridPtr grid;
  ChoquardSolution sol;
};

const Fixture& fixture() {
  static const Fixture f = [] {
    GridPtr g = RadialGrid::build(400, default_r_max(kMass));
    return Fixture{g, solve_ground_state(kMass, g)};
  }();
  return f;
}

double sup(const Vector& v) { return v.size() ? v.cwiseAbs().maxCoeff() : 0.0; }

bool close_all(const Vector& a, const Vector& b, double tol) {
  return a.size() == b.size() && (a - b).cwiseAbs().maxCoeff() <= tol;
}

class Suite {
 public:
  explicit Suite(std::ostream& log) : log_(log) {}

  void check(const std::string& name, const std::function<bool(std::string&)>& body) {
    std::string detail;
    bool ok = false;
    try {
      ok = body(detail);
    } catch (const std::exception& e) {
      detail = std::string("exception: ") + e.what();
    }
    log_ << (ok ? "PASS " : "FAIL ") << name;
    if (!detail.empty()) log_ << "  [" << detail << "]";
    log_ << "\n";
    failures_ += ok ? 0 : 1;
  }

  int failures() const { return failures_; }

 private:
  std::ostream& log_;
  int failures_ = 0;
};

std::string num(double x) {
  std::ostringstream os;
  os << x;
  return os.str();
}

LinearOperator identity_operator(GridPtr g) {
  const int n = g->size();
  SparseMatrix id(n, n);
  id.setIdentity();
  return {StructuredOperator(id), Provenance::V, {{"h", n}}, g, Vector::Ones(n), Vector::Ones(n), {}};
}

fs::path scratch_dir(const std::string& leaf) {
  const fs::path d = fs::temp_directory_path() / ("edsolve_selftest_" + leaf);
  fs::remove_all(d);
  fs::create_directories(d);
  return d;
}

int count_lines(const fs::path& p) {
  std::ifstream in(p);
  int n = 0;
  for (std::string line; std::getline(in, line);) ++n;
  return n;
}

std::string first_line(const fs::path& p) {
  std::ifstream in(p);
  std::string line;
  std::getline(in, line);
  return line;
}

void radial_core_checks(Suite& t) {
  t.check("grid nodes n=4 p=1", [](std::string&) {
    return close_all(RadialGrid::node_positions(4, 1.0, 1.0), (Vector(4) << 0.25, 0.5, 0.75, 1.0).finished(), 1e-15);
  });
  t.check("grid nodes n=4 p=2", [](std::string&) {
    return close_all(RadialGrid::node_positions(4, 1.0, 2.0), (Vector(4) << 0.0625, 0.25, 0.5625, 1.0).finished(),
                     1e-15);
  });
  GridPtr uni = RadialGrid::build(64, 2.0, 1.0);
  t.check("integrate_prefix of zero", [&](std::string&) {
    return sup(integrate_prefix(RadialField::zeros(uni, OriginClass::finite_limit, TailClass::zero)).values()) == 0.0;
  });
  t.check("integrate_prefix of one is r", [&](std::string& d) {
    const RadialField f(uni, Vector::Ones(uni->size()), OriginClass::finite_limit, TailClass::zero);
    const double e = sup(integrate_prefix(f).values() - uni->nodes());
    d = "err " + num(e);
    return e < 1e-12;
  });
  const GridPtr g = fixture().grid;
  t.check("newtonian_kernel of zero", [&](std::string&) {
    return sup(newtonian_kernel(RadialField::zeros(g, OriginClass::vanishes_like_r2, TailClass::exponential))
                   .values()) == 0.0;
  });
  t.check("newtonian_kernel non-increasing for f >= 0", [&](std::string&) {
    const Vector v = sample(*g, [](double r) { return r * r * std::exp(-r); });
    const Vector k = newtonian_kernel(RadialField(g, v, OriginClass::vanishes_like_r2, TailClass::exponential)).values();
    for (int i = 1; i < k.size(); ++i)
      if (k[i] > k[i - 1]) return false;
    return true;
  });
  t.check("differentiate constant", [&](std::string& d) {
    // Uniform spacing: on the graded grid the first stencils carry weights of
    // order 1/h_min and rounding alone reaches 1e-12.
    const RadialField f(uni, Vector::Constant(uni->size(), 3.5), OriginClass::finite_limit, TailClass::zero);
    const double e = sup(differentiate(f).values());
    d = "err " + num(e);
    return e < 1e-12;
  });
  t.check("differentiate r^2 on interior nodes", [&](std::string& d) {
    const Vector v = sample(*g, [](double r) { return r * r; });
    const Vector df = differentiate(RadialField(g, v, OriginClass::finite_limit, TailClass::zero)).values();
    const int n = g->size();
    const Vector want = 2.0 * g->nodes();
    const double e = sup((df - want).segment(1, n - 2)) / sup(want);
    d = "rel err " + num(e);
    return e < 1e-12;
  });
  t.check("norms: tau = 0 gives x_tau = 0", [&](std::string&) {
    const auto& s = fixture().sol;
    return norms(s.phi0, s.chi0, RadialField::zeros(g, OriginClass::finite_limit, TailClass::inverse_r)).x_tau == 0.0;
  });
  t.check("pointwise bound of zero", [&](std::string&) {
    const PointwiseBound b = pointwise_bound_check(RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::zero));
    return b.pass && b.worst_ratio == 0.0;
  });
  t.check("pointwise bound of rho = r is degenerate", [&](std::string&) {
    const PointwiseBound b =
        pointwise_bound_check(RadialField(g, g->nodes(), OriginClass::vanishes_like_r, TailClass::zero));
    return b.pass && b.degenerate;
  });
}

void choquard_checks(Suite& t) {
  const auto& s = fixture().sol;
  const GridPtr g = fixture().grid;
  t.check("ground state is non-trivial", [&](std::string& d) {
    d = "mass integral " + num(s.mass_integral);
    return s.mass_integral > 0.0;
  });
  t.check("derive_chi of c r vanishes", [&](std::string& d) {
    // A linearly growing phi has no decaying continuation beyond r_max, so
    // the rows whose outward-shifted stencils reach past it are left out.
    const RadialField phi(g, 0.7 * g->nodes(), OriginClass::vanishes_like_r, TailClass::zero);
    const int reach = RadialGrid::kStencilWidth / 2 + 1;
    const double e = sup(derive_chi(phi, kMass).values().head(g->size() - reach));
    d = "sup " + num(e);
    return e < 1e-12;
  });
  t.check("derive_chi routes agree", [&](std::string& d) {
    const double e = sup(derive_chi(s.phi0, kMass).values() - derive_chi_from_quotient(s.phi0, kMass).values());
    d = "sup diff " + num(e);
    return e < 1e-12;
  });
  t.check("derive_tau of zero", [&](std::string&) {
    return sup(derive_tau(RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential), kMass)
                   .values()) == 0.0;
  });
  t.check("tau(0+) = 8 pi m int phi^2 / s", [&](std::string& d) {
    const Vector q = sample(*g, [&](double r) { return s.phi0.evaluate(r) * s.phi0.evaluate(r) / r; });
    const double want = 8.0 * kPi * kMass * integrate(*g, q, OriginClass::vanishes_like_r);
    const double e = std::abs(s.tau0.evaluate(0.0) - want) / want;
    d = "rel err " + num(e);
    return std::isfinite(s.tau0.evaluate(0.0)) && e < 1e-6;
  });
  t.check("choquard residual of zero", [&](std::string&) {
    return choquard_residual(RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential), kMass) ==
           0.0;
  });
  t.check("choquard residual of 2 phi0 is positive", [&](std::string& d) {
    const double r = choquard_residual(s.phi0.with_values(2.0 * s.phi0.values()), kMass);
    d = "residual " + num(r);
    return r > 1e-3;
  });
}

void linearized_checks(Suite& t) {
  const auto& s = fixture().sol;
  const GridPtr g = fixture().grid;
  const int n = g->size();
  t.check("L symmetric in the weak L2(R^3) form", [&](std::string& d) {
    // Matrix entries of the one-sided stencils are not symmetric; the bilinear
    // form on smooth profiles is, up to truncation error.
    GridPtr fine = RadialGrid::build(1000, default_r_max(kMass));
    const LinearOperator L = assemble_linearized_choquard(solve_ground_state(kMass, fine));
    const Vector& r = fine->nodes();
    const int nf = fine->size();
    Vector u(nf), v(nf);
    for (int i = 0; i < nf; ++i) {
      u[i] = r[i] * std::exp(-r[i] * r[i] / 8.0);
      v[i] = r[i] * (1.0 + r[i]) * std::exp(-0.7 * r[i]);
    }
    u[nf - 1] = v[nf - 1] = 0.0;
    Vector lu = L.apply(u), lv = L.apply(v);
    lu[nf - 1] = lv[nf - 1] = 0.0;
    const Vector& w = fine->weights(OriginClass::vanishes_like_r2);
    const double a = w.dot(u.cwiseProduct(lv)), b = w.dot(lu.cwiseProduct(v));
    const double rel = std::abs(a - b) / std::abs(a);
    d = "weak rel " + num(rel) + ", matrix asymmetry " + num(weighted_asymmetry(L));
    return rel < 1e-9;
  });
  t.check("free operator spectrum >= 2m", [&](std::string& d) {
    const LinearOperator L0 =
        assemble_linearized_choquard(RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential), kMass);
    const double sv = smallest_singular_value(L0);
    d = "smallest singular value " + num(sv);
    return sv >= 2.0 * kMass * (1.0 - 1e-6);
  });
  t.check("V reproduces the eps = 0 L1 row", [&](std::string& d) {
    // With tau = 0 the phi rows of V are L1 at eps = 0 minus the coupling
    // term, which moves to the right side.
    const LinearOperator V = assemble_V(kMass, g);
    Vector x(2 * n);
    x << s.phi0.values(), s.chi0.values();
    const Vector vx = V.apply(x);
    const Vector res = residual_D(base_state(s)).stacked;
    const Vector moved = kMass * s.tau0.values().cwiseProduct(s.phi0.values()).cwiseQuotient(g->nodes());
    const double scale = sup(moved);
    const double e1 = sup((vx.head(n) - res.head(n)).head(n - 1)) / scale;
    const double e2 = sup((vx.segment(n, n) - res.segment(n, n) - moved).head(n - 1)) / scale;
    d = "rel err " + num(e1) + ", " + num(e2);
    return e1 < 1e-12 && e2 < 1e-12;
  });
  t.check("V(0,0) = 0", [&](std::string&) { return sup(assemble_V(kMass, g).apply(Vector::Zero(2 * n))) == 0.0; });
  t.check("W(0,0,0) = 0", [&](std::string&) { return sup(assemble_W(s).apply(Vector::Zero(3 * n))) == 0.0; });
  t.check("S(0) = 0", [&](std::string&) {
    const LinearOperator S = assemble_S(s);
    return sup(S.apply(Vector::Zero(S.size()))) == 0.0;
  });
  t.check("D'(0,0,0) = 0", [&](std::string&) { return sup(assemble_D_prime(s).apply(Vector::Zero(3 * n))) == 0.0; });
  t.check("identity operator certificate is 1", [&](std::string& d) {
    std::vector<LinearOperator> ladder;
    for (int m : {32, 64, 128}) ladder.push_back(identity_operator(RadialGrid::build(m, 10.0)));
    const SpectrumReport rep = nondegeneracy_report(ladder);
    double e = 0.0;
    for (double v : rep.ladder_values) e = std::max(e, std::abs(v - 1.0));
    d = "max |sigma - 1| " + num(e);
    return e < 1e-9 && rep.stable_under_refinement;
  });
  const LinearOperator D = assemble_D_prime(s);
  t.check("solve_linear of zero", [&](std::string&) { return sup(solve_linear(D, Vector::Zero(3 * n))) == 0.0; });
  t.check("solve_linear round trip on D'", [&](std::string& d) {
    Vector x(3 * n);
    const Vector& r = g->nodes();
    for (int i = 0; i < n; ++i) {
      x[i] = r[i] * std::exp(-0.3 * r[i]) * std::cos(r[i]);
      x[n + i] = r[i] * r[i] * std::exp(-0.4 * r[i]);
      x[2 * n + i] = 1.0 / (1.0 + r[i]);
    }
    const double e = sup(solve_linear(D, D.apply(x)) - x) / sup(x);
    d = "rel err " + num(e);
    return e < 1e-10;
  });
}

void einstein_dirac_checks(Suite& t) {
  const auto& s = fixture().sol;
  const GridPtr g = fixture().grid;
  const int n = g->size();
  const PerturbedState base = base_state(s);
  const PerturbedState zero{kMass, 0.0, RadialField::zeros(g, OriginClass::vanishes_like_r, TailClass::exponential),
                            RadialField::zeros(g, OriginClass::vanishes_like_r2, TailClass::exponential),
                            RadialField::zeros(g, OriginClass::finite_limit, TailClass::inverse_r)};
  t.check("metric A at eps = 0 is 1", [&](std::string&) {
    return (metric_A(base).values().array() == 1.0).all();
  });
  t.check("K terms vanish at eps = 0", [&](std::string&) {
    const KTerms k = k_terms(base);
    return sup(k.K1.values()) == 0.0 && sup(k.K2.values()) == 0.0 && sup(k.K3.values()) == 0.0;
  });
  t.check("residual of the zero state at eps = 0", [&](std::string&) {
    return sup(residual_D(zero).stacked) == 0.0;
  });
  t.check("jacobian at eps = 0 equals D'", [&](std::string& d) {
    const Matrix a = jacobian(base).dense(), b = assemble_D_prime(s).dense();
    const double e = (a - b).cwiseAbs().maxCoeff() / b.cwiseAbs().maxCoeff();
    d = "rel diff " + num(e);
    return e < 1e-12;
  });
  t.check("dL1/dtau with phi' = 0 is eps (m - eps) chi / r", [&](std::string& d) {
    const double eps = 0.01 * kMass;
    const PerturbedState st{kMass, eps, zero.phi, s.chi0, s.tau0};
    const Vector& r = g->nodes();
    const Vector h3 = sample(*g, [](double x) { return std::exp(-0.2 * x); });
    Vector dir = Vector::Zero(3 * n);
    dir.tail(n) = h3;
    const Vector jd = jacobian(st).apply(dir);
    const Vector want = eps * (kMass - eps) * h3.cwiseProduct(s.chi0.values()).cwiseQuotient(r);
    const double e = sup((jd.head(n) - want).head(n - 1)) / sup(want);
    d = "rel err " + num(e);
    return e < 1e-12;
  });
  t.check("positivity failure is reported", [&](std::string& d) {
    SolverConfig cfg;
    cfg.delta_A = 0.999;
    try {
      newton_correct(0.2 * kMass, base.with_eps(0.2 * kMass), base, cfg);
    } catch (const NewtonError& e) {
      d = to_string(e.reason);
      return e.reason == NewtonFailure::positivity;
    } catch (const PositivityError& e) {
      d = e.what();
      return true;
    }
    return false;
  });
  t.check("branch stop reason is a contract value", [&](std::string& d) {
    SolverConfig cfg;
    cfg.initial_step = 0.1;
    cfg.max_step = 0.5;
    const Branch br = continue_branch(0.01 * kMass, cfg, s);
    d = br.stop_reason;
    return br.stop_reason == "eps_max" || br.stop_reason == "positivity wall";
  });
  t.check("unrescale: amplitudes vanish as eps -> 0", [&](std::string& d) {
    // Both amplitudes scale like sqrt(eps) to leading order.
    double last_adm = 0.0, last_phi = 0.0, worst = 0.0;
    for (double e : {1e-2, 1e-4, 1e-6, 1e-8}) {
      const PhysicalSolution ps = unrescale(base.with_eps(e * kMass));
      const double a = ps.adm_mass, p = sup(ps.Phi1) + sup(ps.Phi2);
      if (last_adm > 0.0) worst = std::max({worst, std::abs(last_adm / a / 10.0 - 1.0), std::abs(last_phi / p / 10.0 - 1.0)});
      last_adm = a;
      last_phi = p;
    }
    d = "adm " + num(last_adm) + ", sup Phi " + num(last_phi) + ", ratio deviation " + num(worst);
    return worst < 0.05 && last_adm < 1e-3;
  });
  const PhysicalSolution vac = unrescale(base);
  t.check("physical residual of the vacuum", [&](std::string&) {
    const PhysicalResidual pr = physical_residual(vac, kMass);
    return pr.norms[0] == 0.0 && pr.norms[1] == 0.0 && pr.norms[2] == 0.0 && pr.norms[3] == 0.0;
  });
  t.check("vacuum diagnostics", [&](std::string&) {
    const Diagnostics dg = diagnostics(vac);
    return std::abs(dg.condQ_margin - 1.0 / (16.0 * kPi * kMass)) < 1e-15 && dg.norm_integral == 0.0 &&
           dg.adm_from_metric == 0.0;
  });
  t.check("normalization target 0 is rejected", [&](std::string&) {
    try {
      normalized_solution(0.01, 0.0, SolverConfig{});
    } catch (const ParameterError&) {
      return true;
    }
    return false;
  });
}

void cli_io_checks(Suite& t) {
  t.check("minimal config applies defaults", [](std::string& d) {
    const RunConfig c = parse_config_text("m = 0.5\n");
    d = "r_max " + num(c.r_max());
    return std::abs(c.r_max() - 30.0) < 1e-12 && c.grid.n_nodes == 2000 && std::abs(c.eps_max - 0.05) < 1e-15;
  });
  t.check("eps_max \"0.1m\" resolves to 0.05", [](std::string&) {
    return std::abs(parse_config_text("m = 0.5\neps_max = \"0.1m\"\n").eps_max - 0.05) < 1e-15;
  });
  t.check("grid.n_nodes = 4 is rejected", [](std::string& d) {
    try {
      parse_config_text("m = 0.5\ngrid.n_nodes = 4\n");
    } catch (const ConfigError& e) {
      d = e.what();
      return e.line == 2;
    }
    return false;
  });
  t.check("unwritable output directory exits 3", [](std::string&) {
    const fs::path d = scratch_dir("blocked");
    std::ofstream(d / "file") << "x";
    RunConfig c;
    c.outputs = (d / "file" / "out").string();
    std::ostringstream sink;
    const int code = run(c, sink);
    fs::remove_all(d);
    return code == exit_config;
  });
  t.check("single-point branch gives single-row plot files", [](std::string&) {
    const auto& s = fixture().sol;
    const PerturbedState b = base_state(s);
    Branch br;
    br.points.push_back(make_branch_point(b, 0, {0.0, 0.0, 0.0}));
    const fs::path d = scratch_dir("plot");
    emit_plotdata(br, d.string());
    const bool ok = count_lines(d / "plot_branch.csv") == 2 &&
                    first_line(d / "plot_branch.csv") == "eps,omega,adm_mass,norm_integral" &&
                    first_line(d / "plot_profiles.csv") == "eps,r,Phi1,Phi2,A_minus_1,T_minus_1";
    fs::remove_all(d);
    return ok;
  });
}

}  // namespace

int run_selftest(std::ostream& log) {
  const auto t0 = std::chrono::steady_clock::now();
  Suite t(log);
  radial_core_checks(t);
  choquard_checks(t);
  linearized_checks(t);
  einstein_dirac_checks(t);
  cli_io_checks(t);
  log << t.failures() << " failure(s) in "
      << std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() << " s\n";
  return t.failures();
}

}  // namespace edsolve
