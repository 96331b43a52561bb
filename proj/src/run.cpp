#include "edsolve/cli_io.hpp"
#include "edsolve/linearized.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <ostream>
#include <random>

namespace edsolve {

std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

namespace {

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

void write_csv(const fs::path& path, const std::vector<std::string>& header, const std::vector<std::vector<double>>& rows) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  for (size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
  out << '\n';
  for (const auto& row : rows) {
    for (size_t j = 0; j < row.size(); ++j) out << (j ? "," : "") << format_double(row[j]);
    out << '\n';
  }
  if (!out.flush()) throw ConfigError("write to '" + path.string() + "' failed");
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write '" + path.string() + "'");
  out << j.dump(2) << '\n';
}

std::string eps_label(double eps) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.12g", eps);
  return buf;
}

json spectrum_json(const SpectrumReport& r) {
  json j;
  j["smallest_singular_value"] = r.smallest_singular_value;
  j["smallest_abs_eigenvalue"] = r.smallest_abs_eigenvalue ? json(*r.smallest_abs_eigenvalue) : json(nullptr);
  j["grid_size"] = r.grid_size;
  j["stable_under_refinement"] = r.stable_under_refinement;
  j["ladder_sizes"] = r.ladder_sizes;
  j["ladder_values"] = r.ladder_values;
  return j;
}

std::vector<int> ladder_sizes(int n) {
  std::vector<int> out{std::max(16, n / 4), std::max(16, n / 2), n};
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

// Weak symmetry <u, L v> - <L u, v> in L^2(R^3) on two smooth profiles that
// vanish at r_max; the boundary row is excluded.
double weak_asymmetry(const LinearOperator& L) {
  const RadialGrid& g = *L.grid;
  const int n = g.size();
  const Vector& r = g.nodes();
  const double scale = g.r_max() / 30.0;
  Vector u(n), v(n);
  for (int i = 0; i < n; ++i) {
    const double x = r[i] / scale;
    u[i] = x * std::exp(-x * x / 8.0);
    v[i] = x * (1.0 + x) * std::exp(-0.7 * x);
  }
  u[n - 1] = v[n - 1] = 0.0;
  Vector lu = L.apply(u), lv = L.apply(v);
  lu[n - 1] = lv[n - 1] = 0.0;
  const Vector& w = g.weights(OriginClass::vanishes_like_r2);
  const double a = w.dot(u.cwiseProduct(lv)), b = w.dot(lu.cwiseProduct(v));
  return std::abs(a - b) / std::max(std::abs(a), std::abs(b));
}

// Smooth random direction with the origin behaviour of (phi, chi, tau).
Vector random_direction(const RadialGrid& g, std::mt19937& rng) {
  std::normal_distribution<double> nd;
  const int n = g.size();
  const Vector& r = g.nodes();
  const double scale = g.r_max() / 30.0;
  double c[6];
  for (double& x : c) x = nd(rng);
  Vector d(3 * n);
  for (int i = 0; i < n; ++i) {
    const double x = r[i] / scale, e = std::exp(-x * x / 8.0);
    d[i] = x * (c[0] + c[1] * x) * e;
    d[n + i] = x * x * (c[2] + c[3] * x) * e;
    d[2 * n + i] = (c[4] + c[5] * x) * e;
  }
  return d;
}

// Largest per-block relative Y-norm mismatch between J d and the
// Richardson-combined central differences at h and h / 10.
double fd_mismatch(const PerturbedState& s, const LinearOperator& J, const Vector& d, double delta_A) {
  const RadialGrid& g = s.grid();
  const Vector x = s.stacked();
  auto central = [&](double h) {
    return Vector((residual_D(s.with_stacked(x + h * d), delta_A).stacked -
                   residual_D(s.with_stacked(x - h * d), delta_A).stacked) /
                  (2.0 * h));
  };
  const Vector fd = (100.0 * central(1e-5) - central(1e-4)) / 99.0;
  const Vector jd = J.apply(d);
  const auto nj = residual_norms(g, jd), ne = residual_norms(g, fd - jd);
  double worst = 0.0;
  for (int b = 0; b < 3; ++b) worst = std::max(worst, nj[b] > 0.0 ? ne[b] / nj[b] : ne[b]);
  return worst;
}

json jacobian_certificate(const ChoquardSolution& sol, const ChoquardSolution& coarse, double delta_A) {
  json j;
  const double m = sol.m;
  std::mt19937 rng(20161016u);
  const PerturbedState base = base_state(sol);
  json checks = json::array();
  double worst = 0.0;
  for (double f : {0.0, 0.01, 0.05}) {
    const PerturbedState s = base.with_eps(f * m);
    const LinearOperator J = jacobian(s, delta_A);
    json row;
    row["eps_over_m"] = f;
    json mism = json::array();
    for (int k = 0; k < 5; ++k) {
      const double e = fd_mismatch(s, J, random_direction(s.grid(), rng), delta_A);
      worst = std::max(worst, e);
      mism.push_back(e);
    }
    row["relative_mismatch"] = mism;
    checks.push_back(row);
  }
  j["finite_difference"] = checks;
  j["max_relative_mismatch"] = worst;
  // Entrywise comparison is dense, so it runs on the coarse grid.
  const Matrix a = jacobian(base_state(coarse), delta_A).dense();
  const Matrix b = assemble_D_prime(coarse).dense();
  j["eps0_vs_D_prime"] = {{"grid_size", coarse.grid().size()},
                          {"max_abs_difference", (a - b).cwiseAbs().maxCoeff()},
                          {"max_abs_entry", b.cwiseAbs().maxCoeff()},
                          {"relative_difference", (a - b).cwiseAbs().maxCoeff() / b.cwiseAbs().maxCoeff()}};
  return j;
}

json scaling_certificate(const RunConfig& cfg) {
  const std::array<double, 3> masses{0.5, 1.0, 2.0};
  std::vector<ChoquardSolution> sols;
  for (double m : masses)
    sols.push_back(solve_ground_state(
        m, RadialGrid::build(cfg.grid.n_nodes, default_r_max(m), cfg.grid.grading_exponent), cfg.choquard));
  // v_m(y) = sqrt(m) u0_m(y / sqrt(2m)) on the y-nodes of the m = 1/2 grid.
  const Vector& y = sols[0].grid().nodes();
  std::vector<RadialField> u;
  for (const auto& s : sols) u.push_back(s.u0());
  auto v = [&](int k, double yy) { return std::sqrt(masses[k]) * u[k].evaluate(yy / std::sqrt(2.0 * masses[k])); };
  json j;
  j["masses"] = masses;
  double worst = 0.0, peak = 0.0;
  for (int i = 0; i < y.size(); ++i) {
    const double ref = v(0, y[i]);
    peak = std::max(peak, std::abs(ref));
    for (int k = 1; k < 3; ++k) worst = std::max(worst, std::abs(v(k, y[i]) - ref));
  }
  j["sup_difference"] = worst;
  j["sup_reference"] = peak;
  j["pass"] = worst < 1e-6;
  return j;
}

json s_decay_certificate(const ChoquardSolution& coarse) {
  const Vector sv = h1_singular_values(assemble_S(coarse));
  const int n = coarse.grid().size();
  const int k0 = n / 10;  // 0-based index of the first k > 0.1 N (1-based)
  double worst = 0.0;
  for (int k = k0; k < sv.size(); ++k) worst = std::max(worst, sv[k] / sv[0]);
  json j;
  j["grid_size"] = n;
  j["sigma_1"] = sv[0];
  j["first_index_checked"] = k0 + 1;
  j["max_ratio_beyond"] = worst;
  j["pass"] = worst < 0.01;
  std::vector<double> head;
  for (int k = 0; k < std::min<int>(20, sv.size()); ++k) head.push_back(sv[k]);
  j["leading_values"] = head;
  return j;
}

json branch_summary(const Branch& br) {
  json j;
  j["stop_reason"] = br.stop_reason;
  j["points"] = br.points.size();
  j["eps_reached"] = br.points.empty() ? 0.0 : br.points.back().eps;
  j["base_polish_shift"] = br.base_polish_shift;
  int iters = 0, rejected = 0;
  double res = 0.0, phys = 0.0, adm_gap = 0.0;
  for (const auto& p : br.points) {
    iters = std::max(iters, p.newton_iters);
    for (double x : p.residual_norms) res = std::max(res, x);
    for (double x : p.physical_res.norms) phys = std::max(phys, x);
    adm_gap = std::max(adm_gap, p.diag.adm_relative_gap);
  }
  for (const auto& e : br.log) rejected += e.accepted ? 0 : 1;
  j["rejected_steps"] = rejected;
  j["max_newton_iterations"] = iters;
  j["max_rescaled_residual"] = res;
  j["max_physical_residual"] = phys;
  j["max_adm_relative_gap"] = adm_gap;
  try {
    const DepartureFit fit = departure_slope(br);
    j["departure_slope"] = {{"slope", fit.slope}, {"points", fit.points}, {"eps_first", fit.eps_first},
                            {"eps_last", fit.eps_last}};
  } catch (const ParameterError& e) {
    j["departure_slope"] = {{"error", e.what()}};
  }
  return j;
}

bool row_is_valid(const BranchPoint& p, double delta_A) {
  return p.diag.condQ_margin > 0.0 && p.diag.min_A >= delta_A;
}

class Pipeline {
 public:
  Pipeline(const RunConfig& cfg, std::ostream& log) : cfg_(cfg), log_(log), dir_(cfg.outputs) {}

  int execute() {
    const auto t0 = Clock::now();
    cert_["status"] = "running";
    cert_["config"] = {{"m", cfg_.m},
                       {"eps_max", cfg_.eps_max},
                       {"n_nodes", cfg_.grid.n_nodes},
                       {"r_max", cfg_.r_max()},
                       {"grading_exponent", cfg_.grid.grading_exponent},
                       {"delta_A", cfg_.solver.delta_A}};
    try {
      solve();
      continuation();
      if (wants("certificates")) certificates();
    } catch (const ConvergenceError& e) {
      return fail(exit_convergence, std::string("convergence failure: ") + e.what());
    } catch (const PositivityError& e) {
      return fail(exit_convergence, std::string("positivity failure: ") + e.what());
    } catch (const SingularOperatorError& e) {
      return fail(exit_convergence, std::string("singular operator: ") + e.what());
    } catch (const ParameterError& e) {
      return fail(exit_config, std::string("invalid parameters: ") + e.what());
    }
    const bool underflow = branch_ && branch_->stop_reason == "step underflow";
    cert_["status"] = underflow ? "convergence failure: step underflow" : "ok";
    flush_certificates();
    log_ << "done in " << seconds_since(t0) << " s\n";
    return underflow ? exit_convergence : exit_ok;
  }

 private:
  bool wants(const char* what) const { return cfg_.emit.count(what) > 0; }

  int fail(int code, const std::string& status) {
    log_ << "error: " << status << "\n";
    cert_["status"] = status;
    try {
      flush_certificates(true);
    } catch (const std::exception& e) {
      log_ << "error: could not write certificates: " << e.what() << "\n";
    }
    return code;
  }

  // A failed run always leaves its status behind.
  void flush_certificates(bool force = false) {
    if (force || wants("certificates")) write_json(dir_ / "certificates.json", cert_);
  }

  void solve() {
    const auto t0 = Clock::now();
    grid_ = RadialGrid::build(cfg_.grid.n_nodes, cfg_.r_max(), cfg_.grid.grading_exponent);
    sol_ = std::make_unique<ChoquardSolution>(solve_ground_state(cfg_.m, grid_, cfg_.choquard));
    const ChoquardSolution& s = *sol_;
    log_ << "ground state: lambda " << s.lambda_scf << ", residual " << s.residual_norm << ", " << s.scf_iterations
         << " SCF + " << s.newton_iterations << " Newton iterations (" << seconds_since(t0) << " s)\n";
    cert_["choquard"] = {{"lambda", s.lambda_scf},
                         {"residual", s.residual_norm},
                         {"mass_integral", s.mass_integral},
                         {"scf_iterations", s.scf_iterations},
                         {"newton_iterations", s.newton_iterations},
                         {"positivity_projections", s.positivity_projections}};
    if (wants("profiles")) {
      const Vector& r = grid_->nodes();
      const Vector u0 = s.u0().values();
      std::vector<std::vector<double>> rows;
      for (int i = 0; i < r.size(); ++i) rows.push_back({r[i], s.phi0[i], s.chi0[i], s.tau0[i], u0[i]});
      write_csv(dir_ / "choquard_profile.csv", {"r", "phi0", "chi0", "tau0", "u0"}, rows);
    }
  }

  void continuation() {
    const auto t0 = Clock::now();
    branch_ = std::make_unique<Branch>(continue_branch(cfg_.eps_max, cfg_.solver, *sol_));
    const Branch& br = *branch_;
    log_ << "branch: " << br.points.size() << " points up to eps = " << br.points.back().eps << ", stop reason '"
         << br.stop_reason << "' (" << seconds_since(t0) << " s)\n";
    cert_["branch"] = branch_summary(br);

    std::vector<std::vector<double>> rows;
    int dropped = 0;
    for (const auto& p : br.points) {
      if (!row_is_valid(p, cfg_.solver.delta_A)) {
        ++dropped;
        log_ << "warning: dropping branch point eps = " << p.eps << " (condQ or A floor violated)\n";
        continue;
      }
      const auto& pr = p.physical_res.norms;
      rows.push_back({p.eps, p.physical.omega, p.physical.adm_mass, p.physical.norm_integral, p.diag.condQ_margin,
                      p.diag.min_A, static_cast<double>(p.newton_iters), p.residual_norms[0], p.residual_norms[1],
                      p.residual_norms[2], pr[0], pr[1], pr[2], pr[3]});
    }
    cert_["branch"]["dropped_rows"] = dropped;
    if (wants("branch")) {
      write_csv(dir_ / "branch.csv",
                {"eps", "omega", "adm_mass", "norm_integral", "condQ_margin", "min_A", "newton_iters", "res_phi",
                 "res_chi", "res_tau", "phys_res_1", "phys_res_2", "phys_res_3", "phys_res_4"},
                rows);
      emit_plotdata(br, dir_.string());
    }
    if (wants("profiles")) {
      for (const auto& p : br.points) {
        if (!row_is_valid(p, cfg_.solver.delta_A)) continue;
        const PhysicalSolution& ps = p.physical;
        const Vector& r = ps.grid->nodes();
        std::vector<std::vector<double>> prof;
        for (int i = 0; i < r.size(); ++i)
          prof.push_back({r[i], ps.Phi1[i], ps.Phi2[i], 1.0 + ps.t_field[i], ps.A_field[i]});
        write_csv(dir_ / ("profile_eps_" + eps_label(p.eps) + ".csv"), {"r", "Phi1", "Phi2", "T", "A"}, prof);
      }
    }
  }

  void certificates() {
    auto t0 = Clock::now();
    const std::vector<int> sizes = ladder_sizes(cfg_.grid.n_nodes);
    std::vector<ChoquardSolution> sols;
    for (int n : sizes) {
      if (n == cfg_.grid.n_nodes) {
        sols.push_back(*sol_);
      } else {
        sols.push_back(solve_ground_state(
            cfg_.m, RadialGrid::build(n, cfg_.r_max(), cfg_.grid.grading_exponent), cfg_.choquard));
      }
    }
    std::vector<LinearOperator> L, V, W, D;
    for (const auto& s : sols) {
      L.push_back(assemble_linearized_choquard(s));
      V.push_back(assemble_V(s.m, s.grid_ptr()));
      W.push_back(assemble_W(s));
      D.push_back(assemble_D_prime(s));
    }
    json spectra;
    spectra["L"] = spectrum_json(nondegeneracy_report(L));
    spectra["V"] = spectrum_json(nondegeneracy_report(V));
    spectra["W"] = spectrum_json(nondegeneracy_report(W));
    spectra["D_prime"] = spectrum_json(nondegeneracy_report(D));
    spectra["L_symmetry"] = {{"weak_form_relative", weak_asymmetry(L.back())},
                          {"weighted_matrix_asymmetry", weighted_asymmetry(L.back())}};
    spectra["S_decay"] = s_decay_certificate(sols.front());
    cert_["spectra"] = spectra;
    log_ << "spectral certificates (" << seconds_since(t0) << " s)\n";
    flush_certificates();

    if (wants("matrices")) {
      const fs::path mdir = dir_ / "matrices";
      fs::create_directories(mdir);
      const ChoquardSolution& c = sols.front();
      dump_matrix(L.front(), (mdir / "L").string());
      dump_matrix(V.front(), (mdir / "V").string());
      dump_matrix(W.front(), (mdir / "W").string());
      dump_matrix(assemble_S(c), (mdir / "S").string());
      dump_matrix(D.front(), (mdir / "D_prime").string());
    }

    t0 = Clock::now();
    cert_["jacobian"] = jacobian_certificate(*sol_, sols.front(), cfg_.solver.delta_A);
    log_ << "jacobian check (" << seconds_since(t0) << " s)\n";
    t0 = Clock::now();
    cert_["scaling_law"] = scaling_certificate(cfg_);
    log_ << "scaling law check (" << seconds_since(t0) << " s)\n";
  }

  const RunConfig& cfg_;
  std::ostream& log_;
  fs::path dir_;
  json cert_;
  GridPtr grid_;
  std::unique_ptr<ChoquardSolution> sol_;
  std::unique_ptr<Branch> branch_;
};

}  // namespace

void emit_plotdata(const Branch& branch, const std::string& dir) {
  if (branch.points.empty()) throw ParameterError("emit_plotdata needs a nonempty branch");
  const fs::path d(dir);
  std::vector<std::vector<double>> rows;
  for (const auto& p : branch.points)
    rows.push_back({p.eps, p.physical.omega, p.physical.adm_mass, p.physical.norm_integral});
  write_csv(d / "plot_branch.csv", {"eps", "omega", "adm_mass", "norm_integral"}, rows);

  // Three samples spread over the points with eps > 0 (all points if none).
  std::vector<const BranchPoint*> pool;
  for (const auto& p : branch.points)
    if (p.eps > 0.0) pool.push_back(&p);
  if (pool.empty())
    for (const auto& p : branch.points) pool.push_back(&p);
  std::vector<size_t> picks;
  for (int k = 0; k < 3; ++k) picks.push_back((pool.size() - 1) * k / 2);
  picks.erase(std::unique(picks.begin(), picks.end()), picks.end());

  std::vector<std::vector<double>> prof;
  for (size_t i : picks) {
    const PhysicalSolution& ps = pool[i]->physical;
    const Vector& r = ps.grid->nodes();
    for (int j = 0; j < r.size(); ++j)
      prof.push_back({ps.eps, r[j], ps.Phi1[j], ps.Phi2[j], ps.A_field[j] - 1.0, ps.t_field[j]});
  }
  write_csv(d / "plot_profiles.csv", {"eps", "r", "Phi1", "Phi2", "A_minus_1", "T_minus_1"}, prof);
}

int run(const RunConfig& cfg, std::ostream& log) {
  try {
    cfg.validate();
    ensure_writable_directory(cfg.outputs);
  } catch (const ParameterError& e) {
    log << "error: " << e.what() << "\n";
    return exit_config;
  }
  Pipeline p(cfg, log);
  return p.execute();
}

}  // namespace edsolve
