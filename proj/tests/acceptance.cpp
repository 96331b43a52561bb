// Acceptance run: one PASS/FAIL line per criterion. Criteria known to fail
// are declared with --known-failure k; the exit status is 0 only when the
// failing set equals the declared set.

#include "edsolve/cli_io.hpp"
#include "edsolve/linearized.hpp"
#include "shooting_oracle.hpp"

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <iostream>
#include <random>
#include <set>
#include <sstream>
#include <string>

#include <unistd.h>

using namespace edsolve;
namespace fs = std::filesystem;

namespace {

constexpr double kM = 0.5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

const ChoquardSolution& ground(double m, int n) {
  static std::map<std::pair<double, int>, ChoquardSolution> cache;
  auto it = cache.find({m, n});
  if (it == cache.end()) it = cache.emplace(std::make_pair(m, n), solve_ground_state(m, RadialGrid::build(n, default_r_max(m)))).first;
  return it->second;
}

const Branch& main_branch() {
  static const Branch br = continue_branch(0.05 * kM, SolverConfig{}, ground(kM, 2000));
  return br;
}

// ---- 1 -------------------------------------------------------------------

Outcome kernel_oracle() {
  std::mt19937 rng(1);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst = 0.0;
  for (int trial = 0; trial < 5; ++trial) {
    const GridPtr g = RadialGrid::build(400, 10.0 + 5.0 * trial);
    const int n = g->size();
    const Vector& r = g->nodes();
    const double support = 0.3 * g->r_max() + 0.4 * g->r_max() * u(rng);
    Vector f(n);
    for (int i = 0; i < n; ++i) f[i] = r[i] < support ? r[i] * r[i] * u(rng) : 0.0;
    const Vector seg_f = g->segment_matrix(OriginClass::vanishes_like_r2) * f;
    const Vector seg_q = g->segment_matrix(OriginClass::vanishes_like_r) * f.cwiseQuotient(r);
    const Vector k = newtonian_kernel(RadialField(g, f, OriginClass::vanishes_like_r2, TailClass::zero)).values();
    for (int i = 0; i < n; ++i) {
      double direct = 0.0;
      for (int j = 0; j < n; ++j) direct += j <= i ? seg_f[j] / r[i] : seg_q[j];
      worst = std::max(worst, std::abs(direct - k[i]) / std::abs(direct));
    }
  }
  // Uniform ball f = s^2 on (0, 1]; the grid ends at the support edge.
  const GridPtr b = RadialGrid::build(2000, 1.0);
  const RadialField kb = newtonian_kernel(RadialField(b, b->nodes().cwiseAbs2(), OriginClass::vanishes_like_r2, TailClass::zero));
  double ball = 0.0;
  for (double r : {1.0, 1.25, 2.0, 5.0, 20.0, 100.0}) ball = std::max(ball, std::abs(kb.evaluate(r) * 3.0 * r - 1.0));
  return {worst < 1e-12 && ball < 1e-8, "double-loop rel " + fmt("%.2e", worst) + ", ball rel " + fmt("%.2e", ball)};
}

// ---- 2 -------------------------------------------------------------------

Outcome ground_state_check() {
  const ChoquardSolution& s = ground(kM, 2000);
  const Vector u = s.u0().values();
  bool shape = true;
  for (int i = 0; i < u.size(); ++i) shape = shape && u[i] > 0.0 && (i == 0 || u[i] <= u[i - 1]);
  const edsolve::testing::ShootingOracle oracle(kM);
  double err = 0.0;
  for (int i = 0; i < u.size(); ++i) err = std::max(err, std::abs(u[i] - oracle.u0(s.grid().node(i))));
  const double res = choquard_residual(s.phi0, kM);
  return {res < 1e-10 && err < 1e-6 && shape,
          "residual " + fmt("%.2e", res) + ", shooting sup " + fmt("%.2e", err) + (shape ? ", positive and monotone" : ", SHAPE VIOLATED")};
}

// ---- 3 -------------------------------------------------------------------

Outcome scaling_law() {
  // v_m(y) = sqrt(m) u0_m(y / sqrt(2m)) on the m = 1/2 nodes, where y = x.
  const ChoquardSolution& ref = ground(0.5, 2000);
  const Vector uref = ref.u0().values();
  double worst = 0.0;
  for (double m : {1.0, 2.0}) {
    const RadialField um = ground(m, 2000).u0();
    const double rmax_y = um.grid().r_max() * std::sqrt(2.0 * m);
    for (int i = 0; i < uref.size(); ++i) {
      const double y = ref.grid().node(i);
      if (y > rmax_y) break;
      const double v = std::sqrt(m) * um.evaluate(y / std::sqrt(2.0 * m));
      worst = std::max(worst, std::abs(v - std::sqrt(0.5) * uref[i]));
    }
  }
  return {worst < 1e-6, "sup |v_m - v_1/2| " + fmt("%.2e", worst)};
}

// ---- 4 -------------------------------------------------------------------

Outcome certificates() {
  std::vector<LinearOperator> L, V, W, D;
  for (int n : {500, 1000, 2000}) {
    const ChoquardSolution& s = ground(kM, n);
    L.push_back(assemble_linearized_choquard(s));
    V.push_back(assemble_V(kM, s.grid_ptr()));
    W.push_back(assemble_W(s));
    D.push_back(assemble_D_prime(s));
  }
  bool stable = true;
  std::string detail;
  const char* names[] = {"L", "V", "W", "D'"};
  int k = 0;
  for (const auto* ladder : {&L, &V, &W, &D}) {
    const SpectrumReport rep = nondegeneracy_report(*ladder);
    stable = stable && rep.stable_under_refinement;
    detail += std::string(names[k++]) + " " + fmt("%.4g", rep.ladder_values[0]) + "/" + fmt("%.4g", rep.ladder_values[1]) +
              "/" + fmt("%.4g", rep.ladder_values[2]) + (rep.stable_under_refinement ? "" : " UNSTABLE") + "; ";
  }
  // S: sigma_k < 0.01 sigma_1 for every k > 0.1 N.
  bool decay = true;
  for (int n : {500, 1000, 2000}) {
    const Vector sv = h1_singular_values(assemble_S(ground(kM, n)));
    double ratio = 0.0;
    for (int i = n / 10 + 1; i < sv.size(); ++i) ratio = std::max(ratio, sv[i] / sv[0]);
    decay = decay && ratio < 0.01;
    detail += "S N=" + std::to_string(n) + " max sigma_k/sigma_1 beyond 0.1N " + fmt("%.3g", ratio) + "; ";
  }
  return {stable && decay, detail};
}

// ---- 5 -------------------------------------------------------------------

Vector random_direction(const RadialGrid& g, std::mt19937& rng) {
  std::normal_distribution<double> nd(0.0, 1.0);
  const int n = g.size();
  const Vector& r = g.nodes();
  const double L = g.r_max() / 6.0;
  Vector d = Vector::Zero(3 * n);
  for (int b = 0; b < 3; ++b) {
    for (int j = 0; j < 4; ++j) {
      const double c = nd(rng), w = L * (0.3 + 0.3 * j);
      for (int i = 0; i < n; ++i) {
        const double e = c * std::exp(-r[i] * r[i] / (2.0 * w * w));
        d[b * n + i] += b == 0 ? r[i] / w * e : b == 1 ? r[i] * r[i] / (w * w) * e : e;
      }
    }
  }
  return d;
}

Outcome jacobian_check() {
  const ChoquardSolution& s = ground(kM, 1000);
  const PerturbedState base = base_state(s);
  const Branch br = continue_branch(0.05 * kM, SolverConfig{}, s);
  std::mt19937 rng(20161016);
  double worst = 0.0;
  for (double eps : {0.0, 0.01 * kM, 0.05 * kM}) {
    const BranchPoint* near = &br.points.front();
    for (const auto& p : br.points)
      if (std::abs(p.eps - eps) < std::abs(near->eps - eps)) near = &p;
    const PerturbedState st = newton_correct(eps, near->state.with_eps(eps), base, SolverConfig{}).state;
    const LinearOperator J = jacobian(st);
    const Vector x = st.stacked();
    auto central = [&](const Vector& d, double h) {
      return Vector((residual_D(st.with_stacked(x + h * d)).stacked - residual_D(st.with_stacked(x - h * d)).stacked) /
                    (2.0 * h));
    };
    for (int k = 0; k < 5; ++k) {
      const Vector d = random_direction(s.grid(), rng);
      const Vector jd = J.apply(d);
      const Vector fd = (100.0 * central(d, 1e-5) - central(d, 1e-4)) / 99.0;
      const auto ne = residual_norms(s.grid(), fd - jd), nj = residual_norms(s.grid(), jd);
      for (int b = 0; b < 3; ++b) worst = std::max(worst, ne[b] / nj[b]);
    }
  }
  const ChoquardSolution& c = ground(kM, 500);
  const Matrix j0 = jacobian(base_state(c)).dense(), dp = assemble_D_prime(c).dense();
  const double entry = (j0 - dp).cwiseAbs().maxCoeff() / dp.cwiseAbs().maxCoeff();
  return {worst < 1e-5 && entry < 1e-12,
          "FD mismatch " + fmt("%.2e", worst) + " over 15 directions, J(0) vs W+S " + fmt("%.2e", entry)};
}

// ---- 6 -------------------------------------------------------------------

Outcome branch_check() {
  const Branch& br = main_branch();
  int iters = 0;
  double res = 0.0;
  for (const auto& p : br.points) {
    iters = std::max(iters, p.newton_iters);
    for (double v : p.residual_norms) res = std::max(res, v);
  }
  const DepartureFit fit = departure_slope(br);
  const bool reached = br.stop_reason == "eps_max" && br.points.back().eps >= 0.05 * kM * (1.0 - 1e-12);
  return {reached && br.points.size() >= 20 && iters <= 8 && res < 1e-8 && fit.slope >= 0.9,
          std::to_string(br.points.size()) + " points, stop " + br.stop_reason + ", max Newton " + std::to_string(iters) +
              ", max residual " + fmt("%.2e", res) + ", slope " + fmt("%.4f", fit.slope) + " over " +
              std::to_string(fit.points) + " points"};
}

// ---- 7 -------------------------------------------------------------------

Outcome physics_check() {
  const Branch& br = main_branch();
  double phys = 0.0, cond = 1e300, min_a = 1e300, tail = 0.0, adm = 0.0;
  bool plateau = true;
  for (const auto& p : br.points) {
    for (double v : p.physical_res.norms) phys = std::max(phys, v);
    cond = std::min(cond, p.diag.condQ_margin);
    min_a = std::min(min_a, p.diag.min_A);
    tail = std::max(tail, std::abs(p.diag.t_tail - p.diag.t_tail_exterior) / std::max(1e-300, std::abs(p.diag.t_tail_exterior)) *
                              (p.eps > 0.0));
    adm = std::max(adm, p.diag.adm_relative_gap);
    plateau = plateau && (p.eps == 0.0 || p.diag.plateau_ok);
  }
  return {phys < 1e-6 && cond > 0.0 && min_a >= 0.05 && tail < 1e-6 && adm < 5e-3 && plateau,
          "max physical residual " + fmt("%.2e", phys) + ", min condQ " + fmt("%.4g", cond) + ", min A " +
              fmt("%.6f", min_a) + ", T tail vs exterior rel " + fmt("%.2e", tail) + ", ADM gap " + fmt("%.2e", adm) +
              (plateau ? ", plateau flat" : ", PLATEAU NOT FLAT")};
}

// ---- 8 -------------------------------------------------------------------

Outcome normalization_check() {
  const double target = 1.0 / (4.0 * kPi);
  const NormalizedSolution ns = normalized_solution(0.01, target, SolverConfig{});
  const double gap = std::abs(ns.solution.norm_integral - target);
  const bool ratio = std::abs(ns.solution.eps / ns.m - 0.01) < 1e-12;
  return {gap < 1e-6 && ratio, "m " + fmt("%.10g", ns.m) + ", |norm - 1/(4 pi)| " + fmt("%.2e", gap)};
}

// ---- 9 -------------------------------------------------------------------

bool same_tree(const fs::path& a, const fs::path& b, std::string& why) {
  std::set<fs::path> fa, fb;
  for (const auto& e : fs::recursive_directory_iterator(a))
    if (e.is_regular_file()) fa.insert(fs::relative(e.path(), a));
  for (const auto& e : fs::recursive_directory_iterator(b))
    if (e.is_regular_file()) fb.insert(fs::relative(e.path(), b));
  if (fa != fb || fa.empty()) {
    why = "file sets differ";
    return false;
  }
  for (const auto& rel : fa) {
    std::ifstream x(a / rel, std::ios::binary), y(b / rel, std::ios::binary);
    const std::string sx((std::istreambuf_iterator<char>(x)), {}), sy((std::istreambuf_iterator<char>(y)), {});
    if (sx != sy) {
      why = rel.string() + " differs";
      return false;
    }
  }
  why = std::to_string(fa.size()) + " files identical";
  return true;
}

Outcome determinism_check() {
  const fs::path root = fs::temp_directory_path() / ("edsolve_acceptance_" + std::to_string(::getpid()));
  fs::remove_all(root);
  fs::create_directories(root);
  const fs::path cfg = root / "run.toml";
  std::string why;
  bool same = true;
  for (const char* tag : {"a", "b"}) {
    std::ofstream(cfg) << "m = 0.5\noutputs = \"" << (root / tag).string()
                       << "\"\nemit = [\"profiles\", \"branch\", \"certificates\", \"matrices\"]\n";
    const std::string cmd = std::string("\"") + EDSOLVE_CLI_PATH + "\" solve --config \"" + cfg.string() + "\" > \"" +
                            (root / (std::string(tag) + ".log")).string() + "\" 2>&1";
    same = same && std::system(cmd.c_str()) == 0;
  }
  same = same && same_tree(root / "a", root / "b", why);
  const auto t0 = std::chrono::steady_clock::now();
  const std::string st = std::string("\"") + EDSOLVE_CLI_PATH + "\" solve --selftest > \"" + (root / "selftest.log").string() + "\" 2>&1";
  const bool self_ok = std::system(st.c_str()) == 0;
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  fs::remove_all(root);
  return {same && self_ok && secs < 10.0,
          (same ? why : "runs differ or failed" + (why.empty() ? std::string() : ": " + why)) + ", selftest " +
              (self_ok ? "exit 0" : "FAILED") + " in " + fmt("%.2f", secs) + " s"};
}

}  // namespace

int main(int argc, char** argv) {
  std::set<int> declared;
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--known-failure" && i + 1 < argc) {
      declared.insert(std::atoi(argv[++i]));
    } else {
      std::cerr << "usage: acceptance [--known-failure k]...\n";
      return 2;
    }
  }

  struct Criterion {
    int id;
    double budget_s;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria{
      {1, 1.0, kernel_oracle},     {2, 30.0, ground_state_check}, {3, 60.0, scaling_law},
      {4, 120.0, certificates},    {5, 300.0, jacobian_check},    {6, 300.0, branch_check},
      {7, 300.0, physics_check},   {8, 600.0, normalization_check}, {9, 300.0, determinism_check},
  };

  std::set<int> failed;
  for (const auto& c : criteria) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const bool in_time = secs < c.budget_s;
    const bool pass = o.pass && in_time;
    if (!pass) failed.insert(c.id);
    std::cout << (pass ? "PASS" : "FAIL") << " criterion " << c.id << ": " << o.detail << " [" << fmt("%.2f", secs)
              << " s" << (in_time ? "" : ", OVER BUDGET " + fmt("%.0f", c.budget_s) + " s") << "]" << std::endl;
  }

  std::cout << failed.size() << " of " << criteria.size() << " criteria failed";
  if (!declared.empty()) std::cout << "; declared known failures: " << declared.size();
  std::cout << std::endl;
  if (failed != declared) {
    std::cout << "failing set differs from the declared set" << std::endl;
    return 1;
  }
  return 0;
}
