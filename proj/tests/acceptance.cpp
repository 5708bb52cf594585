// Acceptance checks A1-A14. One PASS/FAIL line per criterion.
//
//   acceptance [--only A7] [--threads N] [--scratch dir]
//
// Exit status is 0 when every selected criterion passes.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <iostream>
#include <sstream>

#include "rwre/analysis.hpp"
#include "rwre/clt.hpp"
#include "rwre/gamma.hpp"
#include "rwre/harness.hpp"

using namespace rwre;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string scratch_root = (fs::temp_directory_path() / "rwre_acceptance").string();

std::string g(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::vector<Point> sample_interior(const Domain& D, std::size_t n, std::uint64_t key) {
  CounterRng rng(key);
  std::vector<Point> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(D.point(static_cast<std::size_t>(rng.below(D.n_interior()))));
  return xs;
}

double l1(const ExitMeasure& a, const ExitMeasure& b) {
  double s = 0;
  for (std::size_t k = 0; k < a.weights.size(); ++k) s += std::abs(a.weights[k] - b.weights[k]);
  return s;
}

RunResult run_json(json j, const std::string& tag) {
  const auto dir = fs::path(scratch_root) / tag;
  fs::remove_all(dir);
  j["output_path"] = dir.string();
  return run(parse_config(j));
}

std::vector<const Row*> rows_of(const RunResult& r, const std::string& metric) {
  std::vector<const Row*> out;
  for (const auto& row : r.rows)
    if (row.ok && row.metric == metric) out.push_back(&row);
  return out;
}

// ---------------------------------------------------------------------------

Outcome A1() {
  const auto t0 = std::chrono::steady_clock::now();
  double worst_res = 0, worst_rate = 0, worst_last = 0;
  bool geometric = true;
  for (std::uint64_t trial = 0; trial < 50; ++trial) {
    CounterRng rng(2024, trial);
    Mat p(20, 20), P(20, 20);
    for (Eigen::Index i = 0; i < 20; ++i) {
      const double mass = rng.uniform(0.5, 0.9);
      for (Eigen::Index j = 0; j < 20; ++j) {
        p(i, j) = rng.uniform();
        P(i, j) = p(i, j) * (1 + 0.2 * rng.uniform(-1, 1));
      }
      p.row(i) *= mass / p.row(i).sum();
      P.row(i) *= mass / P.row(i).sum();
    }
    const auto rep = perturbation_truncation(p, P, 40);
    worst_res = std::max({worst_res, rep.resolvent_left, rep.resolvent_right});
    // geometric decay: fitted log-linear rate below 0 and the tail at round-off
    std::vector<double> k, lr;
    for (std::size_t m = 0; m < rep.pbe3_residuals.size(); ++m)
      if (rep.pbe3_residuals[m] > 1e-13) {
        k.push_back(static_cast<double>(m));
        lr.push_back(std::log(rep.pbe3_residuals[m]));
      }
    if (k.size() >= 2) {
      const double rate = std::exp(fit_line(k, lr).first);
      worst_rate = std::max(worst_rate, rate);
      geometric = geometric && rate < 1;
    }
    worst_last = std::max(worst_last, rep.pbe3_residuals.back());
    geometric = geometric && !rep.diverged;
  }
  const double secs = seconds_since(t0);
  const bool pass = worst_res <= 1e-10 && geometric && worst_last <= 1e-10 && secs < 5;
  return {pass, "max resolvent residual " + g(worst_res) + ", worst pbe3 decay rate " + g(worst_rate) +
                    ", worst final residual " + g(worst_last) + ", " + g(secs) + " s"};
}

Outcome A2() {
  const double L = 6;
  auto W = make_ball(Point::zero(3), L);
  double worst = 0;
  auto check = [&](const Kernel& K) {
    GreenOperator G(K);
    const Mat Gd = G.dense();
    const std::size_t n = G.n(), nb = W->n_boundary();
    // boundary block of P: B(y, k) = P(y, z_k)
    Mat B = Mat::Zero(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(nb));
    for (int o = 0; o < K.P.outerSize(); ++o)
      for (SpMat::InnerIterator it(K.P, o); it; ++it)
        if (static_cast<std::size_t>(it.col()) >= n) B(it.row(), it.col() - static_cast<Eigen::Index>(n)) = it.value();
    const Mat prod = Gd * B;
    for (std::size_t i = 0; i < n; ++i) {
      const auto ex = G.exit_measure(W->point(i));
      for (std::size_t k = 0; k < nb; ++k)
        worst = std::max(worst, std::abs(ex.weights[k] - prod(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k))));
    }
  };
  check(srw_kernel(W));
  for (std::uint64_t e = 0; e < 10; ++e) check(rwre_kernel(Environment({Family::isotropic_tilt, 3, 0.05, 0}, env_seed(2, e)), W));
  return {worst <= 1e-10, "L=6, SRW + 10 envs, max |ex - G P| = " + g(worst)};
}

Outcome A3() {
  bool bracket = true;
  double worst_lo = 1e300, worst_hi = 1e300;
  for (int L = 1; L <= 10; ++L) {
    GreenOperator G(srw_kernel(make_ball(Point::zero(3), L)));
    const Vec t = G.mean_exit_times();
    for (std::size_t i = 0; i < G.n(); ++i) {
      const double x2 = static_cast<double>(G.domain().point(i).norm2());
      const double v = t[static_cast<Eigen::Index>(i)];
      worst_lo = std::min(worst_lo, v - (L * L - x2));
      worst_hi = std::min(worst_hi, (L + 1.0) * (L + 1.0) - x2 - v);
      bracket = bracket && v >= L * L - x2 && v <= (L + 1.0) * (L + 1.0) - x2;
    }
  }
  const double e1 = mean_exit_time(srw_kernel(make_ball(Point::zero(3), 1)), Point::zero(3));
  const bool pass = bracket && std::abs(e1 - 12.0 / 5.0) <= 1e-12;
  return {pass, "min slack below " + g(worst_lo) + ", above " + g(worst_hi) + ", E_0 tau_1 - 12/5 = " + g(e1 - 2.4)};
}

Outcome A4() {
  const auto t0 = std::chrono::steady_clock::now();
  const double L = 12;
  const auto S = Schedule::override_sr(L, 4, 2, 0.5);
  auto W = make_ball(Point::zero(3), L);
  const auto field = SmoothingField::h_profile(S, Point::zero(3));
  const auto xs = sample_interior(*W, 10, 0xA4);
  double worst = 0;
  for (double eps : {0.0, 0.05}) {
    Environment env({Family::isotropic_tilt, 3, eps, 0}, 4);
    GreenOperator Gc(coarse_grain(env, field, W).kernel), Gb(rwre_kernel(env, W));
    for (const auto& x : xs) worst = std::max(worst, l1(Gc.exit_measure(x), Gb.exit_measure(x)));
  }
  const double secs = seconds_since(t0);
  return {worst <= 1e-8 && secs < 120, "L=12 override(4,2), max L1 = " + g(worst) + ", " + g(secs) + " s"};
}

Outcome A5() {
  const double L = 12;
  const auto S = Schedule::override_sr(L, 4, 2, 0.5);
  const Domain D = Domain::ball(Point::zero(3), L);
  double worst = 0;
  for (std::uint64_t e = 0; e < 10; ++e) {
    Environment env({Family::isotropic_tilt, 3, 0.05, 0}, env_seed(5, e));
    auto xs = sample_interior(D, 3, hash_words({0xA5, e}));
    xs.push_back(Point::zero(3));
    for (const auto& c : sojourn_decomposition_check(env, S, xs)) worst = std::max(worst, c.residual);
  }
  return {worst <= 1e-7 * L * L, "10 envs, max residual " + g(worst) + " vs " + g(1e-7 * L * L)};
}

Outcome A6() {
  bool pass = true;
  std::string d;
  for (double m : {5.0, 10.0, 20.0}) {
    const double r = gamma_m(m, 3) / (m * m);
    pass = pass && r > 1.0 / 3 && r < 4.0 / 3;
    d += "m=" + g(m) + ": " + g(r) + " ";
  }
  return {pass, d};
}

Outcome A7() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto rep = local_clt_scan(3, 4, 16, 3);
  const double secs = seconds_since(t0);
  return {rep.slope >= -3 && rep.slope <= -2 && secs < 600, "slope " + g(rep.slope) + ", " + g(secs) + " s"};
}

Outcome A8() {
  const auto res = run_json({{"experiment", "greenasym"},
                             {"seed", 8},
                             {"psi", {3}},
                             {"x_radii", {30, 35, 40, 45, 50, 55, 60}},
                             {"n_walks", 1'000'000}},
                            "A8");
  const double c = c_d(3);
  double worst = 0;
  const auto sc = rows_of(res, "scaled");
  for (const auto* r : sc) worst = std::max(worst, std::abs(r->value / c - 1));
  const bool pass = res.n_errors == 0 && sc.size() == 7 && worst <= 0.15;
  return {pass, "worst relative deviation of g*gamma_m*|x| from c(3): " + g(worst)};
}

Outcome A9() {
  const auto res = run_json(
      {{"experiment", "hitprob"}, {"seed", 9}, {"L", {40}}, {"a", {2, 4, 8}}, {"annulus", {4, 10, 20}}}, "A9");
  double K = 0;
  std::string d = "K needed per a:";
  for (const auto* r : rows_of(res, "K_needed")) {
    K = std::max(K, r->value);
    d += " a=" + std::to_string(r->index) + ":" + g(r->value);
  }
  double ann = 1;
  for (const auto* r : rows_of(res, "rel_error")) ann = r->value;
  d += "; fitted K " + g(K) + "; annulus relative error " + g(ann);
  const bool pass = res.n_errors == 0 && rows_of(res, "K_needed").size() == 3 && K <= 2 && ann <= 0.05;
  return {pass, d};
}

Outcome A10() {
  // exact Lipschitz and triangle properties, comparability on neighbourhoods
  const auto big = GammaKernelSpec::make(200, 20, 50, 3);
  const auto lip = gamma_lipschitz_check(big, 10'000, 10);
  const auto as = gamma_asymp_check(big, 10'000, 10);
  // domination constant across L with s = L/4, r = L/12
  std::vector<double> C1;
  bool finite = true;
  for (double L : {12.0, 16.0, 24.0}) {
    const double s = L / 4, r = L / 12;
    const auto rep = gamma_bounds_report(GammaKernelSpec::make(L, r, s, 3), Schedule::override_sr(L, s, r, 0.5), 20,
                                         20, 3);
    finite = finite && rep.finite_positive && std::isfinite(rep.C1) && rep.C1 > 0;
    C1.push_back(rep.C1);
  }
  const double spread = *std::max_element(C1.begin(), C1.end()) / *std::min_element(C1.begin(), C1.end());
  const bool pass = lip.passed() && as.passed() && finite && spread <= 1.5;
  return {pass, "Lipschitz " + std::string(lip.passed() ? "ok" : "violated") + " (tilde " + g(lip.worst_tilde) +
                    ", a " + g(lip.worst_a) + ", triangle " + g(lip.worst_triangle) + "), max ratio " +
                    g(as.max_ratio) + ", C1 " + g(C1[0]) + "/" + g(C1[1]) + "/" + g(C1[2]) + " max/min " + g(spread)};
}

Outcome A11() {
  const auto res = run_json(
      {{"experiment", "isotropy"}, {"seed", 11}, {"L", {12}}, {"psi", {2}}, {"epsilon", {0.05}}, {"n_envs", 3}},
      "A11");
  double worst = 0;
  std::size_t seen = 0;
  for (const char* m : {"max_first", "max_offdiag", "diag_spread"})
    for (const auto* r : rows_of(res, m)) {
      worst = std::max(worst, std::abs(r->value));
      ++seen;
    }
  bool rejected = false;
  try {
    isotropy_cancellation({{Point{1, 0, 0}, 1.0}, {Point::zero(3), -1.0}}, 1, 8, 2, Point::zero(3));
  } catch (const Error& e) {
    rejected = e.code() == ErrorCode::symmetry_violation;
  }
  const bool pass = res.n_errors == 0 && seen == 3 && worst <= 1e-10 && rejected;
  return {pass, "max moment diagnostic " + g(worst) + ", asymmetric measure " + (rejected ? "rejected" : "accepted")};
}

Outcome A12() {
  const double L = 12;
  Environment srw({Family::isotropic_tilt, 3, 0.0, 0}, 12);
  const auto cls = classify(srw, Schedule::override_sr(L, 4, 2, 0.5), 0.01);
  const auto dm = d_metrics(srw, L, SmoothingField::constant(4));
  const auto c1 = check_C1({Family::isotropic_tilt, 3, 0.0, 0}, 0.01, {L}, {4}, 3, 12);
  const auto c2 = c2_indicator(srw, L, 0.5);
  const bool zero = cls.env_class == EnvClass::good && dm.D_star == 0 && dm.D_star_psi == 0 && c1.passed() && c2.pass;
  const double eps = 0.1, bound = 3 / (1 - 2 * eps * 3) * (L + 1) * (L + 1);
  double worst = 0;
  for (std::uint64_t e = 0; e < 50; ++e) {
    Environment env({Family::balanced_axis, 3, eps, 0}, env_seed(12, e));
    worst = std::max(worst, c2_indicator(env, L, 0.5).env_time);
  }
  return {zero && worst <= bound, std::string("eps=0: ") + env_class_name(cls.env_class) + ", D* " + g(dm.D_star) +
                                      ", C1 " + (c1.passed() ? "pass" : "fail") + ", C2 " + (c2.pass ? "pass" : "fail") +
                                      "; balanced max E tau " + g(worst) + " <= " + g(bound)};
}

Outcome A13() {
  const std::vector<json> configs = {
      {{"experiment", "dstar"}, {"seed", 7}, {"L", {8}}, {"epsilon", {0, 0.05}}, {"psi", {2}}, {"n_envs", 3}},
      {{"experiment", "c1scan"}, {"seed", 3}, {"L", {8}}, {"psi", {2}}, {"epsilon", {0.05}}, {"n_envs", 4}},
      {{"experiment", "c2scan"}, {"seed", 7}, {"L", {8}}, {"epsilon", {0.05}}, {"family", "balanced_axis"}, {"n_envs", 4}},
      {{"experiment", "sojourn"},
       {"seed", 3},
       {"L", {8}},
       {"epsilon", {0.05}},
       {"r_mode", {{"mode", "override"}, {"s", 4}, {"r", 2}}},
       {"n_envs", 2},
       {"n_points", 5}},
      {{"experiment", "cltscan"}, {"seed", 1}, {"psi", {3}}, {"n_range", {4, 8}}},
      {{"experiment", "greenasym"}, {"seed", 3}, {"psi", {3}}, {"x_radii", {30, 45}}, {"n_walks", 20000}},
      {{"experiment", "gammacheck"},
       {"seed", 3},
       {"L", {12}},
       {"r_mode", {{"mode", "override"}, {"s", 3}, {"r", 1}}},
       {"n_pairs", 500},
       {"n_points", 10}},
      {{"experiment", "hitprob"}, {"seed", 1}, {"L", {40}}, {"a", {2, 4}}, {"annulus", {4, 10, 20}}},
      {{"experiment", "smoothcmp"}, {"seed", 3}, {"L", {6}}, {"psi", {2}}, {"epsilon", {0.05}}, {"n_envs", 2}, {"n_points", 30}},
      {{"experiment", "transience"},
       {"seed", 7},
       {"radii_pairs", {{3, 12}}},
       {"start_radii", {4, 6, 9}},
       {"epsilon", {0.05}},
       {"n_walks", 20000}},
      {{"experiment", "isotropy"}, {"seed", 1}, {"L", {12}}, {"psi", {2}}, {"epsilon", {0.05}}, {"n_envs", 3}}};
  auto payload = [](const std::string& path) {
    std::ifstream f(path);
    std::vector<std::string> ls;
    std::string l;
    while (std::getline(f, l)) {
      auto j = json::parse(l);
      j.erase("timestamp");
      ls.push_back(j.dump());
    }
    return ls;
  };
  const int saved = thread_override();
  std::vector<std::string> differ;
  std::size_t errors = 0;
  for (const auto& c : configs) {
    const std::string name = c["experiment"];
    thread_override() = 1;
    const auto a = run_json(c, "A13/" + name + "_1");
    thread_override() = 8;
    const auto b = run_json(c, "A13/" + name + "_8");
    errors += a.n_errors + b.n_errors;
    if (payload(a.jsonl_path) != payload(b.jsonl_path)) differ.push_back(name);
  }
  thread_override() = saved;
  std::string d = std::to_string(configs.size()) + " experiments, " + std::to_string(errors) + " sample errors";
  for (const auto& n : differ) d += ", differs: " + n;
  return {differ.empty() && errors == 0, d};
}

Outcome A14() {
  const double L = 12;
  std::vector<double> mean_raw, mean_sm;
  bool per_sample = true;
  for (double eps : {0.01, 0.03, 0.05}) {
    std::vector<DMetrics> dm(50);
    parallel_for(50, [&](std::size_t e) {
      dm[e] = d_metrics(Environment({Family::isotropic_tilt, 3, eps, 0}, env_seed(14, e)), L,
                        SmoothingField::constant(4));
    });
    double r = 0, s = 0;
    for (const auto& x : dm) {
      r += x.D_star;
      s += x.D_star_psi;
      for (std::size_t i = 0; i < x.xs.size(); ++i) per_sample = per_sample && x.D_psi[i] <= x.D[i] + 1e-12;
    }
    mean_raw.push_back(r / 50);
    mean_sm.push_back(s / 50);
  }
  bool pass = per_sample;
  for (std::size_t i = 0; i < 3; ++i) {
    if (i > 0) pass = pass && mean_raw[i] >= mean_raw[i - 1];
    pass = pass && mean_sm[i] <= mean_raw[i];
  }
  return {pass, "mean D* " + g(mean_raw[0]) + "/" + g(mean_raw[1]) + "/" + g(mean_raw[2]) + ", mean D*_psi " +
                    g(mean_sm[0]) + "/" + g(mean_sm[1]) + "/" + g(mean_sm[2]) +
                    (per_sample ? ", contraction holds per sample" : ", contraction violated")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks A1-A14"};
  std::vector<std::string> only;
  int threads = 0;
  app.add_option("--only", only, "run only these criteria (e.g. A3)");
  app.add_option("--threads", threads, "worker count");
  app.add_option("--scratch", scratch_root, "directory for experiment output");
  CLI11_PARSE(app, argc, argv);
  if (threads > 0) thread_override() = threads;

  const std::vector<std::pair<std::string, std::function<Outcome()>>> all = {
      {"A1", A1},   {"A2", A2},   {"A3", A3},   {"A4", A4},   {"A5", A5},   {"A6", A6},   {"A7", A7},
      {"A8", A8},   {"A9", A9},   {"A10", A10}, {"A11", A11}, {"A12", A12}, {"A13", A13}, {"A14", A14}};
  int failed = 0, ran = 0;
  for (const auto& [name, fn] : all) {
    if (!only.empty() && std::find(only.begin(), only.end(), name) == only.end()) continue;
    ++ran;
    Outcome o;
    try {
      o = fn();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    std::cout << name << ' ' << (o.pass ? "PASS" : "FAIL") << "  " << o.detail << std::endl;
    failed += !o.pass;
  }
  if (ran == 0) {
    std::cerr << "no criterion selected\n";
    return 2;
  }
  return failed ? 1 : 0;
}
