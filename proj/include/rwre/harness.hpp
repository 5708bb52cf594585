#pragma once

// Experiment orchestration: configuration, Monte Carlo exit laws, the
// transience probe, and JSONL/CSV persistence.

#include <boost/math/distributions/normal.hpp>
#include <zlib.h>

#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "json.hpp"
#include "rwre/analysis.hpp"
#include "rwre/clt.hpp"
#include "rwre/coarse.hpp"
#include "rwre/environment.hpp"
#include "rwre/errors.hpp"
#include "rwre/gamma.hpp"
#include "rwre/lattice.hpp"
#include "rwre/mollifier.hpp"
#include "rwre/parallel.hpp"
#include "rwre/reference.hpp"
#include "rwre/rng.hpp"
#include "rwre/schedule.hpp"
#include "rwre/solver.hpp"

#ifndef RWRE_BUILD_ID
#define RWRE_BUILD_ID "unknown"
#endif

namespace rwre {

using json = nlohmann::json;

inline constexpr int kSchemaVersion = 1;
inline constexpr std::uint64_t kStepCap = 100'000'000;

// ---------------------------------------------------------------------------
// Monte Carlo exit laws

namespace detail {

// One nearest-neighbour step from x under the site law at x.
inline Point mc_step(const Environment& env, const Point& x, CounterRng& rng) {
  const int d = x.dim;
  int k;
  if (env.is_srw()) {
    k = static_cast<int>(rng.below(static_cast<std::uint64_t>(2 * d)));
  } else {
    const SiteLaw q = env.law(x);
    const double u = rng.uniform();
    double acc = 0;
    k = 2 * d - 1;
    for (int j = 0; j < 2 * d; ++j)
      if (u < (acc += q.p[j])) {
        k = j;
        break;
      }
  }
  Point y = x;
  y.c[k / 2] += (k % 2 == 0) ? 1 : -1;
  return y;
}

inline constexpr std::size_t kWalkBatch = 4096;

}  // namespace detail

struct McExit {
  DomainPtr domain;
  std::vector<std::size_t> counts;  // per boundary point
  std::vector<double> freq;
  std::vector<Interval> ci;         // simultaneous 95% (Bonferroni over cells)
  std::size_t walks = 0;
  std::size_t aborted = 0;

  // ||freq - ex||_1 against an exact measure on the same domain
  double tv(const ExitMeasure& ex) const {
    double s = 0;
    for (std::size_t k = 0; k < freq.size(); ++k) s += std::abs(freq[k] - ex.weights[k]);
    return s;
  }
};

// Direct simulation of the walk from x until it leaves V_L. Walks exceeding
// step_cap steps are aborted and counted; frequencies are over completed walks.
inline McExit mc_exit(const Environment& env, const Point& x, double L, std::size_t n_walks, std::uint64_t seed,
                      std::uint64_t step_cap = kStepCap, std::size_t capacity = default_capacity()) {
  McExit out;
  out.domain = make_ball(Point::zero(x.dim), L, capacity);
  const Domain& D = *out.domain;
  if (!D.is_interior(x)) throw Error(ErrorCode::domain_violation, "mc_exit start point outside V_L");
  const std::int64_t L2 = D.radius2();
  const std::size_t nb = (n_walks + detail::kWalkBatch - 1) / detail::kWalkBatch;
  const std::size_t nbd = D.n_boundary();
  std::vector<std::vector<std::size_t>> counts(nb);
  std::vector<std::size_t> aborted(nb, 0);
  parallel_for(nb, [&](std::size_t b) {
    auto& c = counts[b];
    c.assign(nbd, 0);
    CounterRng rng(seed, hash_words({0x4D43ull, b}));
    const std::size_t lo = b * detail::kWalkBatch, hi = std::min(n_walks, lo + detail::kWalkBatch);
    for (std::size_t w = lo; w < hi; ++w) {
      Point y = x;
      std::uint64_t steps = 0;
      while (y.norm2() <= L2 && steps < step_cap) {
        y = detail::mc_step(env, y, rng);
        ++steps;
      }
      if (y.norm2() <= L2) {
        ++aborted[b];
        continue;
      }
      ++c[*D.find(y) - D.n_interior()];
    }
  });
  out.counts.assign(nbd, 0);
  for (std::size_t b = 0; b < nb; ++b) {
    out.aborted += aborted[b];
    for (std::size_t k = 0; k < nbd; ++k) out.counts[k] += counts[b][k];
  }
  out.walks = n_walks - out.aborted;
  const double z =
      boost::math::quantile(boost::math::normal(), 1.0 - 0.025 / static_cast<double>(std::max<std::size_t>(nbd, 1)));
  out.freq.resize(nbd);
  out.ci.resize(nbd);
  for (std::size_t k = 0; k < nbd; ++k) {
    out.freq[k] = out.walks ? static_cast<double>(out.counts[k]) / static_cast<double>(out.walks) : 0.0;
    out.ci[k] = wilson_interval(out.counts[k], out.walks, z);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Transience probe

struct ProbeRow {
  double l_in = 0, l_out = 0, radius = 0;
  std::size_t hits = 0, walks = 0, aborted = 0;
  double p_hit = 0;      // P_x(T_{V_{l_in}} < tau_{V_{l_out}})
  Interval ci;
  double closed_form = 0;  // 1 - annulus main term
  int k = 0;               // floor(log(|x| / l_in) / log rho)
  double majorant = 0;     // (2/3)^k
};

// Start points x = radius e_1; one stream per (pair, radius).
inline ProbeRow transience_row(const Environment& env, double l_in, double l_out, double radius, double rho,
                               std::size_t n_walks, std::uint64_t seed, std::uint64_t step_cap = kStepCap) {
  if (!(l_in < l_out)) throw Error(ErrorCode::config_invalid, "transience needs l_in < l_out");
  const int d = env.dim();
  const std::int64_t in2 = squared_threshold(l_in), out2 = squared_threshold(l_out);
  Point x(d);
  x.c[0] = static_cast<std::int32_t>(std::lround(radius));
  if (!(x.norm2() > in2 && x.norm2() <= out2))
    throw Error(ErrorCode::config_invalid, "start radius must lie in (l_in, l_out]");
  ProbeRow row;
  row.l_in = l_in;
  row.l_out = l_out;
  row.radius = x.norm();
  const std::size_t nb = (n_walks + detail::kWalkBatch - 1) / detail::kWalkBatch;
  std::vector<std::size_t> hits(nb, 0), aborted(nb, 0);
  const std::uint64_t key = hash_words({0x5452ull, std::bit_cast<std::uint64_t>(l_in),
                                        std::bit_cast<std::uint64_t>(l_out), static_cast<std::uint64_t>(x.norm2())});
  parallel_for(nb, [&](std::size_t b) {
    CounterRng rng(seed, hash_words({key, b}));
    const std::size_t lo = b * detail::kWalkBatch, hi = std::min(n_walks, lo + detail::kWalkBatch);
    for (std::size_t w = lo; w < hi; ++w) {
      Point y = x;
      std::uint64_t steps = 0;
      for (;;) {
        if (steps >= step_cap) {
          ++aborted[b];
          break;
        }
        y = detail::mc_step(env, y, rng);
        ++steps;
        const auto n2 = y.norm2();
        if (n2 <= in2) {
          ++hits[b];
          break;
        }
        if (n2 > out2) break;
      }
    }
  });
  for (std::size_t b = 0; b < nb; ++b) {
    row.hits += hits[b];
    row.aborted += aborted[b];
  }
  row.walks = n_walks - row.aborted;
  row.p_hit = row.walks ? static_cast<double>(row.hits) / static_cast<double>(row.walks) : 0.0;
  row.ci = wilson_interval(row.hits, row.walks);
  row.closed_form = 1.0 - annulus_exit(l_in, row.radius, l_out, d);
  row.k = std::max(0, static_cast<int>(std::floor(std::log(row.radius / l_in) / std::log(rho))));
  row.majorant = std::pow(2.0 / 3.0, row.k);
  return row;
}

// ---------------------------------------------------------------------------
// Configuration

enum class Experiment {
  dstar, c1scan, c2scan, sojourn, cltscan, greenasym, gammacheck, hitprob, smoothcmp, transience, isotropy
};

inline const std::vector<std::pair<Experiment, std::string>>& experiment_names() {
  static const std::vector<std::pair<Experiment, std::string>> v = {
      {Experiment::dstar, "dstar"},         {Experiment::c1scan, "c1scan"},       {Experiment::c2scan, "c2scan"},
      {Experiment::sojourn, "sojourn"},     {Experiment::cltscan, "cltscan"},     {Experiment::greenasym, "greenasym"},
      {Experiment::gammacheck, "gammacheck"}, {Experiment::hitprob, "hitprob"},   {Experiment::smoothcmp, "smoothcmp"},
      {Experiment::transience, "transience"}, {Experiment::isotropy, "isotropy"}};
  return v;
}

inline std::string experiment_name(Experiment e) {
  for (const auto& [k, n] : experiment_names())
    if (k == e) return n;
  return "?";
}

inline Experiment parse_experiment(const std::string& s) {
  for (const auto& [k, n] : experiment_names())
    if (n == s) return k;
  throw Error(ErrorCode::config_invalid, "unknown experiment '" + s + "'");
}

struct RModeSpec {
  RMode mode = RMode::paper_rL;
  double r = 0, s = 0;
  double scale = 0.5;  // override mode only
};

struct ExperimentConfig {
  Experiment experiment = Experiment::dstar;
  std::uint64_t seed = 0;
  int d = 3;
  std::vector<double> L;
  std::vector<double> epsilon{0.0};
  Family family = Family::isotropic_tilt;
  int axis = 0;
  double delta = 0.1;
  double eta = 0.5;
  RModeSpec r_mode;
  std::vector<double> psi{4.0};  // constant smoothing radii
  std::size_t n_envs = 1;
  std::size_t n_walks = 10'000;
  std::size_t n_points = 10;
  std::size_t n_pairs = 10'000;
  std::string output_path = ".";
  std::size_t capacity = default_capacity();
  std::uint64_t step_cap = kStepCap;
  // experiment specific
  int n_min = 4, n_max = 16;                       // cltscan
  std::vector<double> x_radii;                     // greenasym
  std::string method = "ball_corrected";           // greenasym
  std::vector<double> a;                           // hitprob
  double separation = 4;                           // hitprob: |x - y| = separation * a
  std::optional<std::array<double, 3>> annulus;    // hitprob: (l, |x|, L)
  std::vector<std::pair<double, double>> radii_pairs;  // transience
  std::vector<double> start_radii;                 // transience
  double rho = 2;                                  // transience
  bool domination = true;                          // gammacheck

  FamilySpec family_spec(double eps) const {
    FamilySpec f;
    f.family = family;
    f.dim = d;
    f.epsilon = eps;
    f.axis = axis;
    return f;
  }

  Schedule schedule(double Lv) const {
    switch (r_mode.mode) {
      case RMode::override_sr: return Schedule::override_sr(Lv, r_mode.s, r_mode.r, r_mode.scale);
      case RMode::constant: return Schedule::constant_r(Lv, r_mode.r);
      case RMode::paper_rL: break;
    }
    return Schedule::standard(Lv);
  }
};

namespace detail {

inline const std::set<std::string>& config_keys() {
  static const std::set<std::string> k = {
      "experiment", "seed",      "d",         "L",           "epsilon",     "family",   "axis",
      "delta",      "eta",       "r_mode",    "psi",         "n_envs",      "n_walks",  "n_points",
      "n_pairs",    "output_path", "capacity", "step_cap",   "n_range",     "x_radii",  "method",
      "a",          "separation", "annulus",  "radii_pairs", "start_radii", "rho",      "domination"};
  return k;
}

[[noreturn]] inline void bad_config(const std::string& msg) { throw Error(ErrorCode::config_invalid, msg); }

inline double get_number(const json& j, const std::string& key) {
  if (!j.is_number()) bad_config("'" + key + "' must be a number");
  const double v = j.get<double>();
  if (!std::isfinite(v)) bad_config("'" + key + "' must be finite");
  return v;
}

inline std::vector<double> get_list(const json& j, const std::string& key) {
  std::vector<double> v;
  if (j.is_array()) {
    for (const auto& e : j) v.push_back(get_number(e, key));
  } else {
    v.push_back(get_number(j, key));
  }
  if (v.empty()) bad_config("'" + key + "' must not be empty");
  return v;
}

inline std::uint64_t get_count(const json& j, const std::string& key, std::uint64_t min = 0) {
  if (!j.is_number_integer() && !j.is_number_unsigned()) bad_config("'" + key + "' must be an integer");
  if (j.is_number_integer() && j.get<std::int64_t>() < 0) bad_config("'" + key + "' must be nonnegative");
  const auto v = j.get<std::uint64_t>();
  if (v < min) bad_config("'" + key + "' must be >= " + std::to_string(min));
  return v;
}

inline bool uses_L(Experiment e) {
  return e != Experiment::cltscan && e != Experiment::greenasym && e != Experiment::transience;
}

}  // namespace detail

// Parse and validate. Throws config_invalid (or invalid_epsilon) with a
// message naming the offending key.
// null and [] mean "unset", so the canonical form parses back.
inline ExperimentConfig parse_config(const json& in) {
  using namespace detail;
  if (!in.is_object()) bad_config("config must be a JSON object");
  for (const auto& [k, v] : in.items())
    if (!config_keys().count(k)) bad_config("unknown key '" + k + "'");
  json j;
  for (const auto& [k, v] : in.items())
    if (!v.is_null() && !(v.is_array() && v.empty())) j[k] = v;
  if (!j.contains("experiment") || !j["experiment"].is_string()) bad_config("missing 'experiment'");
  if (!j.contains("seed")) bad_config("missing 'seed'");
  ExperimentConfig c;
  c.experiment = parse_experiment(j["experiment"].get<std::string>());
  c.seed = get_count(j["seed"], "seed");
  if (j.contains("d")) c.d = static_cast<int>(get_count(j["d"], "d", 1));
  if (c.d > kMaxDim) bad_config("'d' out of range");
  if (j.contains("L")) c.L = get_list(j["L"], "L");
  if (j.contains("epsilon")) c.epsilon = get_list(j["epsilon"], "epsilon");
  if (j.contains("family")) {
    if (!j["family"].is_string()) bad_config("'family' must be a string");
    c.family = parse_family(j["family"].get<std::string>());
  }
  if (j.contains("axis")) c.axis = static_cast<int>(get_count(j["axis"], "axis"));
  if (j.contains("delta")) c.delta = get_number(j["delta"], "delta");
  if (j.contains("eta")) c.eta = get_number(j["eta"], "eta");
  if (j.contains("psi")) c.psi = get_list(j["psi"], "psi");
  if (j.contains("n_envs")) c.n_envs = get_count(j["n_envs"], "n_envs", 1);
  if (j.contains("n_walks")) c.n_walks = get_count(j["n_walks"], "n_walks", 1);
  if (j.contains("n_points")) c.n_points = get_count(j["n_points"], "n_points");
  if (j.contains("n_pairs")) c.n_pairs = get_count(j["n_pairs"], "n_pairs");
  if (j.contains("capacity")) c.capacity = get_count(j["capacity"], "capacity", 1);
  if (j.contains("step_cap")) c.step_cap = get_count(j["step_cap"], "step_cap", 1);
  if (j.contains("output_path")) {
    if (!j["output_path"].is_string()) bad_config("'output_path' must be a string");
    c.output_path = j["output_path"].get<std::string>();
  }
  if (j.contains("r_mode")) {
    const auto& r = j["r_mode"];
    if (!r.is_object() || !r.contains("mode") || !r["mode"].is_string()) bad_config("'r_mode' needs a 'mode' string");
    const auto mode = r["mode"].get<std::string>();
    std::set<std::string> allowed = {"mode"};
    if (mode == "paper_rL") {
      c.r_mode.mode = RMode::paper_rL;
    } else if (mode == "constant") {
      c.r_mode.mode = RMode::constant;
      allowed.insert("r");
      if (!r.contains("r")) bad_config("r_mode constant needs 'r'");
      c.r_mode.r = get_number(r["r"], "r_mode.r");
    } else if (mode == "override") {
      c.r_mode.mode = RMode::override_sr;
      allowed.insert({"s", "r", "scale"});
      if (!r.contains("s") || !r.contains("r")) bad_config("r_mode override needs 's' and 'r'");
      c.r_mode.s = get_number(r["s"], "r_mode.s");
      c.r_mode.r = get_number(r["r"], "r_mode.r");
      if (r.contains("scale")) c.r_mode.scale = get_number(r["scale"], "r_mode.scale");
    } else {
      bad_config("unknown r_mode '" + mode + "'");
    }
    for (const auto& [k, v] : r.items())
      if (!allowed.count(k)) bad_config("unknown key 'r_mode." + k + "'");
  }
  if (j.contains("n_range")) {
    const auto v = get_list(j["n_range"], "n_range");
    if (v.size() != 2) bad_config("'n_range' must be [n_min, n_max]");
    c.n_min = static_cast<int>(v[0]);
    c.n_max = static_cast<int>(v[1]);
  }
  if (j.contains("x_radii")) c.x_radii = get_list(j["x_radii"], "x_radii");
  if (j.contains("method")) {
    if (!j["method"].is_string()) bad_config("'method' must be a string");
    c.method = j["method"].get<std::string>();
  }
  if (j.contains("a")) c.a = get_list(j["a"], "a");
  if (j.contains("separation")) c.separation = get_number(j["separation"], "separation");
  if (j.contains("annulus")) {
    const auto v = get_list(j["annulus"], "annulus");
    if (v.size() != 3) bad_config("'annulus' must be [l, |x|, L]");
    c.annulus = std::array<double, 3>{v[0], v[1], v[2]};
  }
  if (j.contains("radii_pairs")) {
    if (!j["radii_pairs"].is_array()) bad_config("'radii_pairs' must be a list of [l_in, l_out]");
    for (const auto& p : j["radii_pairs"]) {
      const auto v = get_list(p, "radii_pairs");
      if (v.size() != 2) bad_config("'radii_pairs' entries must be [l_in, l_out]");
      c.radii_pairs.emplace_back(v[0], v[1]);
    }
  }
  if (j.contains("start_radii")) c.start_radii = get_list(j["start_radii"], "start_radii");
  if (j.contains("rho")) c.rho = get_number(j["rho"], "rho");
  if (j.contains("domination")) {
    if (!j["domination"].is_boolean()) bad_config("'domination' must be a boolean");
    c.domination = j["domination"].get<bool>();
  }

  // semantic checks
  if (uses_L(c.experiment) && c.L.empty()) bad_config("'L' is required for " + experiment_name(c.experiment));
  for (double Lv : c.L)
    if (!(Lv >= 1)) bad_config("'L' values must be >= 1");
  for (double e : c.epsilon) c.family_spec(e).validate();
  for (double m : c.psi)
    if (!(m > 0)) bad_config("'psi' radii must be positive");
  if (!(c.delta > 0)) bad_config("'delta' must be positive");
  if (!(c.eta > 0 && c.eta < 1)) bad_config("'eta' must lie in (0, 1)");
  if (c.r_mode.mode == RMode::override_sr) {
    if (!(c.r_mode.r > 0 && c.r_mode.scale > 0)) bad_config("r_mode override needs r > 0 and scale > 0");
    for (double Lv : c.L)
      if (!(c.r_mode.r <= c.r_mode.s && c.r_mode.s <= Lv)) bad_config("schedule ordering r <= s <= L violated");
  }
  if (c.r_mode.mode == RMode::constant) {
    if (!(c.r_mode.r > 0)) bad_config("r_mode constant needs r > 0");
    for (double Lv : c.L)
      if (!(c.r_mode.r <= Lv)) bad_config("schedule ordering r <= L violated");
  }
  switch (c.experiment) {
    case Experiment::cltscan:
      if (!(c.n_min >= 1 && c.n_min < c.n_max)) bad_config("'n_range' needs 1 <= n_min < n_max");
      break;
    case Experiment::greenasym:
      if (c.x_radii.empty()) bad_config("'x_radii' is required for greenasym");
      if (c.method != "ball_corrected" && c.method != "mc") bad_config("'method' must be ball_corrected or mc");
      for (double r : c.x_radii)
        if (!(r >= 1)) bad_config("'x_radii' must be >= 1");
      break;
    case Experiment::hitprob:
      if (c.a.empty()) bad_config("'a' is required for hitprob");
      for (double a : c.a)
        if (!(a > 0 && c.separation * a <= c.L.front())) bad_config("hitprob needs 0 < a and separation * a <= L");
      if (c.annulus && !((*c.annulus)[0] < (*c.annulus)[1] && (*c.annulus)[1] <= (*c.annulus)[2]))
        bad_config("'annulus' needs l < |x| <= L");
      break;
    case Experiment::transience:
      if (c.radii_pairs.empty() || c.start_radii.empty())
        bad_config("transience needs 'radii_pairs' and 'start_radii'");
      for (const auto& [li, lo] : c.radii_pairs)
        if (!(li > 0 && li < lo)) bad_config("transience pairs need 0 < l_in < l_out");
      if (!(c.rho > 1)) bad_config("'rho' must exceed 1");
      break;
    case Experiment::smoothcmp:
      if (c.d != 3) bad_config("smoothcmp is implemented for d = 3");
      break;
    default: break;
  }
  return c;
}

inline ExperimentConfig load_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw Error(ErrorCode::config_invalid, "cannot open config '" + path + "'");
  json j;
  try {
    j = json::parse(f);
  } catch (const json::parse_error& e) {
    throw Error(ErrorCode::config_invalid, std::string("malformed JSON: ") + e.what());
  }
  return parse_config(j);
}

// Canonical form: every field with its effective value. output_path is left
// out since it does not affect results.
inline json to_json(const ExperimentConfig& c) {
  json j;
  j["experiment"] = experiment_name(c.experiment);
  j["seed"] = c.seed;
  j["d"] = c.d;
  j["L"] = c.L;
  j["epsilon"] = c.epsilon;
  j["family"] = family_name(c.family);
  j["axis"] = c.axis;
  j["delta"] = c.delta;
  j["eta"] = c.eta;
  json r;
  switch (c.r_mode.mode) {
    case RMode::paper_rL: r["mode"] = "paper_rL"; break;
    case RMode::constant:
      r["mode"] = "constant";
      r["r"] = c.r_mode.r;
      break;
    case RMode::override_sr:
      r["mode"] = "override";
      r["s"] = c.r_mode.s;
      r["r"] = c.r_mode.r;
      r["scale"] = c.r_mode.scale;
      break;
  }
  j["r_mode"] = r;
  j["psi"] = c.psi;
  j["n_envs"] = c.n_envs;
  j["n_walks"] = c.n_walks;
  j["n_points"] = c.n_points;
  j["n_pairs"] = c.n_pairs;
  j["capacity"] = c.capacity;
  j["step_cap"] = c.step_cap;
  j["n_range"] = {c.n_min, c.n_max};
  j["x_radii"] = c.x_radii;
  j["method"] = c.method;
  j["a"] = c.a;
  j["separation"] = c.separation;
  j["annulus"] = c.annulus ? json(*c.annulus) : json(nullptr);
  json pairs = json::array();
  for (const auto& [a, b] : c.radii_pairs) pairs.push_back({a, b});
  j["radii_pairs"] = pairs;
  j["start_radii"] = c.start_radii;
  j["rho"] = c.rho;
  j["domination"] = c.domination;
  return j;
}

inline std::string config_hash(const ExperimentConfig& c) {
  const std::string s = to_json(c).dump();
  const auto h = crc32(0L, reinterpret_cast<const Bytef*>(s.data()), static_cast<uInt>(s.size()));
  char buf[16];
  std::snprintf(buf, sizeof buf, "%08lx", static_cast<unsigned long>(h));
  return buf;
}

// ---------------------------------------------------------------------------
// Result rows

struct Row {
  std::string group;
  std::int64_t index = 0;
  std::optional<std::uint64_t> env_seed;
  std::string metric;
  double value = std::numeric_limits<double>::quiet_NaN();
  std::optional<Interval> ci;
  bool ok = true;
  std::string error_code, message;
};

inline json to_json(const Row& r) {
  json j;
  j["type"] = "row";
  j["group"] = r.group;
  j["index"] = r.index;
  j["env_seed"] = r.env_seed ? json(*r.env_seed) : json(nullptr);
  j["metric"] = r.metric;
  if (r.ok) {
    j["status"] = "ok";
    j["value"] = r.value;
    if (r.ci) j["ci"] = {r.ci->lo, r.ci->hi};
  } else {
    j["status"] = "error";
    j["error"] = {{"code", r.error_code}, {"message", r.message}};
  }
  return j;
}

inline Row row_from_json(const json& j) {
  Row r;
  r.group = j.at("group").get<std::string>();
  r.index = j.at("index").get<std::int64_t>();
  if (!j.at("env_seed").is_null()) r.env_seed = j.at("env_seed").get<std::uint64_t>();
  r.metric = j.at("metric").get<std::string>();
  r.ok = j.at("status") == "ok";
  if (r.ok) {
    r.value = j.at("value").is_null() ? std::numeric_limits<double>::quiet_NaN() : j.at("value").get<double>();
    if (j.contains("ci")) r.ci = Interval{j["ci"][0].get<double>(), j["ci"][1].get<double>()};
  } else {
    r.error_code = j.at("error").at("code").get<std::string>();
    r.message = j.at("error").at("message").get<std::string>();
  }
  return r;
}

struct Emit;

// A unit of work: one group/index, optionally tied to an environment.
struct Task {
  std::string group;
  std::int64_t index = 0;
  std::optional<std::uint64_t> env_seed;
  std::string label;  // metric name used on error rows
  std::function<void(Emit&)> fn;
};

struct Emit {
  const Task& task;
  std::vector<Row>& rows;
  void operator()(const std::string& metric, double value, std::optional<Interval> ci = std::nullopt) {
    Row r;
    r.group = task.group;
    r.index = task.index;
    r.env_seed = task.env_seed;
    r.metric = metric;
    r.value = value;
    r.ci = ci;
    rows.push_back(std::move(r));
  }
};

// ---------------------------------------------------------------------------
// Summary: one line per (group, metric, stat)

struct SummaryEntry {
  std::string group, metric, stat;
  double value = 0;
};

namespace detail {

// Groups and metrics in order of first appearance.
inline std::vector<std::pair<std::string, std::string>> keys_in_order(const std::vector<Row>& rows) {
  std::vector<std::pair<std::string, std::string>> keys;
  std::set<std::pair<std::string, std::string>> seen;
  for (const auto& r : rows)
    if (r.ok && seen.insert({r.group, r.metric}).second) keys.emplace_back(r.group, r.metric);
  return keys;
}

inline std::vector<const Row*> select(const std::vector<Row>& rows, const std::string& g, const std::string& m) {
  std::vector<const Row*> out;
  for (const auto& r : rows)
    if (r.ok && r.group == g && r.metric == m) out.push_back(&r);
  return out;
}

inline double group_L(const std::string& group) {
  const auto p = group.find("L=");
  if (p == std::string::npos) return std::numeric_limits<double>::quiet_NaN();
  return std::stod(group.substr(p + 2));
}

}  // namespace detail

// Aggregation:
//   every (group, metric): n, mean, sd (n - 1 denominator; 0 when n < 2), min, max
//   c1scan, metric "event": freq_b{i} = #(value == i) / n, wilson_lo/hi_b{i}
//     (z = 1.959963984540054), threshold_b{i} = (1/4) exp(-((3+i)/4) (ln L)^2)
//   c2scan, metric "pass": wilson_lo, wilson_hi on #(value == 1), threshold = L^{-6d}
//   cltscan, metric "sup_error": slope, intercept of ln(value) on ln(index)
//   gammacheck, metric "C1": max_over_min = max / min
inline std::vector<SummaryEntry> summarize(const ExperimentConfig& c, const std::vector<Row>& rows) {
  std::vector<SummaryEntry> out;
  for (const auto& [g, m] : detail::keys_in_order(rows)) {
    const auto sel = detail::select(rows, g, m);
    const double n = static_cast<double>(sel.size());
    double mean = 0, mn = std::numeric_limits<double>::infinity(), mx = -mn;
    for (const auto* r : sel) {
      mean += r->value;
      mn = std::min(mn, r->value);
      mx = std::max(mx, r->value);
    }
    mean /= n;
    double ss = 0;
    for (const auto* r : sel) ss += (r->value - mean) * (r->value - mean);
    const double sd = sel.size() > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
    out.push_back({g, m, "n", n});
    out.push_back({g, m, "mean", mean});
    out.push_back({g, m, "sd", sd});
    out.push_back({g, m, "min", mn});
    out.push_back({g, m, "max", mx});
    if (c.experiment == Experiment::c1scan && m == "event") {
      const double Lv = detail::group_L(g);
      for (int i = 1; i <= 4; ++i) {
        std::size_t k = 0;
        for (const auto* r : sel) k += r->value == i;
        const auto ci = wilson_interval(k, sel.size());
        const std::string b = "_b" + std::to_string(i);
        out.push_back({g, m, "freq" + b, static_cast<double>(k) / n});
        out.push_back({g, m, "wilson_lo" + b, ci.lo});
        out.push_back({g, m, "wilson_hi" + b, ci.hi});
        out.push_back({g, m, "threshold" + b, c1_threshold(Lv, i)});
      }
    }
    if (c.experiment == Experiment::c2scan && m == "pass") {
      std::size_t k = 0;
      for (const auto* r : sel) k += r->value == 1.0;
      const auto ci = wilson_interval(k, sel.size());
      out.push_back({g, m, "wilson_lo", ci.lo});
      out.push_back({g, m, "wilson_hi", ci.hi});
      out.push_back({g, m, "threshold", std::pow(detail::group_L(g), -6.0 * c.d)});
    }
    if (c.experiment == Experiment::cltscan && m == "sup_error" && sel.size() >= 2) {
      std::vector<double> x, y;
      for (const auto* r : sel) {
        x.push_back(std::log(static_cast<double>(r->index)));
        y.push_back(std::log(r->value));
      }
      const auto [b, a] = fit_line(x, y);
      out.push_back({g, m, "slope", b});
      out.push_back({g, m, "intercept", a});
    }
    if (c.experiment == Experiment::gammacheck && m == "C1") out.push_back({g, m, "max_over_min", mx / mn});
  }
  return out;
}

inline std::string format_number(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline void write_summary_csv(const std::string& path, const std::vector<SummaryEntry>& s) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error(ErrorCode::config_invalid, "cannot write '" + path + "'");
  f << "group,metric,stat,value\n";
  for (const auto& e : s) f << e.group << ',' << e.metric << ',' << e.stat << ',' << format_number(e.value) << '\n';
}

inline std::vector<SummaryEntry> read_summary_csv(const std::string& path) {
  std::ifstream f(path);
  std::string line;
  std::vector<SummaryEntry> out;
  std::getline(f, line);
  while (std::getline(f, line)) {
    std::stringstream ss(line);
    SummaryEntry e;
    std::string v;
    std::getline(ss, e.group, ',');
    std::getline(ss, e.metric, ',');
    std::getline(ss, e.stat, ',');
    std::getline(ss, v, ',');
    e.value = std::stod(v);
    out.push_back(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Experiments as task lists

namespace detail {

inline std::string fmt(double v) {
  std::ostringstream s;
  s << v;
  return s.str();
}

inline std::string group_name(std::initializer_list<std::pair<const char*, double>> kv) {
  std::string g;
  for (const auto& [k, v] : kv) {
    if (!g.empty()) g += ';';
    g += std::string(k) + "=" + fmt(v);
  }
  return g;
}

inline Point on_axis(int d, double r) {
  Point x(d);
  x.c[0] = static_cast<std::int32_t>(std::lround(r));
  return x;
}

// n distinct-stream draws from the interior of V_L.
inline std::vector<Point> sample_points(const Domain& D, std::size_t n, std::uint64_t key) {
  CounterRng rng(key);
  std::vector<Point> xs;
  for (std::size_t i = 0; i < n; ++i) xs.push_back(D.point(static_cast<std::size_t>(rng.below(D.n_interior()))));
  return xs;
}

inline double b2d(bool b) { return b ? 1.0 : 0.0; }

}  // namespace detail

inline std::vector<Task> build_tasks(const ExperimentConfig& c) {
  using detail::group_name;
  std::vector<Task> tasks;
  const int d = c.d;
  auto per_env = [&](const std::string& g, double eps, std::string label, auto body) {
    for (std::size_t e = 0; e < c.n_envs; ++e) {
      Task t;
      t.group = g;
      t.index = static_cast<std::int64_t>(e);
      t.env_seed = env_seed(c.seed, e);
      t.label = label;
      const auto spec = c.family_spec(eps);
      const auto sd = *t.env_seed;
      t.fn = [spec, sd, body, e](Emit& emit) {
        Environment env(spec, sd);
        body(env, e, emit);
      };
      tasks.push_back(std::move(t));
    }
  };

  switch (c.experiment) {
    case Experiment::dstar:
      for (double L : c.L)
        for (double eps : c.epsilon)
          for (double m : c.psi)
            per_env(group_name({{"L", L}, {"eps", eps}, {"m", m}}), eps, "d_metrics",
                    [L, m](const Environment& env, std::size_t, Emit& emit) {
                      const auto dm = d_metrics(env, L, SmoothingField::constant(m));
                      emit("D_star", dm.D_star);
                      emit("D_star_psi", dm.D_star_psi);
                    });
      break;

    case Experiment::c1scan:
      for (double L : c.L)
        for (double eps : c.epsilon)
          for (double m : c.psi)
            per_env(group_name({{"L", L}, {"eps", eps}, {"m", m}}), eps, "d_metrics",
                    [L, m, delta = c.delta](const Environment& env, std::size_t, Emit& emit) {
                      const auto dm = d_metrics(env, L, SmoothingField::constant(m));
                      emit("D_star", dm.D_star);
                      emit("D_star_psi", dm.D_star_psi);
                      emit("event", c1_event(L, delta, dm.D_star, dm.D_star_psi));
                    });
      break;

    case Experiment::c2scan:
      for (double L : c.L)
        for (double eps : c.epsilon)
          per_env(group_name({{"L", L}, {"eps", eps}}), eps, "c2_indicator",
                  [L, eta = c.eta](const Environment& env, std::size_t, Emit& emit) {
                    const auto ci = c2_indicator(env, L, eta);
                    emit("env_time", ci.env_time);
                    emit("srw_time", ci.srw_time);
                    emit("f_eta", ci.f);
                    emit("pass", detail::b2d(ci.pass));
                    if (env.spec().family == Family::balanced_axis) {
                      const double eps = env.epsilon(), dd = env.dim();
                      const double bound = dd / (1 - 2 * eps * dd) * (L + 1) * (L + 1);
                      emit("balanced_bound", bound);
                      emit("balanced_ok", detail::b2d(ci.env_time <= bound));
                    }
                  });
      break;

    case Experiment::sojourn:
      for (double L : c.L)
        for (double eps : c.epsilon)
          per_env(group_name({{"L", L}, {"eps", eps}}), eps, "sojourn",
                  [L, S = c.schedule(L), n = c.n_points, cap = c.capacity](const Environment& env, std::size_t,
                                                                           Emit& emit) {
                    const Domain D = Domain::ball(Point::zero(env.dim()), L, cap);
                    const auto xs = detail::sample_points(D, n, hash_words({env.seed(), 0x534Aull}));
                    const auto checks = sojourn_decomposition_check(env, S, xs);
                    double worst = 0;
                    for (const auto& ch : checks) worst = std::max(worst, ch.residual);
                    emit("max_residual", worst);
                    emit("max_residual_over_L2", worst / (L * L));
                    emit("E_tau_0", checks.empty() ? 0.0 : checks.front().direct);
                  });
      break;

    case Experiment::cltscan:
      for (double m : c.psi) {
        Task t;
        t.group = group_name({{"m", m}});
        t.label = "local_clt_scan";
        t.fn = [m, lo = c.n_min, hi = c.n_max, d](Emit& emit) {
          const auto rep = local_clt_scan(m, lo, hi, d);
          for (const auto& r : rep.rows) {
            Row row;
            row.group = emit.task.group;
            row.index = r.n;
            for (auto [name, v] : {std::pair<const char*, double>{"sup_error", r.sup_error},
                                   {"asymmetry", r.asymmetry},
                                   {"mass", r.mass},
                                   {"gaussian_mass", r.gaussian_mass}}) {
              row.metric = name;
              row.value = v;
              emit.rows.push_back(row);
            }
          }
          emit("gamma_m", rep.gamma);
        };
        tasks.push_back(std::move(t));
      }
      break;

    case Experiment::greenasym:
      for (double m : c.psi) {
        Task t;
        t.group = group_name({{"m", m}});
        t.label = "green_zd_estimate";
        t.fn = [m, c, d](Emit& emit) {
          std::vector<Point> xs;
          for (double r : c.x_radii) xs.push_back(detail::on_axis(d, r));
          GreenOptions opt;
          opt.method = c.method == "mc" ? GreenMethod::mc : GreenMethod::ball_corrected;
          opt.n_walks = c.n_walks;
          opt.seed = c.seed;
          opt.step_cap = c.step_cap;
          const auto est = green_zd_estimate(m, xs, opt, d);
          const double gam = gamma_m(m, d);
          for (const auto& g : est) {
            Row row;
            row.group = emit.task.group;
            row.index = g.x.c[0];
            const double s = gam * g.x.norm();
            for (auto [name, v, ci] :
                 {std::tuple<const char*, double, std::optional<Interval>>{"g", g.value, Interval{g.ci_lo, g.ci_hi}},
                  {"scaled", g.scaled, Interval{g.ci_lo * s, g.ci_hi * s}},
                  {"correction", g.correction, std::nullopt},
                  {"aborted", static_cast<double>(g.aborted), std::nullopt}}) {
              row.metric = name;
              row.value = v;
              row.ci = ci;
              emit.rows.push_back(row);
            }
          }
          emit("c_d", c_d(d));
          emit("gamma_m", gam);
        };
        tasks.push_back(std::move(t));
      }
      break;

    case Experiment::gammacheck:
      for (double L : c.L) {
        Task t;
        t.group = "all";
        t.index = std::lround(L);
        t.label = "gamma";
        t.fn = [L, c, d](Emit& emit) {
          GammaKernelSpec g;
          if (c.r_mode.mode == RMode::override_sr) g = GammaKernelSpec::make(L, c.r_mode.r, c.r_mode.s, d);
          else if (c.r_mode.mode == RMode::constant) g = GammaKernelSpec::make(L, c.r_mode.r, s_of(L), d);
          else g = GammaKernelSpec::standard(L, d);
          const auto lip = gamma_lipschitz_check(g, c.n_pairs, c.seed);
          emit("worst_tilde", lip.worst_tilde);
          emit("worst_a", lip.worst_a);
          emit("worst_triangle", lip.worst_triangle);
          emit("lipschitz_pass", detail::b2d(lip.passed()));
          const auto as = gamma_asymp_check(g, c.n_pairs, c.seed);
          emit("asymp_max_ratio", as.max_ratio);
          if (c.domination && c.n_points > 0) {
            const auto dom = gamma_bounds_report(g, c.schedule(L), c.n_points, c.n_points, c.seed);
            emit("C1", dom.C1);
            emit("C1_min_ratio", dom.min_ratio);
            emit("C1_finite_positive", detail::b2d(dom.finite_positive));
          }
        };
        tasks.push_back(std::move(t));
      }
      break;

    case Experiment::hitprob: {
      const double Lout = c.L.front();
      for (double a : c.a) {
        Task t;
        t.group = "hit";
        t.index = std::lround(a);
        t.label = "srw_hit_ball";
        t.fn = [a, Lout, c, d](Emit& emit) {
          const auto rep =
              srw_hit_ball_empirical(a, detail::on_axis(d, c.separation * a), Point::zero(d), Lout, c.capacity);
          const double ratio = rep.value / rep.main;
          emit("value", rep.value);
          emit("main", rep.main);
          emit("band", rep.band);
          emit("ratio", ratio);
          emit("K_needed", a * std::max(0.0, std::abs(ratio - 1) - a / Lout));
        };
        tasks.push_back(std::move(t));
      }
      if (c.annulus) {
        Task t;
        t.group = "annulus";
        t.label = "annulus_exit";
        t.fn = [an = *c.annulus, c, d](Emit& emit) {
          const Point x = detail::on_axis(d, an[1]);
          const double f = annulus_exit(an[0], x.norm(), an[2], d);
          const double ex = annulus_exit_exact(an[0], x, an[2], c.capacity);
          emit("formula", f);
          emit("exact", ex);
          emit("rel_error", std::abs(f - ex) / ex);
        };
        tasks.push_back(std::move(t));
      }
      break;
    }

    case Experiment::smoothcmp:
      for (double L : c.L)
        for (double eps : c.epsilon)
          for (double m : c.psi)
            per_env(group_name({{"L", L}, {"eps", eps}, {"m", m}}), eps, "smoothed_exit_compare",
                    [L, m, n = c.n_points, seed = c.seed](const Environment& env, std::size_t, Emit& emit) {
                      const auto rep = smoothed_exit_compare(&env, L, m, n, seed);
                      emit("sup_diff", rep.sup_diff);
                      emit("scaled", rep.scaled);
                      emit("max_lattice", rep.max_lattice);
                      emit("mass_error", rep.max_mass_error);
                    });
      break;

    case Experiment::transience:
      for (const auto& [li, lo] : c.radii_pairs)
        for (double eps : c.epsilon)
          for (std::size_t e = 0; e < c.n_envs; ++e)
            for (double r : c.start_radii) {
              Task t;
              t.group = group_name({{"l_in", li}, {"l_out", lo}, {"eps", eps}});
              t.index = std::lround(r);
              t.env_seed = env_seed(c.seed, e);
              t.label = "transience";
              t.fn = [li, lo, r, spec = c.family_spec(eps), sd = *t.env_seed, c](Emit& emit) {
                Environment env(spec, sd);
                const auto row = transience_row(env, li, lo, r, c.rho, c.n_walks, hash_words({c.seed, sd}),
                                                c.step_cap);
                emit("p_hit", row.p_hit, row.ci);
                emit("closed_form", row.closed_form);
                emit("majorant", row.majorant);
                emit("aborted", static_cast<double>(row.aborted));
              };
              tasks.push_back(std::move(t));
            }
      break;

    case Experiment::isotropy:
      for (double eps : c.epsilon)
        for (double m : c.psi) {
          Task t;
          t.group = group_name({{"eps", eps}, {"m", m}});
          t.label = "isotropy_cancellation";
          t.fn = [eps, m, c, d](Emit& emit) {
            // nu = mean over environments of (Pi^ - pi^)(0, .), then averaged over the group
            SignedMeasure raw;
            const Point o = Point::zero(d);
            for (const auto& [y, p] : srw_free_row(o, m).entries) raw[y] -= p * static_cast<double>(c.n_envs);
            for (std::size_t e = 0; e < c.n_envs; ++e) {
              Environment env(c.family_spec(eps), env_seed(c.seed, e));
              for (const auto& [y, p] : coarse_row(o, m, nullptr, env_law(env), env.is_srw()).entries) raw[y] += p;
            }
            for (auto& [y, v] : raw) v /= static_cast<double>(c.n_envs);
            bool raw_sym = true;
            try {
              validate_symmetry(raw);
            } catch (const Error&) {
              raw_sym = false;
            }
            const auto nu = symmetrize(raw, d);
            double l2 = 0;
            for (const auto& [y, v] : nu) l2 = std::max(l2, static_cast<double>(y.norm2()));
            const auto rep = isotropy_cancellation(nu, std::sqrt(l2) + 1e-9, c.L.front(), m, o);
            double cmean = 0;
            for (int i = 0; i < d; ++i) cmean += rep.second_moment(i, i) / d;
            emit("raw_symmetric", detail::b2d(raw_sym));
            emit("mass", rep.mass);
            emit("l1", rep.l1);
            emit("max_first", rep.max_first);
            emit("max_offdiag", rep.max_offdiag);
            emit("diag_spread", rep.diag_spread);
            emit("c", cmean);
            emit("sup_value", rep.sup_value);
            emit("bound_shape", rep.bound_shape);
            emit("ratio", rep.ratio);
          };
          tasks.push_back(std::move(t));
        }
      break;
  }
  return tasks;
}

// ---------------------------------------------------------------------------
// Runner

struct RunResult {
  std::string jsonl_path, csv_path;
  std::size_t n_rows = 0, n_errors = 0;
  std::vector<Row> rows;
  std::vector<SummaryEntry> summary;
  int exit_code() const { return n_errors == 0 ? 0 : 1; }
};

inline std::string utc_timestamp() {
  const auto now = std::chrono::system_clock::now();
  const std::time_t t = std::chrono::system_clock::to_time_t(now);
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

inline std::vector<std::string> config_warnings(const ExperimentConfig& c) {
  std::vector<std::string> w;
  const bool scheduled = c.experiment == Experiment::sojourn || c.experiment == Experiment::gammacheck;
  if (scheduled && c.r_mode.mode != RMode::override_sr)
    for (double L : c.L)
      if (std::pow(std::log(L), 3) > L)
        w.push_back("schedule is degenerate at L=" + detail::fmt(L) + ": (log L)^3 > L; consider r_mode override");
  return w;
}

inline json header_json(const ExperimentConfig& c) {
  json h;
  h["type"] = "header";
  h["schema_version"] = kSchemaVersion;
  h["experiment"] = experiment_name(c.experiment);
  h["config"] = to_json(c);
  h["config_hash"] = config_hash(c);
  h["seed"] = c.seed;
  const auto& phi = default_mollifier();
  h["provenance"] = {{"build_id", RWRE_BUILD_ID},
                     {"mollifier_Z", phi.Z()},
                     {"mollifier_panels", phi.panels()},
                     {"h_p_cal", default_hfunction().p_cal()},
                     {"solver_tolerance", SolverOptions{}.tolerance},
                     {"solver_accept", SolverOptions{}.accept},
                     {"step_cap", c.step_cap}};
  h["warnings"] = config_warnings(c);
  h["timestamp"] = utc_timestamp();
  return h;
}

// Runs every task, streaming rows to <out>/<experiment>.jsonl in task order
// (each line flushed), then writes <out>/<experiment>_summary.csv. The JSONL
// file is opened for append.
inline RunResult run(const ExperimentConfig& c) {
  namespace fs = std::filesystem;
  RunResult res;
  fs::create_directories(c.output_path);
  const std::string base = (fs::path(c.output_path) / experiment_name(c.experiment)).string();
  res.jsonl_path = base + ".jsonl";
  res.csv_path = base + "_summary.csv";
  for (const auto& w : config_warnings(c)) std::cerr << "WARNING: " << w << "\n";
  struct CapacityScope {
    std::size_t saved;
    explicit CapacityScope(std::size_t v) : saved(capacity_override().exchange(v)) {}
    ~CapacityScope() { capacity_override() = saved; }
  } capacity_scope(c.capacity);

  std::ofstream out(res.jsonl_path, std::ios::binary | std::ios::app);
  if (!out) throw Error(ErrorCode::config_invalid, "cannot write '" + res.jsonl_path + "'");
  out << header_json(c).dump() << '\n' << std::flush;

  const auto tasks = build_tasks(c);
  std::mutex mu;
  std::size_t next = 0;
  std::map<std::size_t, std::vector<Row>> pending;
  auto deliver = [&](std::size_t i, std::vector<Row> rows) {
    std::lock_guard<std::mutex> lock(mu);
    pending[i] = std::move(rows);
    for (auto it = pending.find(next); it != pending.end(); it = pending.find(next)) {
      for (auto& r : it->second) {
        out << to_json(r).dump() << '\n' << std::flush;
        res.n_errors += !r.ok;
        res.rows.push_back(std::move(r));
      }
      pending.erase(it);
      ++next;
    }
  };
  parallel_for(tasks.size(), [&](std::size_t i) {
    const Task& t = tasks[i];
    std::vector<Row> rows;
    auto fail = [&](const std::string& code, const std::string& msg) {
      rows.clear();
      Row r;
      r.group = t.group;
      r.index = t.index;
      r.env_seed = t.env_seed;
      r.metric = t.label;
      r.ok = false;
      r.error_code = code;
      r.message = msg;
      rows.push_back(std::move(r));
    };
    try {
      Emit emit{t, rows};
      t.fn(emit);
    } catch (const Error& e) {
      fail(to_string(e.code()), e.what());
    } catch (const std::bad_alloc&) {
      fail(to_string(ErrorCode::capacity), "allocation failed");
    } catch (const std::exception& e) {
      fail(to_string(ErrorCode::solver_failure), e.what());
    }
    deliver(i, std::move(rows));
  });
  res.n_rows = res.rows.size();
  json footer = {{"type", "footer"}, {"rows", res.n_rows}, {"errors", res.n_errors}};
  out << footer.dump() << '\n' << std::flush;

  res.summary = summarize(c, res.rows);
  write_summary_csv(res.csv_path, res.summary);
  return res;
}

// Row lines of a JSONL file (header, footer and timestamps dropped).
inline std::vector<Row> read_rows(const std::string& path) {
  std::ifstream f(path);
  std::vector<Row> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    const auto j = json::parse(line);
    if (j.at("type") == "row") rows.push_back(row_from_json(j));
  }
  return rows;
}

}  // namespace rwre
