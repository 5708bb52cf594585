#pragma once

// Distances and badness: D-metrics, good/bad points, environment classes and
// boundary layers, C1 frequencies, smoothed exit laws against Brownian
// motion, the isotropy cancellation, and space/time classification.

#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>
#include <optional>
#include <vector>

#include "rwre/coarse.hpp"
#include "rwre/environment.hpp"
#include "rwre/errors.hpp"
#include "rwre/kernel.hpp"
#include "rwre/lattice.hpp"
#include "rwre/mollifier.hpp"
#include "rwre/parallel.hpp"
#include "rwre/reference.hpp"
#include "rwre/rng.hpp"
#include "rwre/schedule.hpp"
#include "rwre/solver.hpp"

namespace rwre {

// (log h)^p with the natural log; delta when h <= e.
inline double log_threshold(double h, double p, double delta) {
  if (!(h > std::numbers::e)) return delta;
  return std::pow(std::log(h), p);
}

inline double f_eta(double eta, double L) {
  const double n = std::ceil(std::log(L));
  double s = 0;
  for (int k = 1; k <= static_cast<int>(n); ++k) s += std::pow(static_cast<double>(k), -1.5);
  return eta / 3 * s;
}

struct Interval {
  double lo = 0, hi = 0;
};

inline Interval wilson_interval(std::size_t k, std::size_t n, double z = 1.959963984540054) {
  if (n == 0) return {0, 1};
  const double nn = static_cast<double>(n), p = static_cast<double>(k) / nn, z2 = z * z;
  const double c = (p + z2 / (2 * nn)) / (1 + z2 / nn);
  const double w = z / (1 + z2 / nn) * std::sqrt(p * (1 - p) / nn + z2 / (4 * nn * nn));
  return {std::max(0.0, c - w), std::min(1.0, c + w)};
}

// ---------------------------------------------------------------------------
// Exit laws of V_t(x) against simple random walk, for every t in [t_lo, t_hi].
// The law only changes when t^2 crosses a lattice norm, so the radii below
// cover the interval exactly.

struct BallScan {
  std::vector<std::int64_t> radii;  // squared radii of the distinct sets
  std::vector<double> tv;           // ||(Pi - pi)(x,.)||_1
  std::vector<double> env_time;     // E_{x,w}[tau]
  std::vector<double> srw_time;     // E_x[tau]

  double max_tv() const { return tv.empty() ? 0.0 : *std::max_element(tv.begin(), tv.end()); }
  double max_time_deviation() const {
    double m = 0;
    for (std::size_t i = 0; i < env_time.size(); ++i) m = std::max(m, std::abs(env_time[i] / srw_time[i] - 1));
    return m;
  }
};

inline BallScan ball_scan(const Environment& env, const Point& x, double t_lo, double t_hi) {
  if (!(t_lo >= 0 && t_hi >= t_lo)) throw Error(ErrorCode::domain_violation, "ball_scan needs 0 <= t_lo <= t_hi");
  const int d = x.dim;
  const std::int64_t klo = squared_threshold(t_lo), khi = squared_threshold(t_hi);
  NestedBallSolver S(x, khi, nullptr, env_law(env));
  auto srw = SrwBallCache::instance().get(d, khi);
  if (S.n_targets() != srw->targets.size()) throw Error(ErrorCode::solver_failure, "ball target layout mismatch");
  for (std::size_t j = 0; j < S.n_targets(); ++j)
    if (!(S.target(j) == x + srw->targets[j])) throw Error(ErrorCode::solver_failure, "ball target layout mismatch");
  BallScan out;
  out.radii.push_back(klo);
  for (auto k : S.radii())
    if (k > klo && k <= khi) out.radii.push_back(k);
  for (auto k : out.radii) {
    const auto e = S.exit_law(k);
    const auto pos = static_cast<std::size_t>(std::upper_bound(srw->radii.begin(), srw->radii.end(), k) -
                                              srw->radii.begin()) - 1;
    const auto& s = srw->laws[pos];
    double tv = 0;
    for (std::size_t j = 0; j < e.prob.size(); ++j) tv += std::abs(e.prob[j] - s.prob[j]);
    out.tv.push_back(tv);
    out.env_time.push_back(e.mean_time);
    out.srw_time.push_back(s.mean_time);
  }
  return out;
}

// ||(Pc - pc) pc(x,.)||_1 for the interior ordinal i of two coarse kernels on
// the same domain. Scratch vectors must have size domain->size() and be zero.
inline double smoothed_row_difference(const Kernel& Pc, const Kernel& pc, std::size_t i, std::vector<double>& delta,
                                      std::vector<double>& acc) {
  const std::size_t n = pc.n_interior();
  std::vector<std::size_t> dsup, asup;
  auto add = [](std::vector<double>& v, std::vector<std::size_t>& sup, std::size_t j, double w) {
    if (v[j] == 0.0) sup.push_back(j);
    v[j] += w;
  };
  for (SpMat::InnerIterator it(Pc.P, static_cast<Eigen::Index>(i)); it; ++it)
    add(delta, dsup, static_cast<std::size_t>(it.col()), it.value());
  for (SpMat::InnerIterator it(pc.P, static_cast<Eigen::Index>(i)); it; ++it)
    add(delta, dsup, static_cast<std::size_t>(it.col()), -it.value());
  std::sort(dsup.begin(), dsup.end());
  dsup.erase(std::unique(dsup.begin(), dsup.end()), dsup.end());
  for (auto j : dsup) {
    const double w = delta[j];
    delta[j] = 0.0;
    if (w == 0.0) continue;
    if (j < n) {
      for (SpMat::InnerIterator it(pc.P, static_cast<Eigen::Index>(j)); it; ++it)
        add(acc, asup, static_cast<std::size_t>(it.col()), w * it.value());
    } else {
      add(acc, asup, j, w);
    }
  }
  std::sort(asup.begin(), asup.end());
  asup.erase(std::unique(asup.begin(), asup.end()), asup.end());
  double s = 0;
  for (auto j : asup) {
    s += std::abs(acc[j]);
    acc[j] = 0.0;
  }
  return s;
}

// ---------------------------------------------------------------------------
// Smoothing by free coarse steps of SRW, on a dense box [-R, R]^d.

class FreeSmoother {
 public:
  FreeSmoother(int d, int R) : d_(d), R_(R) {
    std::size_t total = 1;
    for (int i = 0; i < d; ++i) {
      stride_[i] = static_cast<std::int64_t>(total);
      total *= static_cast<std::size_t>(2 * R + 1);
    }
    if (total > kGridLimit) throw CapacityError("smoothing box too large");
    acc_.assign(total, 0.0);
  }

  // acc += w * pi^_m(z, .)
  void add(const Point& z, double w, double m) {
    const auto& tab = table(m);
    for (int i = 0; i < d_; ++i)
      if (std::abs(z.c[i]) + tab.radius > R_) throw Error(ErrorCode::domain_violation, "smoothing box too small");
    const std::int64_t base = linear(z);
    bases_.push_back(base);
    max_radius_ = std::max(max_radius_, tab.radius);
    for (std::size_t k = 0; k < tab.offsets.size(); ++k)
      acc_[static_cast<std::size_t>(base + tab.offsets[k])] += w * tab.probs[k];
  }

  // Reduce over the touched region and zero it.
  template <class Fn>
  void drain(Fn&& fn) {
    // all mass lies within max_radius_ of some base; sweep the union box
    std::array<std::int32_t, kMaxDim> lo{}, hi{};
    for (int i = 0; i < d_; ++i) lo[i] = std::numeric_limits<std::int32_t>::max(), hi[i] = std::numeric_limits<std::int32_t>::min();
    for (auto b : bases_) {
      Point p = point(b);
      for (int i = 0; i < d_; ++i) {
        lo[i] = std::min(lo[i], p.c[i] - max_radius_);
        hi[i] = std::max(hi[i], p.c[i] + max_radius_);
      }
    }
    if (!bases_.empty()) {
      Point p(d_);
      for (int i = 0; i < d_; ++i) p.c[i] = lo[i];
      for (;;) {
        const auto j = static_cast<std::size_t>(linear(p));
        if (acc_[j] != 0.0) {
          fn(p, acc_[j]);
          acc_[j] = 0.0;
        }
        int i = 0;
        while (i < d_ && ++p.c[i] > hi[i]) p.c[i] = lo[i], ++i;
        if (i == d_) break;
      }
    }
    bases_.clear();
    max_radius_ = 0;
  }

  double l1_and_reset() {
    double s = 0;
    drain([&](const Point&, double v) { s += std::abs(v); });
    return s;
  }
  double max_abs_and_reset() {
    double s = 0;
    drain([&](const Point&, double v) { s = std::max(s, std::abs(v)); });
    return s;
  }

 private:
  static constexpr std::size_t kGridLimit = 50'000'000;
  struct Table {
    int radius = 0;
    std::vector<std::int64_t> offsets;
    std::vector<double> probs;
  };
  const Table& table(double m) {
    auto it = tables_.find(m);
    if (it != tables_.end()) return it->second;
    auto sd = step_distribution(m, d_);
    Table t;
    t.radius = sd->radius;
    for (std::size_t k = 0; k < sd->points.size(); ++k) {
      std::int64_t off = 0;
      for (int i = 0; i < d_; ++i) off += sd->points[k].c[i] * stride_[i];
      t.offsets.push_back(off);
      t.probs.push_back(sd->probs[k]);
    }
    return tables_.emplace(m, std::move(t)).first->second;
  }
  std::int64_t linear(const Point& p) const {
    std::int64_t s = 0;
    for (int i = 0; i < d_; ++i) s += (p.c[i] + R_) * stride_[i];
    return s;
  }
  Point point(std::int64_t s) const {
    Point p(d_);
    for (int i = d_ - 1; i >= 0; --i) {
      p.c[i] = static_cast<std::int32_t>(s / stride_[i]) - R_;
      s %= stride_[i];
    }
    return p;
  }
  int d_, R_;
  std::array<std::int64_t, kMaxDim> stride_{};
  std::vector<double> acc_;
  std::map<double, Table> tables_;
  std::vector<std::int64_t> bases_;
  int max_radius_ = 0;
};

// ---------------------------------------------------------------------------
// D-metrics on V_t (centred at the origin) for starting points in
// V_{sup_radius}; sup_radius < 0 means t/5.

struct DMetrics {
  double t = 0;
  double sup_radius = 0;
  std::vector<Point> xs;
  std::vector<double> D;      // ||(Pi_{V_t} - pi_{V_t})(x,.)||_1
  std::vector<double> D_psi;  // the same after one pi^_psi step
  double D_star = 0;
  double D_star_psi = 0;
};

inline DMetrics d_metrics(const Environment& env, double t, const SmoothingField& psi, double sup_radius = -1,
                          std::size_t capacity = default_capacity()) {
  const int d = env.dim();
  DMetrics out;
  out.t = t;
  out.sup_radius = sup_radius < 0 ? t / 5 : sup_radius;
  if (out.sup_radius > t) throw Error(ErrorCode::domain_violation, "supremum domain exceeds the ball");
  auto W = make_ball(Point::zero(d), t, capacity);
  GreenOperator G(rwre_kernel(env, W));
  GreenOperator g(srw_kernel(W));
  const Domain inner = Domain::ball(Point::zero(d), out.sup_radius);
  for (const auto& x : inner.interior()) out.xs.push_back(x);
  // smoothing radii on the boundary
  std::vector<double> ms;
  int reach = 0;
  for (const auto& z : W->boundary()) {
    ms.push_back(psi(z));
    if (!(ms.back() > 0)) throw Error(ErrorCode::degenerate_field, "psi must be positive on the boundary");
    reach = std::max(reach, static_cast<int>(std::ceil(2 * ms.back())) + 2);
  }
  FreeSmoother sm(d, static_cast<int>(std::ceil(t)) + 2 + reach);
  for (const auto& x : out.xs) {
    const auto a = G.exit_measure(x), b = g.exit_measure(x);
    double tv = 0;
    for (std::size_t k = 0; k < a.weights.size(); ++k) {
      const double w = a.weights[k] - b.weights[k];
      tv += std::abs(w);
      if (w != 0.0) sm.add(W->boundary()[k], w, ms[k]);
    }
    out.D.push_back(tv);
    out.D_psi.push_back(sm.l1_and_reset());
  }
  for (std::size_t i = 0; i < out.xs.size(); ++i) {
    out.D_star = std::max(out.D_star, out.D[i]);
    out.D_star_psi = std::max(out.D_star_psi, out.D_psi[i]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Good and bad points of V_L for one schedule.

struct PointFlags {
  Point x;
  double h = 0;
  double tv = 0;              // max over t in [h, 2h]
  double smoothed = 0;        // ||(Pi^ - pi^) pi^(x,.)||_1
  bool smoothed_checked = false;  // d_L(x) > 2r
  double threshold = 0;       // (log h)^{-9}, or delta when h <= e
  bool good = true;
};

struct PointClassification {
  Schedule S;
  double delta = 0;
  DomainPtr domain;
  std::vector<PointFlags> points;  // interior order of the domain

  std::vector<Point> bad() const {
    std::vector<Point> b;
    for (const auto& p : points)
      if (!p.good) b.push_back(p.x);
    return b;
  }
};

inline PointClassification classify_points(const Environment& env, const Schedule& S, double delta,
                                           std::size_t capacity = default_capacity()) {
  if (!(delta > 0)) throw Error(ErrorCode::config_invalid, "delta must be positive");
  const int d = env.dim();
  PointClassification out;
  out.S = S;
  out.delta = delta;
  out.domain = make_ball(Point::zero(d), S.L, capacity);
  const auto field = SmoothingField::h_profile(S, Point::zero(d));
  const auto Pc = coarse_grain(env, field, out.domain);
  const auto pc = coarse_grain_srw(d, field, out.domain);
  const std::size_t n = out.domain->n_interior();
  out.points.resize(n);
  parallel_for(n, [&](std::size_t i) {
    PointFlags& f = out.points[i];
    f.x = out.domain->point(i);
    f.h = S(f.x);
    f.tv = ball_scan(env, f.x, f.h, 2 * f.h).max_tv();
    f.threshold = log_threshold(f.h, -9, delta);
    f.smoothed_checked = d_L(f.x, S.L) > 2 * S.r;
    thread_local std::vector<double> s1, s2;
    if (s1.size() != out.domain->size()) s1.assign(out.domain->size(), 0.0), s2.assign(out.domain->size(), 0.0);
    f.smoothed = smoothed_row_difference(Pc.kernel, pc.kernel, i, s1, s2);
    f.good = f.tv <= delta && (!f.smoothed_checked || f.smoothed <= f.threshold);
  });
  return out;
}

// ---------------------------------------------------------------------------
// Environment classes.

enum class EnvClass { good, one_bad, many_bad };

inline const char* env_class_name(EnvClass c) {
  switch (c) {
    case EnvClass::good: return "Good";
    case EnvClass::one_bad: return "OneBad";
    case EnvClass::many_bad: return "ManyBad";
  }
  return "?";
}

struct LayerStats {
  int j = 0;
  double lo = 0, hi = 0;      // d_L range [lo, hi)
  std::size_t N = 0;          // nonempty boxes
  std::size_t Y = 0;          // boxes meeting the boundary-bad set
  double fraction = 0;        // (log r + j)^{-3/2}
  bool bd_bad = false;
  double separation = 0;      // 4 max h over the layer
  std::vector<std::size_t> color_sizes;
};

struct BadnessReport {
  double L = 0, r = 0, rL = 0, delta = 0;
  std::vector<Point> bad_L;         // B_L
  std::vector<Point> bad_r;         // B_{L,r}
  std::vector<Point> boundary_bad;  // B_{L,r} within Sh_L(r_L)
  std::vector<Point> star;          // B^*_{L,r}
  EnvClass env_class = EnvClass::good;
  int level = 0;                    // 1..4 when OneBad and B_L nonempty
  std::optional<Point> center;      // an enclosing centre when OneBad
  double center_radius = 0;         // 4 h_L(center)
  std::vector<LayerStats> layers;
  bool bd_bad = false;
};

// A centre c in V_L with B within V_{4h(c)}(c), by brute force.
inline std::optional<Point> enclosing_center(const std::vector<Point>& B, const Domain& VL, const Schedule& SL) {
  if (B.empty()) return Point::zero(VL.dim());
  for (const auto& c : VL.interior()) {
    const std::int64_t R2 = squared_threshold(4 * SL(c));
    bool ok = true;
    for (const auto& b : B)
      if (dist2(b, c) > R2) {
        ok = false;
        break;
      }
    if (ok) return c;
  }
  return std::nullopt;
}

inline int badness_level(const PointClassification& rep) {
  for (const auto& p : rep.points)
    if (p.tv > rep.delta) return 4;
  int level = 1;
  for (const auto& p : rep.points) {
    if (!p.smoothed_checked) continue;
    int li = 4;
    for (int i = 1; i <= 3; ++i)
      if (p.smoothed <= log_threshold(p.h, -9.0 + 9.0 * i / 4, rep.delta)) {
        li = i;
        break;
      }
    level = std::max(level, li);
  }
  return level;
}

namespace detail {

inline double box_distance(const std::vector<Point>& a, const std::vector<Point>& b) {
  std::int64_t best = std::numeric_limits<std::int64_t>::max();
  for (const auto& p : a)
    for (const auto& q : b) best = std::min(best, dist2(p, q));
  return std::sqrt(static_cast<double>(best));
}

}  // namespace detail

// at_rL: classification for r = r_L; at_r: for the scheme parameter r (the
// same report when r = r_L).
inline BadnessReport classify_environment(const PointClassification& at_rL, const PointClassification* at_r = nullptr) {
  if (!at_r) at_r = &at_rL;
  const Schedule& SL = at_rL.S;
  const Schedule& S = at_r->S;
  const Domain& VL = *at_rL.domain;
  BadnessReport rep;
  rep.L = SL.L;
  rep.r = S.r;
  rep.rL = SL.rL;
  rep.delta = at_rL.delta;
  rep.bad_L = at_rL.bad();
  rep.bad_r = at_r->bad();
  for (const auto& b : rep.bad_r)
    if (d_L(b, rep.L) < rep.rL) rep.boundary_bad.push_back(b);
  rep.star = rep.boundary_bad;
  rep.star.insert(rep.star.end(), rep.bad_L.begin(), rep.bad_L.end());
  std::sort(rep.star.begin(), rep.star.end());
  rep.star.erase(std::unique(rep.star.begin(), rep.star.end()), rep.star.end());

  if (rep.bad_L.empty()) {
    rep.env_class = EnvClass::good;
  } else if (auto c = enclosing_center(rep.bad_L, VL, SL)) {
    rep.env_class = EnvClass::one_bad;
    rep.center = c;
    rep.center_radius = 4 * SL(*c);
    rep.level = badness_level(at_rL);
  } else {
    rep.env_class = EnvClass::many_bad;
  }

  // boundary layers
  const double r = rep.r;
  const int J1 = rep.rL > r ? static_cast<int>(std::floor(std::log(rep.rL / r) / std::log(2.0))) + 1 : 1;
  std::vector<char> is_bd(VL.n_interior(), 0);
  for (const auto& b : rep.boundary_bad) is_bd[*VL.find(b)] = 1;
  for (int j = 0; j <= J1; ++j) {
    LayerStats ls;
    ls.j = j;
    ls.lo = j == 0 ? 0.0 : r * std::ldexp(1.0, j);
    ls.hi = r * std::ldexp(1.0, j + 1);
    const double w = r * std::ldexp(1.0, j);
    std::map<Point, std::vector<Point>> boxes;
    std::map<Point, bool> bad_box;
    double hmax = 0;
    for (std::size_t i = 0; i < VL.n_interior(); ++i) {
      const Point& x = VL.point(i);
      const double dl = d_L(x, rep.L);
      if (!(dl >= ls.lo && dl < ls.hi)) continue;
      Point k(x.dim);
      for (int a = 0; a < x.dim; ++a) k.c[a] = static_cast<std::int32_t>(std::ceil(x.c[a] / w)) - 1;
      boxes[k].push_back(x);
      bad_box[k] = bad_box[k] || is_bd[i];
      hmax = std::max(hmax, S(x));
    }
    ls.N = boxes.size();
    for (const auto& [k, b] : bad_box) ls.Y += b ? 1 : 0;
    const double base = std::log(r) + j;
    ls.fraction = base > 0 ? std::pow(base, -1.5) : std::numeric_limits<double>::infinity();
    ls.bd_bad = ls.N > 0 && static_cast<double>(ls.Y) >= ls.fraction * static_cast<double>(ls.N);
    rep.bd_bad = rep.bd_bad || ls.bd_bad;
    // greedy colouring: same colour only when d(D, D') > 4 max h
    ls.separation = 4 * hmax;
    std::vector<const std::vector<Point>*> list;
    std::vector<Point> keys;
    for (const auto& [k, pts] : boxes) {
      keys.push_back(k);
      list.push_back(&pts);
    }
    std::vector<int> color(list.size(), -1);
    for (std::size_t a = 0; a < list.size(); ++a) {
      std::vector<char> used;
      for (std::size_t b = 0; b < a; ++b) {
        // cheap lower bound from box indices
        double gap2 = 0;
        for (int i = 0; i < keys[a].dim; ++i) {
          const double g = std::max(0.0, (std::abs(keys[a].c[i] - keys[b].c[i]) - 1) * w);
          gap2 += g * g;
        }
        if (std::sqrt(gap2) > ls.separation) continue;
        if (detail::box_distance(*list[a], *list[b]) > ls.separation) continue;
        if (static_cast<std::size_t>(color[b]) >= used.size()) used.resize(static_cast<std::size_t>(color[b]) + 1, 0);
        used[static_cast<std::size_t>(color[b])] = 1;
      }
      int c = 0;
      while (static_cast<std::size_t>(c) < used.size() && used[static_cast<std::size_t>(c)]) ++c;
      color[a] = c;
      if (static_cast<std::size_t>(c) >= ls.color_sizes.size()) ls.color_sizes.resize(static_cast<std::size_t>(c) + 1, 0);
      ++ls.color_sizes[static_cast<std::size_t>(c)];
    }
    rep.layers.push_back(ls);
  }
  return rep;
}

// Classification with both schedules: r_L (the standard schedule, or r itself
// in override mode) and r.
inline BadnessReport classify(const Environment& env, const Schedule& S, double delta) {
  const auto at_r = classify_points(env, S, delta);
  if (S.mode != RMode::constant) return classify_environment(at_r);
  const auto at_rL = classify_points(env, Schedule::standard(S.L), delta);
  return classify_environment(at_rL, &at_r);
}

// ---------------------------------------------------------------------------
// C1 frequencies.

struct C1Row {
  double L = 0, m = 0;
  int i = 0;
  std::size_t hits = 0, n = 0;
  double freq = 0;
  Interval ci;
  double threshold = 0;  // (1/4) exp(-((3+i)/4)(log L)^2)
  bool pass = true;      // freq <= threshold
};

struct C1Sample {
  double L = 0, m = 0;
  std::size_t env = 0;
  double D_star = 0, D_star_psi = 0;
};

struct C1Report {
  std::vector<C1Row> rows;
  std::vector<C1Sample> samples;
  bool passed() const {
    return std::all_of(rows.begin(), rows.end(), [](const C1Row& r) { return r.pass; });
  }
};

inline double c1_threshold(double L, int i) { return 0.25 * std::exp(-((3.0 + i) / 4) * std::pow(std::log(L), 2)); }

// Which b_i event (1..4) the pair (D*, D*_psi) falls in, 0 for none.
inline int c1_event(double L, double delta, double D_star, double D_star_psi) {
  const double lg = std::log(L);
  if (D_star_psi > std::pow(lg, -3.0 + 3.0 / 4) || D_star > delta) return 4;
  for (int i = 1; i <= 3; ++i)
    if (D_star_psi > std::pow(lg, -9.0 + 9.0 * (i - 1) / 4) && D_star_psi <= std::pow(lg, -9.0 + 9.0 * i / 4))
      return i;
  return 0;
}

inline std::uint64_t env_seed(std::uint64_t seed, std::size_t index) { return hash_words({seed, 0x454E56ull, index}); }

inline C1Report check_C1(const FamilySpec& fam, double delta, const std::vector<double>& Ls,
                         const std::vector<double>& ms, std::size_t n_envs, std::uint64_t seed) {
  C1Report rep;
  for (double L : Ls)
    for (double m : ms) {
      std::vector<C1Sample> s(n_envs);
      parallel_for(n_envs, [&](std::size_t e) {
        Environment env(fam, env_seed(seed, e));
        auto dm = d_metrics(env, L, SmoothingField::constant(m));
        s[e] = {L, m, e, dm.D_star, dm.D_star_psi};
      });
      std::array<std::size_t, 5> hits{};
      for (const auto& x : s) ++hits[static_cast<std::size_t>(c1_event(L, delta, x.D_star, x.D_star_psi))];
      for (int i = 1; i <= 4; ++i) {
        C1Row row;
        row.L = L;
        row.m = m;
        row.i = i;
        row.hits = hits[static_cast<std::size_t>(i)];
        row.n = n_envs;
        row.freq = n_envs ? static_cast<double>(row.hits) / static_cast<double>(n_envs) : 0.0;
        row.ci = wilson_interval(row.hits, n_envs);
        row.threshold = c1_threshold(L, i);
        row.pass = row.freq <= row.threshold;
        rep.rows.push_back(row);
      }
      rep.samples.insert(rep.samples.end(), s.begin(), s.end());
    }
  return rep;
}

// E_{0,w}[tau_L] within [1 - f, 1 + f] E_0[tau_L], f = f_eta(L).
struct C2Indicator {
  double env_time = 0, srw_time = 0, f = 0;
  bool pass = true;
};

inline C2Indicator c2_indicator(const Environment& env, double L, double eta) {
  auto W = make_ball(Point::zero(env.dim()), L);
  C2Indicator c;
  c.env_time = GreenOperator(rwre_kernel(env, W)).mean_exit_time(Point::zero(env.dim()));
  c.srw_time = GreenOperator(srw_kernel(W)).mean_exit_time(Point::zero(env.dim()));
  c.f = f_eta(eta, L);
  c.pass = c.env_time >= (1 - c.f) * c.srw_time && c.env_time <= (1 + c.f) * c.srw_time;
  return c;
}

// ---------------------------------------------------------------------------
// Smoothed exit laws phi_{L,m} = pi_L pi^_m against the Brownian analogue.

// Full phi(x,.) from an exit measure of V_L and a constant smoothing radius.
inline std::map<Point, double> smoothed_exit_law(const ExitMeasure& ex, double m) {
  auto sd = step_distribution(m, ex.domain->dim());
  std::map<Point, double> out;
  for (std::size_t k = 0; k < ex.weights.size(); ++k) {
    if (ex.weights[k] == 0.0) continue;
    for (std::size_t j = 0; j < sd->points.size(); ++j) out[ex.point(k) + sd->points[j]] += ex.weights[k] * sd->probs[j];
  }
  return out;
}

// Density of pi^BM_L pi^BM_m at z from x, d = 3, by nested Gauss-Kronrod in
// coordinates about the axis of z.
inline double smoothed_bm_density(double L, double m, const RVec& x, const RVec& z, double tol = 1e-9) {
  if (x.size() != 3 || z.size() != 3) throw Error(ErrorCode::domain_violation, "Brownian smoothing implemented for d = 3");
  const Mollifier& phi = default_mollifier();
  const double nz = rnorm(z);
  const int d = 3;
  const double sphere = d * alpha(d);
  auto kernel = [&](double r) { return phi.pdf(r / m) / m / (sphere * std::pow(r, d - 1)); };
  if (nz < 1e-12) return kernel(L);  // |z - v| = L on the whole sphere
  RVec u{z[0] / nz, z[1] / nz, z[2] / nz};
  // orthonormal e, f perpendicular to u
  RVec e = std::abs(u[0]) < 0.9 ? RVec{1, 0, 0} : RVec{0, 1, 0};
  const double ue = u[0] * e[0] + u[1] * e[1] + u[2] * e[2];
  for (int i = 0; i < 3; ++i) e[static_cast<std::size_t>(i)] -= ue * u[static_cast<std::size_t>(i)];
  const double ne = rnorm(e);
  for (auto& v : e) v /= ne;
  RVec f{u[1] * e[2] - u[2] * e[1], u[2] * e[0] - u[0] * e[2], u[0] * e[1] - u[1] * e[0]};
  // m < |z - v| < 2m  <=>  cos(theta) in (c_lo, c_hi)
  const double c_lo = std::max(-1.0, (nz * nz + L * L - 4 * m * m) / (2 * L * nz));
  const double c_hi = std::min(1.0, (nz * nz + L * L - m * m) / (2 * L * nz));
  if (!(c_lo < c_hi)) return 0.0;
  using GK = boost::math::quadrature::gauss_kronrod<double, 15>;
  const double pi = std::numbers::pi;
  double err_total = 0;
  auto in_theta = [&](double theta) {
    const double ct = std::cos(theta), st = std::sin(theta);
    const double r = std::sqrt(std::max(0.0, nz * nz + L * L - 2 * L * nz * ct));
    const double k = kernel(r);
    if (k == 0.0) return 0.0;
    auto in_az = [&](double az) {
      RVec v(3);
      for (std::size_t i = 0; i < 3; ++i) v[i] = L * (ct * u[i] + st * (std::cos(az) * e[i] + std::sin(az) * f[i]));
      return poisson_kernel(L, x, v);
    };
    double err = 0;
    const double a = GK::integrate(in_az, 0.0, 2 * pi, 12, tol, &err);
    err_total = std::max(err_total, err);
    return a * k * L * L * st;
  };
  double err = 0;
  const double v = GK::integrate(in_theta, std::acos(c_hi), std::acos(c_lo), 12, tol, &err);
  if (!(err <= 1e3 * tol * std::max(1.0, std::abs(v)))) throw Error(ErrorCode::quadrature_nonconvergence, "smoothed Brownian density");
  return v;
}

struct SmoothCompareReport {
  double L = 0, m = 0;
  std::size_t pairs = 0;
  double sup_diff = 0;     // sup |phi - phi^BM| over the sampled pairs
  double scaled = 0;       // sup_diff * L^{d + 1/4}
  double max_lattice = 0;  // sup phi over the sampled pairs
  double max_mass_error = 0;
  Point arg_x, arg_z;
};

// Starting points: the origin and points along e_1 and the diagonal; targets:
// the e_1 axis through the support plus n_z uniform points of the box.
inline SmoothCompareReport smoothed_exit_compare(const Environment* env, double L, double m, std::size_t n_z = 200,
                                                 std::uint64_t seed = 1) {
  const int d = 3;
  if (env && env->dim() != d) throw Error(ErrorCode::domain_violation, "smoothed comparison implemented for d = 3");
  auto W = make_ball(Point::zero(d), L);
  const Kernel K = env ? rwre_kernel(*env, W) : srw_kernel(W);
  GreenOperator G(K);
  auto sd = step_distribution(m, d);
  SmoothCompareReport rep;
  rep.L = L;
  rep.m = m;
  std::vector<Point> xs{Point::zero(d)};
  for (double f : {0.25, 0.5, 0.75, 0.9}) xs.push_back(Point{static_cast<std::int32_t>(std::floor(f * L)), 0, 0});
  {
    const auto c = static_cast<std::int32_t>(std::floor(0.5 * L / std::sqrt(3.0)));
    xs.push_back(Point{c, c, c});
  }
  const int R = static_cast<int>(std::ceil(L)) + sd->radius + 1;
  std::vector<Point> zs;
  for (int k = -R; k <= R; ++k) zs.push_back(Point{k, 0, 0});
  CounterRng rng(seed, 0x534D4F4Full);
  for (std::size_t k = 0; k < n_z; ++k) {
    Point z(d);
    for (int i = 0; i < d; ++i) z.c[i] = static_cast<std::int32_t>(rng.below(static_cast<std::uint64_t>(2 * R + 1))) - R;
    zs.push_back(z);
  }
  double step_mass = 0;
  for (double p : sd->probs) step_mass += p;
  for (const auto& x : xs) {
    const auto ex = G.exit_measure(x);
    rep.max_mass_error = std::max(rep.max_mass_error, std::abs(ex.total() * step_mass - 1));
    std::vector<double> lat(zs.size(), 0.0), bm(zs.size(), 0.0);
    parallel_for(zs.size(), [&](std::size_t k) {
      double s = 0;
      for (std::size_t b = 0; b < ex.weights.size(); ++b)
        if (ex.weights[b] != 0.0) s += ex.weights[b] * sd->at(zs[k] - ex.point(b));
      lat[k] = s;
      bm[k] = smoothed_bm_density(L, m, to_real(x), to_real(zs[k]));
    });
    for (std::size_t k = 0; k < zs.size(); ++k) {
      ++rep.pairs;
      rep.max_lattice = std::max(rep.max_lattice, lat[k]);
      const double diff = std::abs(lat[k] - bm[k]);
      if (diff > rep.sup_diff) {
        rep.sup_diff = diff;
        rep.arg_x = x;
        rep.arg_z = zs[k];
      }
    }
  }
  rep.scaled = rep.sup_diff * std::pow(L, d + 0.25);
  return rep;
}

// ---------------------------------------------------------------------------
// Isotropy cancellation for signed measures on V_l.

using SignedMeasure = std::map<Point, double>;

inline double measure_at(const SignedMeasure& nu, const Point& x) {
  auto it = nu.find(x);
  return it == nu.end() ? 0.0 : it->second;
}

// Throws symmetry_violation unless nu(x) = nu(x^(i)) and nu(x) = nu(x^(i<->j)).
inline void validate_symmetry(const SignedMeasure& nu, double tol = 1e-12) {
  for (const auto& [x, v] : nu) {
    const int d = x.dim;
    for (int i = 0; i < d; ++i) {
      const Point y = SignedPermutation::flip(d, i).apply(x);
      if (std::abs(measure_at(nu, y) - v) > tol)
        throw Error(ErrorCode::symmetry_violation, "sign flip " + std::to_string(i + 1) + " at " + x.str());
      for (int j = i + 1; j < d; ++j) {
        const Point z = SignedPermutation::transposition(d, i, j).apply(x);
        if (std::abs(measure_at(nu, z) - v) > tol)
          throw Error(ErrorCode::symmetry_violation,
                      "exchange " + std::to_string(i + 1) + "," + std::to_string(j + 1) + " at " + x.str());
      }
    }
  }
}

// Average of nu over the signed permutation group.
inline SignedMeasure symmetrize(const SignedMeasure& nu, int d) {
  const auto group = signed_permutation_group(d);
  SignedMeasure out;
  for (const auto& [x, v] : nu)
    for (const auto& g : group) out[g.apply(x)] += v / static_cast<double>(group.size());
  return out;
}

struct CancellationReport {
  double l = 0, L = 0, m = 0;
  double mass = 0, l1 = 0;
  std::vector<double> first_moment;   // sum nu(y) y
  Mat second_moment;                  // sum nu(y) y_i y_j
  double max_first = 0;               // max_i |sum nu(y) y_i|
  double max_offdiag = 0;             // max_{i != j} |M_ij|
  double diag_spread = 0;             // max_i M_ii - min_i M_ii
  double sup_value = 0;               // sup_z |sum nu(y - y') phi(y, z)|
  double bound_shape = 0;             // ||nu||_1 (L^{-(d+1/4)} + (l/L)^3 L^{-d})
  double ratio = 0;                   // sup_value / bound_shape
};

inline CancellationReport isotropy_cancellation(const SignedMeasure& nu, double l, double L, double m,
                                            const Point& y0) {
  const int d = y0.dim;
  validate_symmetry(nu);
  CancellationReport rep;
  rep.l = l;
  rep.L = L;
  rep.m = m;
  rep.first_moment.assign(static_cast<std::size_t>(d), 0.0);
  rep.second_moment = Mat::Zero(d, d);
  const std::int64_t l2 = squared_threshold(l);
  for (const auto& [y, v] : nu) {
    if (y.norm2() > l2) throw Error(ErrorCode::domain_violation, "measure not supported on V_l: " + y.str());
    rep.mass += v;
    rep.l1 += std::abs(v);
    for (int i = 0; i < d; ++i) {
      rep.first_moment[static_cast<std::size_t>(i)] += v * y.c[i];
      for (int j = 0; j < d; ++j) rep.second_moment(i, j) += v * y.c[i] * y.c[j];
    }
  }
  if (std::abs(rep.mass) > 1e-12 * std::max(1.0, rep.l1))
    throw Error(ErrorCode::domain_violation, "measure must have total mass zero");
  double dmin = std::numeric_limits<double>::max(), dmax = std::numeric_limits<double>::lowest();
  for (int i = 0; i < d; ++i) {
    rep.max_first = std::max(rep.max_first, std::abs(rep.first_moment[static_cast<std::size_t>(i)]));
    dmin = std::min(dmin, rep.second_moment(i, i));
    dmax = std::max(dmax, rep.second_moment(i, i));
    for (int j = 0; j < d; ++j)
      if (i != j) rep.max_offdiag = std::max(rep.max_offdiag, std::abs(rep.second_moment(i, j)));
  }
  rep.diag_spread = dmax - dmin;
  // mu = sum_y nu(y - y') pi_L(y, .), then convolve with one coarse step
  auto W = make_ball(Point::zero(d), L);
  GreenOperator G(srw_kernel(W));
  Vec b = Vec::Zero(static_cast<Eigen::Index>(G.n()));
  for (const auto& [y, v] : nu) {
    auto i = W->find(y + y0);
    if (!i || *i >= G.n()) throw Error(ErrorCode::domain_violation, "V_l(y') must lie inside V_L");
    b[static_cast<Eigen::Index>(*i)] += v;
  }
  const auto ex = G.exit_from_row(G.solve_transpose(b), y0);
  auto sd = step_distribution(m, d);
  FreeSmoother sm(d, static_cast<int>(std::ceil(L)) + sd->radius + 2);
  for (std::size_t k = 0; k < ex.weights.size(); ++k)
    if (ex.weights[k] != 0.0) sm.add(ex.point(k), ex.weights[k], m);
  rep.sup_value = sm.max_abs_and_reset();
  rep.bound_shape = rep.l1 * (std::pow(L, -(d + 0.25)) + std::pow(l / L, 3) * std::pow(L, -d));
  rep.ratio = rep.bound_shape > 0 ? rep.sup_value / rep.bound_shape : 0.0;
  return rep;
}

// ---------------------------------------------------------------------------
// Space-good and time-good points.

struct TimePointFlags {
  Point x;
  bool space_good = true;
  bool time_good = true;
  double time_deviation = 0;  // first level: max |E_w tau / E tau - 1|
};

struct TimeBadnessReport {
  double L = 0, eta = 0, delta = 0;
  std::vector<TimePointFlags> points;
  std::vector<Point> space_bad, time_bad;
  bool good_sp = true, bad_sp = false;
  bool good_tm = true, one_bad_tm = true, many_bad_tm = false;
  bool not_too_bad = true;
  double max_Lambda = 0;
  double not_too_bad_bound = 0;  // (log L)^{-2} L^2
};

namespace detail {

// The inner level inside V_t(x): every y in V_t(x) checked on its own
// schedule h_t^x. Returns {space ok, time ok}.
inline std::pair<bool, bool> inner_level(const Environment& env, const Schedule& S, const Point& x, double t,
                                         double delta, double eta) {
  const int d = x.dim;
  const Schedule St = S.rescaled(t);
  auto Wt = std::make_shared<const Domain>(Domain::ball(x, t));
  const auto field = SmoothingField::h_profile(St, x);
  const auto Pc = coarse_grain(env, field, Wt);
  const auto pc = coarse_grain_srw(d, field, Wt);
  const double ft = f_eta(eta, St.s);
  bool sp = true, tm = true;
  std::vector<double> s1(Wt->size(), 0.0), s2(Wt->size(), 0.0);
  for (std::size_t i = 0; i < Wt->n_interior() && (sp || tm); ++i) {
    const Point& y = Wt->point(i);
    const double h = St(y - x);
    const auto scan = ball_scan(env, y, h, 2 * h);
    if (scan.max_tv() > delta) sp = false;
    if (scan.max_time_deviation() > ft) tm = false;
    if (t - dist(y, x) > 2 * St.r &&
        smoothed_row_difference(Pc.kernel, pc.kernel, i, s1, s2) > log_threshold(h, -9, delta))
      sp = false;
  }
  return {sp, tm};
}

}  // namespace detail

// S is the schedule with r = r_L (or the override pair). The inner-level
// quantifier over t in [h, 2h] is evaluated at t = h, at every radius where
// V_t(x) changes, and at t = 2h.
inline TimeBadnessReport time_classify(const Environment& env, const Schedule& S, double eta, double delta) {
  if (!(eta > 0 && eta < 1)) throw Error(ErrorCode::config_invalid, "eta must lie in (0, 1)");
  TimeBadnessReport rep;
  rep.L = S.L;
  rep.eta = eta;
  rep.delta = delta;
  const auto pts = classify_points(env, S, delta);
  const Domain& VL = *pts.domain;
  const std::size_t n = VL.n_interior();
  rep.points.resize(n);
  const double fL = f_eta(eta, S.s);
  parallel_for(n, [&](std::size_t i) {
    TimePointFlags& f = rep.points[i];
    f.x = VL.point(i);
    f.space_good = pts.points[i].good;
    const double h = S(f.x);
    const auto scan = ball_scan(env, f.x, h, 2 * h);
    f.time_deviation = scan.max_time_deviation();
    f.time_good = f.time_deviation <= fL;
    if (d_L(f.x, S.L) > 2 * S.s) {
      std::vector<double> ts{h};
      for (auto k : scan.radii) {
        const double t = std::sqrt(static_cast<double>(k));
        if (t > h && t <= 2 * h) ts.push_back(t);
      }
      ts.push_back(2 * h);
      for (double t : ts) {
        if (!f.space_good && !f.time_good) break;
        auto [sp, tm] = detail::inner_level(env, S, f.x, t, delta, eta);
        f.space_good = f.space_good && sp;
        f.time_good = f.time_good && tm;
      }
    }
  });
  for (const auto& f : rep.points) {
    if (!f.space_good) rep.space_bad.push_back(f.x);
    if (!f.time_good) rep.time_bad.push_back(f.x);
  }
  rep.good_sp = rep.space_bad.empty();
  rep.bad_sp = !rep.good_sp;
  rep.good_tm = rep.time_bad.empty();
  rep.one_bad_tm = enclosing_center(rep.time_bad, VL, S).has_value();
  rep.many_bad_tm = !rep.one_bad_tm;
  const auto lam = sojourn_field(env, S);
  rep.max_Lambda = lam.values.size() ? lam.values.maxCoeff() : 0.0;
  rep.not_too_bad_bound = std::pow(std::log(S.L), -2) * S.L * S.L;
  rep.not_too_bad = rep.max_Lambda <= rep.not_too_bad_bound;
  return rep;
}

}  // namespace rwre
