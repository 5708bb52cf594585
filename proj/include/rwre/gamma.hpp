#pragma once

// The comparison kernel Gamma_{L,r} = min{Gamma1, Gamma2} on V_{L+r}, the
// neighbourhoods U(x) = V_{a(x)}(x) ∩ V_{L+r}, and measured domination
// constants for coarse-grained Green's functions.

#include <algorithm>
#include <cmath>
#include <vector>

#include "rwre/coarse.hpp"
#include "rwre/errors.hpp"
#include "rwre/lattice.hpp"
#include "rwre/rng.hpp"
#include "rwre/schedule.hpp"
#include "rwre/solver.hpp"

namespace rwre {

struct GammaKernelSpec {
  double L = 0;
  double r = 0;
  double s = 0;
  int d = 3;

  static GammaKernelSpec make(double L, double r, double s, int d) {
    if (!(r > 0 && r <= s && s <= L)) throw Error(ErrorCode::config_invalid, "Gamma kernel needs 0 < r <= s <= L");
    return {L, r, s, d};
  }
  static GammaKernelSpec standard(double L, int d) { return {L, r_of(L), s_of(L), d}; }

  double outer() const { return L + r; }
  double tilde_d_norm(double norm) const { return std::max((outer() - norm) / 2, 3 * r); }
  double a_norm(double norm) const { return std::min(tilde_d_norm(norm), s); }
  double tilde_d(const Point& x) const { return tilde_d_norm(x.norm()); }
  double a(const Point& x) const { return a_norm(x.norm()); }

  double gamma1(const Point& x, const Point& y) const {
    const double ay = a(y);
    return tilde_d(x) * tilde_d(y) / (ay * ay * std::pow(ay + dist(x, y), d));
  }
  double gamma2(const Point& x, const Point& y) const {
    const double ay = a(y);
    return 1.0 / (ay * ay * std::pow(ay + dist(x, y), d - 2));
  }
  double operator()(const Point& x, const Point& y) const { return std::min(gamma1(x, y), gamma2(x, y)); }

  bool contains(const Point& x) const { return x.norm2() <= squared_threshold(outer()); }

  // U(x) = V_{a(x)}(x) ∩ V_{L+r}
  std::vector<Point> U(const Point& x) const {
    std::vector<Point> out;
    const std::int64_t o2 = squared_threshold(outer());
    const Domain ball = Domain::ball(x, a(x));
    for (const auto& p : ball.interior())
      if (p.norm2() <= o2) out.push_back(p);
    return out;
  }

  // Gamma(x, U(y))
  double on_neighbourhood(const Point& x, const Point& y) const {
    double s = 0;
    for (const auto& w : U(y)) s += (*this)(x, w);
    return s;
  }
};

struct LipschitzReport {
  double worst_tilde = 0;     // max |td(x)-td(y)| - |x-y|/2
  double worst_a = 0;         // max |a(x)-a(y)| - |x-y|/2
  double worst_triangle = 0;  // max a(y) + |x-y| - a(x) - 1.5|x-y|
  std::size_t norms = 0;
  std::size_t sampled_pairs = 0;
  bool passed(double tol = 1e-9) const { return worst_tilde <= tol && worst_a <= tol && worst_triangle <= tol; }
};

// td and a depend on x only through |x|, so the Lipschitz bound over all
// lattice pairs holds iff it holds for consecutive distinct lattice norms
// (chain the differences, then use ||x|-|y|| <= |x-y|). The reduction is
// cross-checked on random pairs, which also carry the triangle bound.
inline LipschitzReport gamma_lipschitz_check(const GammaKernelSpec& g, std::size_t n_pairs, std::uint64_t seed) {
  LipschitzReport rep;
  const std::int64_t o2 = squared_threshold(g.outer());
  // Lattice norms: sums of d squares up to o2.
  std::vector<char> rep_sq(static_cast<std::size_t>(o2 + 1), 0);
  {
    std::vector<char> cur(static_cast<std::size_t>(o2 + 1), 0);
    cur[0] = 1;
    for (int i = 0; i < g.d; ++i) {
      std::vector<char> nxt(cur.size(), 0);
      for (std::int64_t k = 0; k <= o2; ++k)
        if (cur[static_cast<std::size_t>(k)])
          for (std::int64_t t = 0; k + t * t <= o2; ++t) nxt[static_cast<std::size_t>(k + t * t)] = 1;
      cur.swap(nxt);
    }
    rep_sq = cur;
  }
  double prev = -1;
  for (std::int64_t k = 0; k <= o2; ++k) {
    if (!rep_sq[static_cast<std::size_t>(k)]) continue;
    const double nk = std::sqrt(static_cast<double>(k));
    ++rep.norms;
    if (prev >= 0) {
      const double h = (nk - prev) / 2;
      rep.worst_tilde = std::max(rep.worst_tilde, std::abs(g.tilde_d_norm(nk) - g.tilde_d_norm(prev)) - h);
      rep.worst_a = std::max(rep.worst_a, std::abs(g.a_norm(nk) - g.a_norm(prev)) - h);
    }
    prev = nk;
  }
  CounterRng rng(seed, 0x6a6d);
  const auto R = static_cast<std::int32_t>(std::floor(g.outer()));
  auto draw = [&] {
    for (;;) {
      Point p(g.d);
      for (int i = 0; i < g.d; ++i) p.c[i] = static_cast<std::int32_t>(rng.below(2 * static_cast<std::uint64_t>(R) + 1)) - R;
      if (p.norm2() <= o2) return p;
    }
  };
  for (std::size_t k = 0; k < n_pairs; ++k) {
    const Point x = draw(), y = draw();
    const double dxy = dist(x, y);
    rep.worst_tilde = std::max(rep.worst_tilde, std::abs(g.tilde_d(x) - g.tilde_d(y)) - dxy / 2);
    rep.worst_a = std::max(rep.worst_a, std::abs(g.a(x) - g.a(y)) - dxy / 2);
    rep.worst_triangle = std::max(rep.worst_triangle, g.a(y) + dxy - g.a(x) - 1.5 * dxy);
    ++rep.sampled_pairs;
  }
  return rep;
}

struct AsympReport {
  double max_ratio = 1;  // max over samples of max(q, 1/q), q = Gamma(x',y')/Gamma(x,y)
  std::size_t samples = 0;
  bool passed(double budget = 100) const { return max_ratio <= budget; }
};

// Sampled check of Gamma ≍ 1. Half of the base points are drawn near the
// outer boundary (td <= 3s), where the neighbourhoods are smallest.
inline AsympReport gamma_asymp_check(const GammaKernelSpec& g, std::size_t n, std::uint64_t seed) {
  AsympReport rep;
  CounterRng rng(seed, 0x6173);
  const std::int64_t o2 = squared_threshold(g.outer());
  const auto R = static_cast<std::int32_t>(std::floor(g.outer()));
  auto draw = [&](bool near) {
    for (;;) {
      Point p(g.d);
      if (near) {
        // random direction, radius in the outer shell
        double v[kMaxDim], nv = 0;
        for (int i = 0; i < g.d; ++i) {
          v[i] = rng.uniform(-1, 1);
          nv += v[i] * v[i];
        }
        if (nv > 1 || nv < 1e-6) continue;
        const double rad = g.outer() - rng.uniform(0, std::min(6 * g.s, g.outer()));
        for (int i = 0; i < g.d; ++i) p.c[i] = static_cast<std::int32_t>(std::lround(v[i] / std::sqrt(nv) * rad));
      } else {
        for (int i = 0; i < g.d; ++i)
          p.c[i] = static_cast<std::int32_t>(rng.below(2 * static_cast<std::uint64_t>(R) + 1)) - R;
      }
      if (p.norm2() <= o2) return p;
    }
  };
  auto pick = [&](const Point& x) {
    // uniform point of U(x) by rejection from the bounding cube
    const double ax = g.a(x);
    const auto A = static_cast<std::int32_t>(std::floor(ax));
    const std::int64_t a2 = squared_threshold(ax);
    for (;;) {
      Point off(g.d);
      for (int i = 0; i < g.d; ++i) off.c[i] = static_cast<std::int32_t>(rng.below(2 * static_cast<std::uint64_t>(A) + 1)) - A;
      const Point p = x + off;
      if (off.norm2() <= a2 && p.norm2() <= o2) return p;
    }
  };
  for (std::size_t k = 0; k < n; ++k) {
    const Point x = draw(k % 2 == 0), y = draw(k % 4 < 2);
    const Point xp = pick(x), yp = pick(y);
    const double q = g(xp, yp) / g(x, y);
    rep.max_ratio = std::max(rep.max_ratio, std::max(q, 1 / q));
    ++rep.samples;
  }
  return rep;
}

// Calls fn(y) for every lattice y with lo2 < |y|^2 <= hi2, without
// materialising the ball.
template <class Fn>
void for_each_in_shell(int d, std::int64_t lo2, std::int64_t hi2, Fn&& fn) {
  const auto R = static_cast<std::int32_t>(std::floor(std::sqrt(static_cast<double>(hi2))));
  Point y(d);
  for (int i = 0; i < d; ++i) y.c[i] = -R;
  for (;;) {
    const std::int64_t n2 = y.norm2();
    if (n2 > lo2 && n2 <= hi2) fn(y);
    int i = d - 1;
    while (i >= 0 && y.c[i] == R) y.c[i--] = -R;
    if (i < 0) return;
    ++y.c[i];
  }
}

// Gamma(x, E_j) for j = 1..J, E_j = {y in V_{L+r} : td(y) <= 3jr}.
inline std::vector<double> gamma_layer_sums(const GammaKernelSpec& g, const Point& x, int J) {
  std::vector<double> sums(static_cast<std::size_t>(J) + 1, 0.0);
  const double inner = std::max(0.0, g.outer() - 6.0 * J * g.r);
  const std::int64_t i2 = inner > 0 ? static_cast<std::int64_t>(std::floor(inner * inner)) - 1 : -1;
  for_each_in_shell(g.d, i2, squared_threshold(g.outer()), [&](const Point& y) {
    const double td = g.tilde_d(y);
    const int j0 = std::max(1, static_cast<int>(std::ceil(td / (3 * g.r) - 1e-12)));
    if (j0 > J) return;
    const double v = g(x, y);
    for (int j = j0; j <= J; ++j) sums[static_cast<std::size_t>(j)] += v;
  });
  sums.erase(sums.begin());
  return sums;
}

// Sum over L_j = {j <= d_L(y) < j+1} of max{1, td(x)/a(y)} (a(y)+|x-y|)^{-d}.
inline double gamma_layer_sum_iii(const GammaKernelSpec& g, const Point& x, int j) {
  double s = 0;
  const double lo = g.L - j - 1, hi = g.L - j;
  if (hi < 0) return 0.0;
  const std::int64_t lo2 = lo >= 0 ? squared_threshold(lo) : -1;
  for_each_in_shell(g.d, lo2, squared_threshold(hi), [&](const Point& y) {
    // j <= d_L(y) < j+1  <=>  L-j-1 < |y| <= L-j
    const double ay = g.a(y);
    s += std::max(1.0, g.tilde_d(x) / ay) / std::pow(ay + dist(x, y), g.d);
  });
  return s;
}

// ---------------------------------------------------------------------------
// Domination of the coarse SRW Green's function: g^(x, U(y)) <= C1 Gamma(x, U(y)).

struct DominationReport {
  double L = 0;
  double C1 = 0;          // sup ratio over the sampled pairs
  double min_ratio = 0;
  std::size_t pairs = 0;
  bool finite_positive = true;
};

// Schedule: override(s, r) with the given scale; ĝ is the Green's function
// of the coarse SRW on V_L, with g^(x,.) = delta_x for x outside V_L.
inline DominationReport gamma_bounds_report(const GammaKernelSpec& g, const Schedule& S, std::size_t n_x,
                                            std::size_t n_y, std::uint64_t seed) {
  DominationReport rep;
  rep.L = g.L;
  auto W = make_ball(Point::zero(g.d), g.L);
  auto cg = coarse_grain_srw(g.d, SmoothingField::h_profile(S, Point::zero(g.d)), W);
  GreenOperator G(cg.kernel);
  const Domain big = Domain::ball(Point::zero(g.d), g.outer());
  CounterRng rng(seed, 0x4331);
  auto draw = [&] { return big.point(static_cast<std::size_t>(rng.below(big.n_interior()))); };
  std::vector<Point> xs(n_x), ys(n_y);
  for (auto& x : xs) x = draw();
  for (auto& y : ys) y = draw();
  std::vector<std::vector<Point>> Us(n_y);
  std::vector<std::vector<double>> ratios(n_x);
  for (std::size_t j = 0; j < n_y; ++j) Us[j] = g.U(ys[j]);
  parallel_for(n_x, [&](std::size_t i) {
    const Point& x = xs[i];
    auto xi = W->find(x);
    Vec row;
    ExitMeasure ex;
    const bool inside = xi && *xi < W->n_interior();
    if (inside) {
      row = G.green_row(*xi);
      ex = G.exit_from_row(row, x);
    }
    auto ghat = [&](const Point& w) -> double {
      if (!inside) return w == x ? 1.0 : 0.0;
      auto wi = W->find(w);
      if (!wi) return 0.0;
      if (*wi < W->n_interior()) return row[static_cast<Eigen::Index>(*wi)];
      return ex.weights[*wi - W->n_interior()];
    };
    for (std::size_t j = 0; j < n_y; ++j) {
      double num = 0, den = 0;
      for (const auto& w : Us[j]) {
        num += ghat(w);
        den += g(x, w);
      }
      ratios[i].push_back(den > 0 ? num / den : std::numeric_limits<double>::infinity());
    }
  });
  rep.min_ratio = std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < n_x; ++i)
    for (std::size_t j = 0; j < ratios[i].size(); ++j) {
      const double q = ratios[i][j];
      // g^(x,.) = delta_x off V_L, and targets outside V_L may lie beyond
      // the reach of the exit law
      const bool reachable = W->is_interior(xs[i]) && W->is_interior(ys[j]);
      if (!std::isfinite(q) || q < 0 || (q == 0 && reachable)) rep.finite_positive = false;
      rep.C1 = std::max(rep.C1, q);
      rep.min_ratio = std::min(rep.min_ratio, q);
      ++rep.pairs;
    }
  return rep;
}

}  // namespace rwre
