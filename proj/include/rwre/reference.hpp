#pragma once

// Closed forms for Brownian motion and simple random walk: the Poisson
// kernel of a ball, hitting probabilities of balls, the annulus formula,
// the shell-sum majorant, and the Green's function constant c(d).

#include <boost/math/quadrature/exp_sinh.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>

#include <cmath>
#include <numbers>
#include <vector>

#include "rwre/errors.hpp"
#include "rwre/kernel.hpp"
#include "rwre/lattice.hpp"
#include "rwre/solver.hpp"

namespace rwre {

using RVec = std::vector<double>;

inline double rnorm(const RVec& v) {
  double s = 0;
  for (double x : v) s += x * x;
  return std::sqrt(s);
}
inline double rdist(const RVec& a, const RVec& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(s);
}
inline RVec to_real(const Point& p) {
  RVec v(static_cast<std::size_t>(p.dim));
  for (int i = 0; i < p.dim; ++i) v[static_cast<std::size_t>(i)] = p.c[i];
  return v;
}

// Volume of the unit ball.
inline double alpha(int d) { return unit_ball_volume(d); }

// A majorant returned by a bound, never to be compared for equality.
struct BoundedValue {
  double value = 0;
  bool bound_not_value = false;
};

// Density of the exit law of Brownian motion from C_L started at y, with
// respect to surface measure at z.
inline double poisson_kernel(double L, const RVec& y, const RVec& z) {
  const int d = static_cast<int>(y.size());
  if (d < 1 || z.size() != y.size()) throw Error(ErrorCode::domain_violation, "poisson_kernel dimension mismatch");
  const double ny = rnorm(y), nz = rnorm(z);
  if (!(L > 0) || !(ny < L)) throw Error(ErrorCode::domain_violation, "poisson_kernel needs |y| < L");
  if (std::abs(nz - L) > 1e-9 * L) throw Error(ErrorCode::domain_violation, "poisson_kernel needs |z| = L");
  return (L * L - ny * ny) / (d * alpha(d) * L * std::pow(rdist(y, z), d));
}

// Surface integral of the Poisson kernel over the sphere of radius L, d = 3,
// by nested adaptive Gauss-Kronrod in spherical coordinates.
inline double poisson_surface_integral(double L, const RVec& y, double tol = 1e-10) {
  if (y.size() != 3) throw Error(ErrorCode::domain_violation, "surface quadrature implemented for d = 3");
  using GK = boost::math::quadrature::gauss_kronrod<double, 31>;
  const double pi = std::numbers::pi;
  auto inner = [&](double theta) {
    auto f = [&](double phi) {
      RVec z{L * std::sin(theta) * std::cos(phi), L * std::sin(theta) * std::sin(phi), L * std::cos(theta)};
      return poisson_kernel(L, y, z) * L * L * std::sin(theta);
    };
    return GK::integrate(f, 0.0, 2 * pi, 15, tol);
  };
  double err = 0;
  const double v = GK::integrate(inner, 0.0, pi, 15, tol, &err);
  if (!(err < 1e3 * tol)) throw Error(ErrorCode::quadrature_nonconvergence, "poisson surface integral");
  return v;
}

// Centred second-difference Laplacian of y -> pi^BM_L(y, z) with step h.
inline double poisson_laplacian(double L, const RVec& y, const RVec& z, double h) {
  double lap = 0;
  const double f0 = poisson_kernel(L, y, z);
  for (std::size_t i = 0; i < y.size(); ++i) {
    RVec p = y, m = y;
    p[i] += h;
    m[i] -= h;
    lap += poisson_kernel(L, p, z) + poisson_kernel(L, m, z) - 2 * f0;
  }
  return lap / (h * h);
}

// P^BM_x(T_{C_a(y)} < inf) = (a/|x-y|)^{d-2}, with dist = |x-y| >= a.
inline double bm_hit_ball(double a, double dist, int d) {
  if (!(a > 0)) throw Error(ErrorCode::domain_violation, "ball radius must be positive");
  if (dist <= a) return 1.0;
  return std::pow(a / dist, d - 2);
}

// K a^{d-2} d_L(y) d_L(x) / |x-y|^d, a majorant of P^BM_x(T_{C_a(y)} < tau_{C_L}).
inline BoundedValue bm_hit_ball_bound(double a, const RVec& x, const RVec& y, double L, double K = 1.0) {
  const int d = static_cast<int>(x.size());
  const double r = rdist(x, y);
  return {K * std::pow(a, d - 2) * (L - rnorm(y)) * (L - rnorm(x)) / std::pow(r, d), true};
}

// C a^{d-2} max{a, d_L(y)} max{1, d_L(x)} / |x-y|^d for |x-y| > 7a.
inline BoundedValue srw_hit_ball_bound(double a, const Point& x, const Point& y, double L, double C = 1.0) {
  const int d = x.dim;
  const double r = dist(x, y);
  if (!(r > 7 * a)) throw Error(ErrorCode::domain_violation, "bound requires |x-y| > 7a");
  return {C * std::pow(a, d - 2) * std::max(a, d_L(y, L)) * std::max(1.0, d_L(x, L)) / std::pow(r, d), true};
}

struct HitReport {
  double value = 0;       // P_x(T_{V_a(y)} < tau_{L_out}), exact solve
  double main = 0;        // (a/|x-y|)^{d-2}
  double band = 0;        // (a/L_out)^{d-2}
  double lower() const { return value; }         // bracket for P_x(T < inf)
  double upper() const { return value + band; }
  std::size_t states = 0;
};

// Probability that the walk started at x hits V_a(y) before leaving V_{L_out}
// (centred at the origin), from one linear solve on V_{L_out} \ V_a(y).
inline HitReport srw_hit_ball_empirical(double a, const Point& x, const Point& y, double L_out,
                                        std::size_t capacity = default_capacity()) {
  const int d = x.dim;
  HitReport rep;
  rep.main = std::pow(a / std::max(a, dist(x, y)), d - 2);
  rep.band = std::pow(a / L_out, d - 2);
  const std::int64_t a2 = squared_threshold(a);
  if (dist2(x, y) <= a2) {
    rep.value = 1.0;
    return rep;
  }
  const std::int64_t L2 = squared_threshold(L_out);
  if (x.norm2() > L2) throw Error(ErrorCode::domain_violation, "start point outside V_{L_out}");
  Domain outer = Domain::ball_sq(Point::zero(d), L2, capacity);
  std::vector<Point> pts;
  pts.reserve(outer.n_interior());
  for (const auto& p : outer.interior())
    if (dist2(p, y) > a2) pts.push_back(p);
  auto dom = std::make_shared<const Domain>(Domain::from_points(std::move(pts), d));
  Kernel K = srw_kernel(dom);
  const std::size_t n = dom->n_interior();
  Vec b = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (SpMat::InnerIterator it(K.P, static_cast<Eigen::Index>(i)); it; ++it)
      if (static_cast<std::size_t>(it.col()) >= n && dist2(dom->point(static_cast<std::size_t>(it.col())), y) <= a2)
        b[static_cast<Eigen::Index>(i)] += it.value();
  SolverOptions opt;
  opt.tolerance = 1e-12;
  GreenOperator G(K, opt);
  const Vec h = G.solve(b);
  rep.value = h[static_cast<Eigen::Index>(*dom->find(x))];
  rep.states = n;
  return rep;
}

// Main term of P_x(tau_L < T_{V_l}) for l < |x| < L.
inline double annulus_exit(double l, double xnorm, double L, int d) {
  if (!(0 < l && l < L)) throw Error(ErrorCode::domain_violation, "annulus needs 0 < l < L");
  const double e = 2.0 - d;
  return (std::pow(l, e) - std::pow(xnorm, e)) / (std::pow(l, e) - std::pow(L, e));
}

// Exact P_x(tau_L < T_{V_l}) for simple random walk.
inline double annulus_exit_exact(double l, const Point& x, double L, std::size_t capacity = default_capacity()) {
  const int d = x.dim;
  const std::int64_t l2 = squared_threshold(l), L2 = squared_threshold(L);
  if (!(x.norm2() > l2 && x.norm2() <= L2)) throw Error(ErrorCode::domain_violation, "annulus start point");
  Domain outer = Domain::ball_sq(Point::zero(d), L2, capacity);
  std::vector<Point> pts;
  for (const auto& p : outer.interior())
    if (p.norm2() > l2) pts.push_back(p);
  auto dom = std::make_shared<const Domain>(Domain::from_points(std::move(pts), d));
  Kernel K = srw_kernel(dom);
  const std::size_t n = dom->n_interior();
  Vec b = Vec::Zero(static_cast<Eigen::Index>(n));
  for (std::size_t i = 0; i < n; ++i)
    for (SpMat::InnerIterator it(K.P, static_cast<Eigen::Index>(i)); it; ++it)
      if (static_cast<std::size_t>(it.col()) >= n && dom->point(static_cast<std::size_t>(it.col())).norm2() > L2)
        b[static_cast<Eigen::Index>(i)] += it.value();
  GreenOperator G(K);
  return G.solve(b)[static_cast<Eigen::Index>(*dom->find(x))];
}

// Majorant (with C = 1) of sum over R_l = V_l \ V_{l-1} of (a + |x-y|)^{-m}.
inline BoundedValue bound_shell_sum(double a, double l, int m, const Point& x) {
  const int d = x.dim;
  const double al = std::max(std::abs(x.norm() - l), a);
  double v;
  if (m < d - 1)
    v = std::pow(l, d - (m + 1));
  else if (m == d - 1)
    v = std::max(std::log(l / al), 1.0);
  else
    v = std::pow(al, d - (m + 1));
  return {v, true};
}

// The sum itself, by enumeration.
inline double shell_sum(double a, double l, int m, const Point& x) {
  const int d = x.dim;
  const std::int64_t hi = squared_threshold(l), lo = l >= 1 ? squared_threshold(l - 1) : -1;
  Domain b = Domain::ball_sq(Point::zero(d), hi);
  double s = 0;
  for (const auto& y : b.interior())
    if (y.norm2() > lo) s += std::pow(a + dist(x, y), -m);
  return s;
}

// c(d) = (1/(2 pi^{d/2})) int_0^inf t^{-d/2} e^{-1/t} dt = Gamma(d/2 - 1) / (2 pi^{d/2}).
inline double c_d(int d) {
  if (d < 3) throw Error(ErrorCode::domain_violation, "c(d) needs d >= 3");
  return std::tgamma(d / 2.0 - 1.0) / (2 * std::pow(std::numbers::pi, d / 2.0));
}

inline double c_d_quadrature(int d) {
  if (d < 3) throw Error(ErrorCode::domain_violation, "c(d) needs d >= 3");
  boost::math::quadrature::exp_sinh<double> es;
  auto f = [d](double t) { return t > 0 ? std::pow(t, -d / 2.0) * std::exp(-1.0 / t) : 0.0; };
  const double I = es.integrate(f, 0.0, std::numeric_limits<double>::infinity());
  return I / (2 * std::pow(std::numbers::pi, d / 2.0));
}

}  // namespace rwre
