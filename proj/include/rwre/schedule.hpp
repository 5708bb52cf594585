#pragma once

// Coarse-graining schedules h_{L,r} and smoothing fields psi = (m_x).

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rwre/errors.hpp"
#include "rwre/lattice.hpp"
#include "rwre/mollifier.hpp"

namespace rwre {

enum class RMode { paper_rL, constant, override_sr };

inline double s_of(double L) { return L / std::pow(std::log(L), 3); }
inline double r_of(double L) { return L / std::pow(std::log(L), 15); }

// The schedule: h_{L,r}(x) = scale * max{ s * h(d_L(x)/s), r }.
// scale is 1/20 unless overridden; rL is the outer radius used for the
// boundary layers (r_L, or r itself in override mode).
struct Schedule {
  double L = 0;
  double s = 0;
  double r = 0;
  double rL = 0;
  double scale = 1.0 / 20.0;
  RMode mode = RMode::paper_rL;

  static Schedule standard(double L) {
    if (!(L > 1)) throw Error(ErrorCode::config_invalid, "schedule needs L > 1");
    Schedule S;
    S.L = L;
    S.s = s_of(L);
    S.r = S.rL = r_of(L);
    S.mode = RMode::paper_rL;
    return S;
  }
  static Schedule constant_r(double L, double r) {
    Schedule S = standard(L);
    S.r = r;
    S.mode = RMode::constant;
    return S;
  }
  static Schedule override_sr(double L, double s, double r, double scale) {
    if (!(r > 0 && r <= s && s <= L))
      throw Error(ErrorCode::config_invalid, "schedule ordering r <= s <= L violated");
    if (!(scale > 0)) throw Error(ErrorCode::config_invalid, "schedule scale must be positive");
    Schedule S;
    S.L = L;
    S.s = s;
    S.r = S.rL = r;
    S.scale = scale;
    S.mode = RMode::override_sr;
    return S;
  }

  // Paper schedules are vacuous when (log L)^3 > L.
  bool degenerate() const { return mode != RMode::override_sr && std::pow(std::log(L), 3) > L; }

  double h_at_distance(double dL, const HFunction& h = default_hfunction()) const {
    return scale * std::max(s * h(dL / s), r);
  }
  double operator()(const Point& x, const HFunction& h = default_hfunction()) const {
    return h_at_distance(d_L(x, L), h);
  }
  double h_max() const { return scale * std::max(s, r); }

  // The same schedule shape inside a ball of radius t: s and r scale with t
  // in override mode, and are recomputed from t otherwise.
  Schedule rescaled(double t) const {
    if (mode == RMode::override_sr) {
      Schedule S = *this;
      S.L = t;
      S.s = s * t / L;
      S.r = S.rL = r * t / L;
      return S;
    }
    if (mode == RMode::constant) return constant_r(t, r);
    return standard(t);
  }
};

inline double h_eval(double L, double r, const Point& x) {
  return Schedule::constant_r(L, r)(x);
}

enum class FieldKind { constant, h_profile, callable };

// Per-point coarse-graining radius m_x.
class SmoothingField {
 public:
  static SmoothingField constant(double m) {
    if (!(m > 0)) throw Error(ErrorCode::degenerate_field, "constant field must be positive");
    SmoothingField f;
    f.kind_ = FieldKind::constant;
    f.m_ = m;
    return f;
  }
  static SmoothingField h_profile(const Schedule& S, Point center) {
    SmoothingField f;
    f.kind_ = FieldKind::h_profile;
    f.schedule_ = S;
    f.center_ = center;
    return f;
  }
  static SmoothingField callable(std::function<double(const Point&)> fn) {
    SmoothingField f;
    f.kind_ = FieldKind::callable;
    f.fn_ = std::move(fn);
    return f;
  }

  FieldKind kind() const { return kind_; }
  const Schedule& schedule() const { return schedule_; }

  double operator()(const Point& x) const {
    switch (kind_) {
      case FieldKind::constant: return m_;
      case FieldKind::h_profile: return schedule_(x - center_);
      case FieldKind::callable: return fn_(x);
    }
    return 0;
  }

 private:
  FieldKind kind_ = FieldKind::constant;
  double m_ = 1;
  Schedule schedule_;
  Point center_;
  std::function<double(const Point&)> fn_;
};

struct MLClassReport {
  bool in_range = true;
  bool derivatives_ok = true;
  double min_value = 0, max_value = 0;
  std::array<double, 4> max_derivative{};  // orders 1..4
  bool ok() const { return in_range && derivatives_ok; }
};

// Check psi against the M_L class on the lattice points of
// U_L = {L/2 < |x| < 2L}: range in (L/10, 5L) and finite-difference
// partial derivatives of orders 1..4 (axis directions, step `hstep`)
// bounded by 10 + tol.
inline MLClassReport validate_ml_class(const std::function<double(const std::array<double, kMaxDim>&)>& psi,
                                       double L, int d, double tol = 0.5, double hstep = 0.5,
                                       int stride = 1) {
  MLClassReport rep;
  rep.min_value = 1e300;
  rep.max_value = -1e300;
  const Domain big = Domain::ball(Point::zero(d), 2 * L);
  // central difference stencils for orders 1..4
  static const std::array<std::vector<double>, 4> stencil = {
      std::vector<double>{-0.5, 0, 0.5}, std::vector<double>{1, -2, 1},
      std::vector<double>{-0.5, 1, 0, -1, 0.5}, std::vector<double>{1, -4, 6, -4, 1}};
  std::size_t idx = 0;
  for (const auto& p : big.interior()) {
    if (idx++ % static_cast<std::size_t>(stride) != 0) continue;
    const double n = p.norm();
    if (!(n > L / 2 && n < 2 * L)) continue;
    std::array<double, kMaxDim> x{};
    for (int i = 0; i < d; ++i) x[i] = p.c[i];
    const double v = psi(x);
    rep.min_value = std::min(rep.min_value, v);
    rep.max_value = std::max(rep.max_value, v);
    if (!(v > L / 10 && v < 5 * L)) rep.in_range = false;
    for (int axis = 0; axis < d; ++axis)
      for (int order = 1; order <= 4; ++order) {
        const auto& w = stencil[order - 1];
        const int half = static_cast<int>(w.size()) / 2;
        double acc = 0;
        for (int k = 0; k < static_cast<int>(w.size()); ++k) {
          if (w[k] == 0) continue;
          auto y = x;
          y[axis] += (k - half) * hstep;
          acc += w[k] * psi(y);
        }
        const double der = std::abs(acc) / std::pow(hstep, order);
        rep.max_derivative[order - 1] = std::max(rep.max_derivative[order - 1], der);
        if (der > 10 + tol) rep.derivatives_ok = false;
      }
  }
  return rep;
}

}  // namespace rwre
