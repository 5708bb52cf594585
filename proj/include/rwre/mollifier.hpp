#pragma once

// The bump density phi on (1,2), its CDF, and the profile function h.

#include <boost/math/quadrature/gauss.hpp>
#include <boost/math/quadrature/gauss_kronrod.hpp>
#include <boost/math/tools/roots.hpp>

#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <vector>

#include "rwre/errors.hpp"

namespace rwre {

inline double bump_unnormalized(double t) {
  if (t <= 1.0 || t >= 2.0) return 0.0;
  return std::exp(-1.0 / ((t - 1.0) * (2.0 - t)));
}

// phi(t) = exp(-1/((t-1)(2-t))) / Z. The CDF is tabulated on `panels` equal
// panels with 20-point Gauss-Legendre per panel; partial panels are
// integrated on demand with the same rule.
class Mollifier {
 public:
  explicit Mollifier(int panels = 512) : panels_(panels) {
    if (panels < 1) throw Error(ErrorCode::config_invalid, "mollifier needs at least one panel");
    double err = 0;
    Z_ = boost::math::quadrature::gauss_kronrod<double, 61>::integrate(bump_unnormalized, 1.0, 2.0, 25, 1e-14,
                                                                        &err);
    if (!(err < 1e-12)) throw Error(ErrorCode::quadrature_nonconvergence, "mollifier normalisation");
    cum_.assign(panels_ + 1, 0.0);
    long double acc = 0;
    for (int i = 0; i < panels_; ++i) {
      acc += panel_integral(1.0 + static_cast<double>(i) / panels_, 1.0 + static_cast<double>(i + 1) / panels_);
      cum_[i + 1] = static_cast<double>(acc);
    }
    total_ = cum_.back();
  }

  double Z() const { return Z_; }
  int panels() const { return panels_; }
  // Integral of the normalised table over (1,2); should be 1 to ~1e-14.
  double table_total() const { return total_; }

  double pdf(double t) const { return bump_unnormalized(t) / Z_; }

  // P(T <= t) for T with density phi.
  double cdf(double t) const {
    if (t <= 1.0) return 0.0;
    if (t >= 2.0) return 1.0;
    const double u = (t - 1.0) * panels_;
    int i = static_cast<int>(std::floor(u));
    if (i >= panels_) return 1.0;
    const double a = 1.0 + static_cast<double>(i) / panels_;
    return cum_[i] + panel_integral(a, t);
  }

  // Mass in [a, b) of the density (1/m) phi(t/m).
  double mass(double a, double b, double m) const { return cdf(b / m) - cdf(a / m); }

 private:
  double panel_integral(double a, double b) const {
    if (b <= a) return 0.0;
    return boost::math::quadrature::gauss<double, 20>::integrate(bump_unnormalized, a, b) / Z_;
  }

  int panels_;
  double Z_ = 1;
  double total_ = 1;
  std::vector<double> cum_;
};

inline const Mollifier& default_mollifier() {
  static const Mollifier m;
  return m;
}

// h: identity on [0,1/2], constant 1 on [2,inf), and on (1/2,2)
// h'(x) = (1 - B((x-1/2)/1.5))^p with B(v) = Phi(1+v), Phi the bump CDF.
// p is calibrated so that h(2) = 1. The integral of h' is tabulated on
// equal panels, as for the mollifier CDF.
class HFunction {
 public:
  explicit HFunction(const Mollifier& phi = default_mollifier(), int panels = 256)
      : phi_(&phi), panels_(panels) {
    auto F = [this](double p) { return shape_integral(p, 1.0) - 1.0 / 3.0; };
    std::uintmax_t iters = 200;
    boost::math::tools::eps_tolerance<double> tol(50);
    auto [lo, hi] = boost::math::tools::toms748_solve(F, 1.0, 50.0, tol, iters);
    p_ = 0.5 * (lo + hi);
    if (std::abs(F(p_)) > 1e-13) throw Error(ErrorCode::quadrature_nonconvergence, "h calibration");
    cum_.assign(panels_ + 1, 0.0);
    for (int i = 0; i < panels_; ++i)
      cum_[i + 1] = cum_[i] + panel(p_, static_cast<double>(i) / panels_, static_cast<double>(i + 1) / panels_);
  }

  double p_cal() const { return p_; }

  double derivative(double x) const {
    if (x <= 0.5) return 1.0;
    if (x >= 2.0) return 0.0;
    return std::pow(1.0 - B((x - 0.5) / 1.5), p_);
  }

  double operator()(double x) const {
    if (x <= 0.5) return x;
    if (x >= 2.0) return 1.0;
    const double v = (x - 0.5) / 1.5;
    const int i = std::min(panels_ - 1, static_cast<int>(std::floor(v * panels_)));
    return 0.5 + 1.5 * (cum_[i] + panel(p_, static_cast<double>(i) / panels_, v));
  }

 private:
  double B(double v) const { return phi_->cdf(1.0 + v); }
  double panel(double p, double a, double b) const {
    if (b <= a) return 0.0;
    auto f = [this, p](double w) { return std::pow(1.0 - B(w), p); };
    return boost::math::quadrature::gauss<double, 20>::integrate(f, a, b);
  }
  double shape_integral(double p, double v) const {
    long double acc = 0;
    for (int i = 0; i < panels_; ++i) {
      const double a = static_cast<double>(i) / panels_;
      if (a >= v) break;
      acc += panel(p, a, std::min(v, static_cast<double>(i + 1) / panels_));
    }
    return static_cast<double>(acc);
  }

  const Mollifier* phi_;
  int panels_;
  double p_ = 1;
  std::vector<double> cum_;
};

inline const HFunction& default_hfunction() {
  static const HFunction h;
  return h;
}

}  // namespace rwre
