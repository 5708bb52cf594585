#pragma once

// Local CLT diagnostics for the coarse SRW step pi^_m, its Z^d Green's
// function, and the large-deviation envelope of its convolution powers.

#include <fftw3.h>

#include <algorithm>
#include <cmath>
#include <complex>
#include <memory>
#include <mutex>
#include <numbers>
#include <vector>

#include "rwre/coarse.hpp"
#include "rwre/errors.hpp"
#include "rwre/lattice.hpp"
#include "rwre/parallel.hpp"
#include "rwre/reference.hpp"
#include "rwre/rng.hpp"

namespace rwre {

namespace detail {
// FFTW planning is not thread safe.
inline std::mutex& fftw_mutex() {
  static std::mutex m;
  return m;
}
}  // namespace detail

// Cell limit for convolution grids, separate from the lattice-domain limit.
inline constexpr std::size_t kGridCapacity = 20'000'000;

// n-fold convolution powers of a step distribution on a periodic grid of
// side N (no wrap-around while the support fits: N >= 2 R n + 1).
class ConvolutionPowers {
 public:
  ConvolutionPowers(const StepDistribution& sd, int n_max, std::size_t capacity = kGridCapacity)
      : d_(sd.d), R_(sd.radius) {
    if (d_ != 3) throw Error(ErrorCode::domain_violation, "convolution grid implemented for d = 3");
    N_ = 2 * R_ * n_max + 1;
    const auto total = static_cast<std::size_t>(N_) * N_ * N_;
    if (total > capacity) throw CapacityError("convolution grid exceeds capacity");
    Nc_ = N_ / 2 + 1;
    real_.assign(total, 0.0);
    for (std::size_t k = 0; k < sd.points.size(); ++k) real_[slot(sd.points[k])] += sd.probs[k];
    spec_.assign(static_cast<std::size_t>(N_) * N_ * Nc_, {});
    std::lock_guard<std::mutex> lock(detail::fftw_mutex());
    fwd_ = fftw_plan_dft_r2c_3d(N_, N_, N_, real_.data(), reinterpret_cast<fftw_complex*>(spec_.data()), FFTW_ESTIMATE);
    std::vector<std::complex<double>> tmp(spec_.size());
    bwd_ = fftw_plan_dft_c2r_3d(N_, N_, N_, reinterpret_cast<fftw_complex*>(tmp.data()), real_.data(), FFTW_ESTIMATE);
    fftw_execute(fwd_);
    step_hat_ = spec_;
  }
  ~ConvolutionPowers() {
    std::lock_guard<std::mutex> lock(detail::fftw_mutex());
    fftw_destroy_plan(fwd_);
    fftw_destroy_plan(bwd_);
  }
  ConvolutionPowers(const ConvolutionPowers&) = delete;
  ConvolutionPowers& operator=(const ConvolutionPowers&) = delete;

  int side() const { return N_; }
  int half() const { return N_ / 2; }

  // Computes pi^n on the grid; read with at().
  void power(int n) {
    std::vector<std::complex<double>> s(step_hat_.size());
    for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::pow(step_hat_[i], n);
    fftw_execute_dft_c2r(bwd_, reinterpret_cast<fftw_complex*>(s.data()), real_.data());
    const double scale = 1.0 / (static_cast<double>(N_) * N_ * N_);
    for (auto& v : real_) v *= scale;
  }

  double at(const Point& x) const { return real_[slot(x)]; }

  template <class Fn>
  void for_each(Fn&& fn) const {
    const int h = half();
    Point x(3);
    for (x.c[0] = -h; x.c[0] <= h; ++x.c[0])
      for (x.c[1] = -h; x.c[1] <= h; ++x.c[1])
        for (x.c[2] = -h; x.c[2] <= h; ++x.c[2]) fn(x, at(x));
  }

 private:
  std::size_t slot(const Point& x) const {
    auto w = [this](int c) { return static_cast<std::size_t>(((c % N_) + N_) % N_); };
    return (w(x.c[0]) * N_ + w(x.c[1])) * N_ + w(x.c[2]);
  }

  int d_, R_, N_ = 1, Nc_ = 1;
  std::vector<double> real_;
  std::vector<std::complex<double>> spec_, step_hat_;
  fftw_plan fwd_ = nullptr, bwd_ = nullptr;
};

inline double clt_gaussian(double x2, double gamma, int n, int d) {
  const double v = gamma * n;
  return std::pow(2 * std::numbers::pi * v, -d / 2.0) * std::exp(-x2 / (2 * v));
}

struct CltRow {
  int n = 0;
  double sup_error = 0;
  double asymmetry = 0;        // max |pi^n(x) - pi^n(-x)|
  double gaussian_mass = 0;    // lattice sum of the Gaussian main term
  double mass = 0;             // sum of pi^n
};

struct CltReport {
  double m = 0;
  int d = 3;
  double gamma = 0;
  std::vector<CltRow> rows;
  double slope = 0;      // least squares of log sup_error on log n
  double intercept = 0;
};

// Least-squares line through (x_i, y_i); returns {slope, intercept}.
inline std::pair<double, double> fit_line(const std::vector<double>& x, const std::vector<double>& y) {
  const auto n = static_cast<double>(x.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    sx += x[i];
    sy += y[i];
    sxx += x[i] * x[i];
    sxy += x[i] * y[i];
  }
  const double b = (n * sxy - sx * sy) / (n * sxx - sx * sx);
  return {b, (sy - b * sx) / n};
}

inline CltReport local_clt_scan(double m, int n_min, int n_max, int d = 3) {
  if (n_min < 1 || n_max < n_min) throw Error(ErrorCode::config_invalid, "local_clt_scan needs 1 <= n_min <= n_max");
  auto sd = step_distribution(m, d);
  CltReport rep;
  rep.m = m;
  rep.d = d;
  rep.gamma = sd->gamma;
  ConvolutionPowers cp(*sd, n_max);
  std::vector<double> lx, ly;
  for (int n = n_min; n <= n_max; ++n) {
    cp.power(n);
    CltRow row;
    row.n = n;
    cp.for_each([&](const Point& x, double v) {
      const double g = clt_gaussian(static_cast<double>(x.norm2()), sd->gamma, n, d);
      row.sup_error = std::max(row.sup_error, std::abs(v - g));
      row.asymmetry = std::max(row.asymmetry, std::abs(v - cp.at(-x)));
      row.gaussian_mass += g;
      row.mass += v;
    });
    rep.rows.push_back(row);
    lx.push_back(std::log(static_cast<double>(n)));
    ly.push_back(std::log(row.sup_error));
  }
  if (lx.size() >= 2) std::tie(rep.slope, rep.intercept) = fit_line(lx, ly);
  return rep;
}

// ---------------------------------------------------------------------------
// Large deviations: pi^n(x) <= c1 m^{-d} exp(-|x|^2 / (c2 n m^2)).

struct LdFit {
  double m = 0;
  double c1 = 0;
  double c2 = 0;
  std::size_t points = 0;
};

// c2 from the least-squares slope of log(m^d pi^n(x)) against
// |x|^2/(n m^2) over the tail |x|^2 >= n m^2 (values above the FFT noise
// floor); c1 is then the smallest constant making the bound hold on every
// retained point.
inline LdFit ld_fit(double m, const std::vector<int>& ns, int d = 3, double floor = 1e-13) {
  auto sd = step_distribution(m, d);
  const int n_max = *std::max_element(ns.begin(), ns.end());
  ConvolutionPowers cp(*sd, n_max);
  std::vector<double> u, w;
  std::vector<std::pair<double, double>> kept;
  const double md = std::pow(m, d);
  for (int n : ns) {
    cp.power(n);
    cp.for_each([&](const Point& x, double v) {
      const double q = static_cast<double>(x.norm2()) / (n * m * m);
      if (v > floor && q >= 1.0) {
        u.push_back(q);
        w.push_back(std::log(md * v));
        kept.emplace_back(q, md * v);
      }
    });
  }
  LdFit f;
  f.m = m;
  f.points = kept.size();
  if (kept.size() < 2) return f;
  auto [slope, icpt] = fit_line(u, w);
  (void)icpt;
  f.c2 = slope < 0 ? -1.0 / slope : std::numeric_limits<double>::infinity();
  for (const auto& [q, val] : kept) f.c1 = std::max(f.c1, val * std::exp(q / f.c2));
  return f;
}

// ---------------------------------------------------------------------------
// Green's function of the coarse walk on Z^d.

enum class GreenMethod { mc, ball_corrected };

struct GreenEstimate {
  Point x;
  double value = 0;
  double std_error = 0;
  double ci_lo = 0, ci_hi = 0;   // 95% normal interval
  double scaled = 0;             // value * gamma_m |x|
  double correction = 0;         // boundary term included in value
  std::size_t walks = 0;
  std::size_t aborted = 0;
};

// Sampler for one coarse step: cumulative table over the support.
class StepSampler {
 public:
  explicit StepSampler(const StepDistribution& sd) : pts_(sd.points), R_(sd.radius), d_(sd.d) {
    cdf_.resize(sd.probs.size());
    double acc = 0;
    for (std::size_t i = 0; i < sd.probs.size(); ++i) cdf_[i] = (acc += sd.probs[i]);
    for (auto& c : cdf_) c /= acc;
    const int W = 2 * R_ + 1;
    dense_.assign(static_cast<std::size_t>(std::pow(W, d_)), 0.0);
    for (std::size_t i = 0; i < pts_.size(); ++i) dense_[slot(pts_[i])] = sd.probs[i];
  }
  const Point& draw(CounterRng& rng) const {
    const double u = rng.uniform();
    auto it = std::upper_bound(cdf_.begin(), cdf_.end(), u);
    if (it == cdf_.end()) --it;
    return pts_[static_cast<std::size_t>(it - cdf_.begin())];
  }
  // pi^(y), zero off the support box
  double prob(const Point& y) const {
    for (int i = 0; i < d_; ++i)
      if (y.c[i] < -R_ || y.c[i] > R_) return 0.0;
    return dense_[slot(y)];
  }
  int radius() const { return R_; }

 private:
  std::size_t slot(const Point& y) const {
    std::size_t s = 0;
    const auto W = static_cast<std::size_t>(2 * R_ + 1);
    for (int i = 0; i < d_; ++i) s = s * W + static_cast<std::size_t>(y.c[i] + R_);
    return s;
  }
  std::vector<Point> pts_;
  std::vector<double> cdf_, dense_;
  int R_, d_;
};

struct GreenOptions {
  GreenMethod method = GreenMethod::ball_corrected;
  std::size_t n_walks = 1'000'000;
  double radius_factor = 2.0;     // ball_corrected: walks stopped on leaving V_{factor * max|x|}
  double far_factor = 6.0;        // mc: walks stopped beyond far_factor * max|x|
  std::uint64_t seed = 1;
  std::size_t batch = 10'000;
  std::uint64_t step_cap = 100'000'000;
};

// Estimates g^_{m,Z^d}(0, x) for all targets from one set of walks.
//   mc:             visit counts until the walk leaves V_{far}; no tail term.
//   ball_corrected: g^ on the ball V_R from per-step landing probabilities
//                   pi^(x - X_n), plus the boundary term E[g^_{Z^d}(X_tau, x)]
//                   evaluated with the asymptote c(d) / (gamma |X_tau - x|^{d-2}).
inline std::vector<GreenEstimate> green_zd_estimate(double m, const std::vector<Point>& xs, const GreenOptions& opt,
                                                    int d = 3) {
  if (xs.empty()) return {};
  auto sd = step_distribution(m, d);
  StepSampler S(*sd);
  const double gam = sd->gamma;
  const double cd = c_d(d);
  double xmax = 0;
  for (const auto& x : xs) xmax = std::max(xmax, x.norm());
  const bool corrected = opt.method == GreenMethod::ball_corrected;
  const double R = corrected ? opt.radius_factor * xmax : opt.far_factor * xmax;
  const std::int64_t R2 = squared_threshold(R);
  const std::size_t nb = (opt.n_walks + opt.batch - 1) / opt.batch;
  const std::size_t K = xs.size();
  // per batch: sums and sums of squares of the per-walk score, per target
  std::vector<std::vector<double>> s1(nb, std::vector<double>(K, 0.0)), s2 = s1, c1 = s1;
  std::vector<std::size_t> aborted(nb, 0);
  const double reach = S.radius() * std::sqrt(static_cast<double>(d));
  parallel_for(nb, [&](std::size_t b) {
    CounterRng rng(opt.seed, 0x47000000ull + b);
    const std::size_t lo = b * opt.batch, hi = std::min(opt.n_walks, lo + opt.batch);
    std::vector<double> score(K), corr(K);
    for (std::size_t w = lo; w < hi; ++w) {
      std::fill(score.begin(), score.end(), 0.0);
      std::fill(corr.begin(), corr.end(), 0.0);
      Point X = Point::zero(d);
      std::uint64_t steps = 0;
      bool ok = true;
      for (;;) {
        if (corrected) {
          // time zero counts directly; later visits through the landing
          // probability pi^(x - X_j) of the next step
          if (steps == 0)
            for (std::size_t k = 0; k < K; ++k)
              if (X == xs[k]) score[k] += 1.0;
          for (std::size_t k = 0; k < K; ++k) {
            const Point dlt = xs[k] - X;
            if (dlt.norm() <= reach) score[k] += S.prob(dlt);
          }
        } else {
          for (std::size_t k = 0; k < K; ++k)
            if (X == xs[k]) score[k] += 1.0;
        }
        X = X + S.draw(rng);
        if (++steps > opt.step_cap) {
          ok = false;
          break;
        }
        if (X.norm2() > R2) break;
      }
      if (!ok) {
        ++aborted[b];
        continue;
      }
      if (corrected)
        for (std::size_t k = 0; k < K; ++k) {
          const double r = dist(X, xs[k]);
          corr[k] = cd / (gam * std::pow(r, d - 2));
        }
      for (std::size_t k = 0; k < K; ++k) {
        const double v = score[k] + corr[k];
        s1[b][k] += v;
        s2[b][k] += v * v;
        c1[b][k] += corr[k];
      }
    }
  });
  std::vector<GreenEstimate> out(K);
  std::size_t ab = 0;
  for (auto a : aborted) ab += a;
  const double n = static_cast<double>(opt.n_walks - ab);
  for (std::size_t k = 0; k < K; ++k) {
    double t1 = 0, t2 = 0, tc = 0;
    for (std::size_t b = 0; b < nb; ++b) {
      t1 += s1[b][k];
      t2 += s2[b][k];
      tc += c1[b][k];
    }
    auto& e = out[k];
    e.x = xs[k];
    e.walks = opt.n_walks;
    e.aborted = ab;
    e.value = t1 / n;
    const double var = std::max(0.0, t2 / n - e.value * e.value);
    e.std_error = std::sqrt(var / n);
    e.ci_lo = e.value - 1.96 * e.std_error;
    e.ci_hi = e.value + 1.96 * e.std_error;
    e.correction = tc / n;
    e.scaled = e.value * gam * std::pow(xs[k].norm(), d - 2);
  }
  return out;
}

}  // namespace rwre
