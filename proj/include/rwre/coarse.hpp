#pragma once

// Coarse-grained kernels.
//
// For a source x and radius scale m, the exit law ex_{V_t(x) ∩ W}(x,.) only
// changes when t^2 crosses one of the squared distances |y-x|^2, so the
// t-integral is a finite mixture weighted by increments of the mollifier
// CDF. All exit laws of the nested sets are read off one LU factorisation:
// with the points ordered by distance to x, the leading blocks of the LU of
// (I - P) are the LU factors of every nested set.

#include <Eigen/Dense>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseLU>

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <mutex>
#include <unordered_map>
#include <vector>

#include "rwre/environment.hpp"
#include "rwre/errors.hpp"
#include "rwre/kernel.hpp"
#include "rwre/lattice.hpp"
#include "rwre/mollifier.hpp"
#include "rwre/parallel.hpp"
#include "rwre/schedule.hpp"
#include "rwre/solver.hpp"

namespace rwre {

using LawFn = std::function<SiteLaw(const Point&)>;

inline LawFn env_law(const Environment& env) {
  return [&env](const Point& x) { return env.law(x); };
}
inline LawFn srw_law(int d) {
  return [d](const Point&) { return SiteLaw::uniform(d); };
}

// Largest integer k with k < 4 m^2, the outermost squared radius reached by
// t < 2m.
inline std::int64_t coarse_kmax(double m) {
  const long double v = 4.0L * m * m;
  auto k = static_cast<std::int64_t>(std::ceil(v)) - 1;
  while (static_cast<long double>(k) >= v) --k;
  while (static_cast<long double>(k + 1) < v) ++k;
  return k;
}

// Exit laws of the nested sets {y in W : |y-x|^2 <= k} from x, for all k
// up to kmax. W == nullptr means no restriction.
class NestedBallSolver {
 public:
  struct ExitLaw {
    std::int64_t k = 0;        // squared radius of the set
    std::vector<double> prob;  // over target indices (see target())
    double mean_time = 0;      // E_x[tau] in steps of the walk
  };

  NestedBallSolver(const Point& x, std::int64_t kmax, const Domain* W, const LawFn& law,
                   std::size_t capacity = default_capacity())
      : x_(x), kmax_(kmax), d_(x.dim) {
    if (kmax < 0) throw Error(ErrorCode::degenerate_field, "negative radius");
    if (W && !W->is_interior(x)) throw Error(ErrorCode::domain_violation, "source outside W");
    const auto R = static_cast<std::int32_t>(std::floor(std::sqrt(static_cast<double>(kmax)))) + 1;
    std::array<std::int32_t, kMaxDim> lo{}, hi{};
    for (int i = 0; i < d_; ++i) {
      lo[i] = x.c[i] - R - 1;
      hi[i] = x.c[i] + R + 1;
    }
    index_ = BoxIndex(d_, lo, hi);
    // members of the largest set
    Domain ball = Domain::ball_sq(x, kmax, capacity);
    std::vector<std::pair<std::int64_t, Point>> mem;
    for (const auto& y : ball.interior())
      if (!W || W->is_interior(y)) mem.emplace_back(dist2(y, x), y);
    std::stable_sort(mem.begin(), mem.end(),
                     [](const auto& a, const auto& b) { return a.first < b.first; });
    n_ = mem.size();
    for (std::size_t i = 0; i < n_; ++i) {
      pts_.push_back(mem[i].second);
      d2_.push_back(mem[i].first);
      index_.set(mem[i].second, static_cast<std::int32_t>(i));
    }
    // outside targets
    for (std::size_t i = 0; i < n_; ++i)
      for (int k = 0; k < 2 * d_; ++k) {
        Point z = pts_[i] + direction(d_, k);
        if (index_.get(z) < 0) {
          index_.set(z, static_cast<std::int32_t>(pts_.size()));
          pts_.push_back(z);
        }
      }
    // transition structure of the members
    laws_.resize(n_);
    nbr_.resize(n_ * 2 * static_cast<std::size_t>(d_));
    for (std::size_t i = 0; i < n_; ++i) {
      laws_[i] = law(pts_[i]);
      for (int k = 0; k < 2 * d_; ++k)
        nbr_[i * 2 * d_ + k] = static_cast<std::size_t>(index_.get(pts_[i] + direction(d_, k)));
    }
    factor();
  }

  const Point& center() const { return x_; }
  std::size_t n_members() const { return n_; }
  std::size_t n_targets() const { return pts_.size(); }
  const Point& target(std::size_t j) const { return pts_[j]; }

  // Distinct squared radii of members, ascending.
  std::vector<std::int64_t> radii() const {
    std::vector<std::int64_t> r(d2_.begin(), d2_.end());
    r.erase(std::unique(r.begin(), r.end()), r.end());
    return r;
  }

  // Exit law of {y in W : |y-x|^2 <= k}.
  ExitLaw exit_law(std::int64_t k) const {
    const auto nk = static_cast<Eigen::Index>(std::upper_bound(d2_.begin(), d2_.end(), k) - d2_.begin());
    ExitLaw out;
    out.k = k;
    out.prob.assign(pts_.size(), 0.0);
    // u^T M_k = e_0^T  <=>  U_k^T w = e_0, L_k^T u = w
    Vec u = Vec::Zero(nk);
    u[0] = 1.0;
    LU_.topLeftCorner(nk, nk).triangularView<Eigen::Upper>().transpose().solveInPlace(u);
    LU_.topLeftCorner(nk, nk).triangularView<Eigen::UnitLower>().transpose().solveInPlace(u);
    double tau = 0;
    for (Eigen::Index i = 0; i < nk; ++i) {
      tau += u[i];
      const auto si = static_cast<std::size_t>(i);
      for (int e = 0; e < 2 * d_; ++e) {
        const std::size_t j = nbr_[si * 2 * d_ + e];
        if (j >= static_cast<std::size_t>(nk)) out.prob[j] += u[i] * laws_[si].p[e];
      }
    }
    out.mean_time = tau;
    return out;
  }

 private:
  void factor() {
    const auto n = static_cast<Eigen::Index>(n_);
    LU_ = Mat::Identity(n, n);
    Eigen::Index bw = 0;
    for (std::size_t i = 0; i < n_; ++i)
      for (int e = 0; e < 2 * d_; ++e) {
        const std::size_t j = nbr_[i * 2 * d_ + e];
        if (j < n_) {
          LU_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) -= laws_[i].p[e];
          bw = std::max(bw, static_cast<Eigen::Index>(i > j ? i - j : j - i));
        }
      }
    // Doolittle without pivoting; I - P is a nonsingular M-matrix on every
    // leading block, so all pivots are positive. Distance ordering makes the
    // matrix banded and the factors keep the band.
    for (Eigen::Index k = 0; k < n; ++k) {
      const double piv = LU_(k, k);
      if (!(piv > 0)) throw Error(ErrorCode::singular_system, "nonpositive pivot in nested solve");
      const Eigen::Index len = std::min(n - k - 1, bw);
      if (len > 0) {
        LU_.col(k).segment(k + 1, len) /= piv;
        LU_.block(k + 1, k + 1, len, len).noalias() -= LU_.col(k).segment(k + 1, len) * LU_.row(k).segment(k + 1, len);
      }
    }
  }

  Point x_;
  std::int64_t kmax_;
  int d_;
  std::size_t n_ = 0;
  std::vector<Point> pts_;
  std::vector<std::int64_t> d2_;
  std::vector<SiteLaw> laws_;
  std::vector<std::size_t> nbr_;
  BoxIndex index_;
  Mat LU_;
};

// A mixture piece: the set {|y-x|^2 <= k} carries weight w.
struct MixturePiece {
  std::int64_t k;
  double w;
};

// Pieces of the t-integral for scale m, given the ascending distinct squared
// radii available (radii[0] == 0).
inline std::vector<MixturePiece> mixture_pieces(const std::vector<std::int64_t>& radii, double m,
                                                const Mollifier& phi = default_mollifier()) {
  std::vector<MixturePiece> out;
  const double m2 = m * m;
  const std::int64_t kmax = coarse_kmax(m);
  // set at t just above m: largest radius <= m^2
  std::int64_t cur = 0;
  for (auto k : radii)
    if (static_cast<double>(k) <= m2) cur = k;
  double a = m;
  for (auto k : radii) {
    if (static_cast<double>(k) <= m2 || k > kmax) continue;
    const double b = std::sqrt(static_cast<double>(k));
    out.push_back({cur, phi.mass(a, b, m)});
    cur = k;
    a = b;
  }
  out.push_back({cur, phi.mass(a, 2 * m, m)});
  // drop empty pieces
  std::erase_if(out, [](const MixturePiece& p) { return p.w == 0.0; });
  return out;
}

// Ascending squared norms of lattice points with |y|^2 <= kmax.
inline std::vector<std::int64_t> lattice_radii(int d, std::int64_t kmax) {
  Domain b = Domain::ball_sq(Point::zero(d), kmax);
  std::vector<std::int64_t> r;
  for (const auto& p : b.interior()) r.push_back(p.norm2());
  std::sort(r.begin(), r.end());
  r.erase(std::unique(r.begin(), r.end()), r.end());
  return r;
}

// One coarse row as (point, probability) pairs and its mean time.
struct CoarseRow {
  std::vector<std::pair<Point, double>> entries;
  double mean_time = 0;
};

inline CoarseRow mix(const NestedBallSolver& S, const std::vector<MixturePiece>& pieces) {
  std::vector<double> acc(S.n_targets(), 0.0);
  double tau = 0;
  for (const auto& pc : pieces) {
    auto ex = S.exit_law(pc.k);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += pc.w * ex.prob[j];
    tau += pc.w * ex.mean_time;
  }
  CoarseRow row;
  row.mean_time = tau;
  for (std::size_t j = 0; j < acc.size(); ++j)
    if (acc[j] != 0.0) row.entries.emplace_back(S.target(j), acc[j]);
  return row;
}

// Translation-invariant cache of simple random walk exit laws from uncut
// balls centred at the origin, keyed by (d, kmax).
class SrwBallCache {
 public:
  struct Entry {
    std::vector<std::int64_t> radii;
    std::vector<NestedBallSolver::ExitLaw> laws;  // one per radius
    std::vector<Point> targets;                   // offsets
  };

  static SrwBallCache& instance() {
    static SrwBallCache c;
    return c;
  }

  std::shared_ptr<const Entry> get(int d, std::int64_t kmax) {
    std::lock_guard<std::mutex> lock(mu_);
    auto key = std::make_pair(d, kmax);
    auto it = cache_.find(key);
    if (it != cache_.end()) return it->second;
    NestedBallSolver S(Point::zero(d), kmax, nullptr, srw_law(d));
    auto e = std::make_shared<Entry>();
    e->radii = S.radii();
    for (auto k : e->radii) e->laws.push_back(S.exit_law(k));
    for (std::size_t j = 0; j < S.n_targets(); ++j) e->targets.push_back(S.target(j));
    cache_[key] = e;
    return e;
  }

  void clear() {
    std::lock_guard<std::mutex> lock(mu_);
    cache_.clear();
  }

 private:
  std::mutex mu_;
  std::map<std::pair<int, std::int64_t>, std::shared_ptr<const Entry>> cache_;
};

// Coarse row of SRW on Z^d (no restriction) from x with scale m.
inline CoarseRow srw_free_row(const Point& x, double m, const Mollifier& phi = default_mollifier()) {
  auto e = SrwBallCache::instance().get(x.dim, coarse_kmax(m));
  auto pieces = mixture_pieces(e->radii, m, phi);
  std::vector<double> acc(e->targets.size(), 0.0);
  double tau = 0;
  for (const auto& pc : pieces) {
    const auto pos = static_cast<std::size_t>(std::lower_bound(e->radii.begin(), e->radii.end(), pc.k) -
                                              e->radii.begin());
    const auto& ex = e->laws[pos];
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += pc.w * ex.prob[j];
    tau += pc.w * ex.mean_time;
  }
  CoarseRow row;
  row.mean_time = tau;
  for (std::size_t j = 0; j < acc.size(); ++j)
    if (acc[j] != 0.0) row.entries.emplace_back(x + e->targets[j], acc[j]);
  return row;
}

// Coarse row of the walk `law` on W from x with scale m. `is_srw` enables the
// translation cache when the largest ball lies inside W.
inline CoarseRow coarse_row(const Point& x, double m, const Domain* W, const LawFn& law, bool is_srw,
                            const Mollifier& phi = default_mollifier()) {
  if (!(m > 0) || !std::isfinite(m)) throw Error(ErrorCode::degenerate_field, "nonpositive radius at " + x.str());
  const std::int64_t kmax = coarse_kmax(m);
  if (is_srw) {
    bool inside = !W;
    if (W && W->kind() == DomainKind::ball) {
      // V_{2m}(x) inside W iff (|x - c| + sqrt(kmax))^2 <= R^2, checked exactly
      const double reach = std::sqrt(static_cast<double>(dist2(x, W->center()))) +
                           std::sqrt(static_cast<double>(kmax)) + 1e-9;
      inside = reach * reach <= static_cast<double>(W->radius2()) - 1e-9;
    }
    if (inside) return srw_free_row(x, m, phi);
  }
  NestedBallSolver S(x, kmax, W, law);
  return mix(S, mixture_pieces(S.radii(), m, phi));
}

struct CoarseResult {
  Kernel kernel;
  Vec mean_time;  // per interior point: the phi-mixture of E_x[tau]
};

// Coarse-grained kernel of `law` on W with field psi.
inline CoarseResult coarse_grain(const LawFn& law, bool is_srw, const SmoothingField& field, DomainPtr W,
                                 const Mollifier& phi = default_mollifier()) {
  const std::size_t n = W->n_interior();
  std::vector<CoarseRow> rows(n);
  parallel_for(n, [&](std::size_t i) {
    const Point& x = W->point(i);
    rows[i] = coarse_row(x, field(x), W.get(), law, is_srw, phi);
  });
  std::vector<Triplet> trips;
  CoarseResult res{Kernel{W, SpMat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(W->size()))},
                   Vec(static_cast<Eigen::Index>(n))};
  for (std::size_t i = 0; i < n; ++i) {
    for (const auto& [z, p] : rows[i].entries) {
      auto j = W->find(z);
      if (!j) throw Error(ErrorCode::domain_violation, "coarse target outside the domain closure");
      trips.emplace_back(static_cast<int>(i), static_cast<int>(*j), p);
    }
    res.mean_time[static_cast<Eigen::Index>(i)] = rows[i].mean_time;
  }
  res.kernel.P.setFromTriplets(trips.begin(), trips.end());
  res.kernel.P.makeCompressed();
  return res;
}

inline CoarseResult coarse_grain(const Environment& env, const SmoothingField& field, DomainPtr W,
                                 const Mollifier& phi = default_mollifier()) {
  return coarse_grain(env_law(env), env.is_srw(), field, std::move(W), phi);
}

inline CoarseResult coarse_grain_srw(int d, const SmoothingField& field, DomainPtr W,
                                     const Mollifier& phi = default_mollifier()) {
  return coarse_grain(srw_law(d), true, field, std::move(W), phi);
}

// ---------------------------------------------------------------------------
// One coarse step of SRW on Z^d with constant scale m, from the origin.
// Exit laws of each ball are solved on orbit representatives of the signed
// permutation group.

struct StepDistribution {
  int d = 3;
  double m = 1;
  int radius = 0;                 // support within |y| <= radius
  std::vector<Point> points;      // support, lexicographic
  std::vector<double> probs;
  double gamma = 0;               // per-axis variance
  double mean_time = 0;           // phi-mixture of E_0[tau]

  double at(const Point& y) const {
    auto it = std::lower_bound(points.begin(), points.end(), y);
    return (it != points.end() && *it == y) ? probs[static_cast<std::size_t>(it - points.begin())] : 0.0;
  }
};

namespace detail {

inline std::size_t orbit_size(const Point& rep) {
  // 2^{#nonzero} * d! / prod(multiplicity!)
  const int d = rep.dim;
  std::size_t s = 1;
  for (int i = 0; i < d; ++i)
    if (rep.c[i] != 0) s *= 2;
  std::size_t f = 1;
  for (int i = 2; i <= d; ++i) f *= static_cast<std::size_t>(i);
  int i = 0;
  while (i < d) {
    int j = i;
    while (j < d && rep.c[j] == rep.c[i]) ++j;
    for (int q = 2; q <= j - i; ++q) f /= static_cast<std::size_t>(q);
    i = j;
  }
  return s * f;
}

// SRW exit law from the origin of {|y|^2 <= k}, on boundary orbit
// representatives; also E_0 tau.
struct RadialExit {
  std::vector<std::pair<Point, double>> rep_probs;  // per boundary representative, per point
  double mean_time = 0;
};

inline RadialExit radial_srw_exit(int d, std::int64_t k) {
  std::vector<Point> reps;
  const auto R = static_cast<std::int32_t>(std::floor(std::sqrt(static_cast<double>(k)))) + 1;
  std::array<std::int32_t, kMaxDim> lo{}, hi{};
  for (int i = 0; i < d; ++i) {
    lo[i] = 0;
    hi[i] = R + 1;
  }
  BoxIndex idx(d, lo, hi);
  Domain ball = Domain::ball_sq(Point::zero(d), k);
  for (const auto& y : ball.interior()) {
    bool canon = true;
    for (int i = 0; i < d; ++i) {
      if (y.c[i] < 0) canon = false;
      if (i + 1 < d && y.c[i] < y.c[i + 1]) canon = false;
    }
    if (canon) {
      idx.set(y, static_cast<std::int32_t>(reps.size()));
      reps.push_back(y);
    }
  }
  const auto n = static_cast<Eigen::Index>(reps.size());
  // The lumped chain is reversible with respect to the orbit sizes, so
  // D (I - Q) with D = diag(|orbit|) is symmetric positive definite.
  std::vector<Eigen::Triplet<double>> trips;
  const double q = 1.0 / (2 * d);
  std::vector<double> D(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    const double w = static_cast<double>(orbit_size(reps[static_cast<std::size_t>(i)]));
    D[static_cast<std::size_t>(i)] = w;
    trips.emplace_back(static_cast<int>(i), static_cast<int>(i), w);
    for (int e = 0; e < 2 * d; ++e) {
      Point z = reps[static_cast<std::size_t>(i)] + direction(d, e);
      if (z.norm2() > k) continue;
      trips.emplace_back(static_cast<int>(i), idx.get(orbit_representative(z)), -w * q);
    }
  }
  SpMatC A(n, n);
  A.setFromTriplets(trips.begin(), trips.end());
  Eigen::SimplicialLDLT<SpMatC> lu(A);
  if (lu.info() != Eigen::Success) throw Error(ErrorCode::singular_system, "radial solve failed");
  Vec b = Vec::Zero(n);
  b[0] = D[0];  // the origin is the first representative
  Vec v = lu.solve(b);  // v(y) = g(y,0) = g(0,y)
  RadialExit out;
  for (Eigen::Index i = 0; i < n; ++i)
    out.mean_time += v[i] * static_cast<double>(orbit_size(reps[static_cast<std::size_t>(i)]));
  // boundary representatives: canonical points outside with a neighbour inside
  for (const auto& y : reps)
    for (int e = 0; e < 2 * d; ++e) {
      Point z = orbit_representative(y + direction(d, e));
      if (z.norm2() <= k) continue;
      if (idx.get(z) == -3) continue;
      idx.set(z, -3);
      double p = 0;
      for (int f = 0; f < 2 * d; ++f) {
        Point w = z + direction(d, f);
        if (w.norm2() <= k) p += q * v[idx.get(orbit_representative(w))];
      }
      out.rep_probs.emplace_back(z, p);
    }
  return out;
}

// All balls V_k, k in ks, at once. Representatives are ordered by norm so
// each V_k is a leading block; a banded LDL^T of D(I - Q) on the largest
// ball then serves every k. The forward sweep for e_0 is shared.
inline std::vector<RadialExit> radial_srw_exit_nested(int d, const std::vector<std::int64_t>& ks) {
  std::vector<RadialExit> outs(ks.size());
  if (ks.empty()) return outs;
  const std::int64_t kmax = *std::max_element(ks.begin(), ks.end());
  const auto R = static_cast<std::int32_t>(std::floor(std::sqrt(static_cast<double>(kmax)))) + 1;
  std::array<std::int32_t, kMaxDim> lo{}, hi{};
  for (int i = 0; i < d; ++i) hi[i] = R + 1;
  std::vector<Point> reps;
  {
    Domain ball = Domain::ball_sq(Point::zero(d), kmax);
    for (const auto& y : ball.interior()) {
      bool canon = true;
      for (int i = 0; i < d; ++i) {
        if (y.c[i] < 0) canon = false;
        if (i + 1 < d && y.c[i] < y.c[i + 1]) canon = false;
      }
      if (canon) reps.push_back(y);
    }
  }
  std::stable_sort(reps.begin(), reps.end(), [](const Point& a, const Point& b) { return a.norm2() < b.norm2(); });
  BoxIndex idx(d, lo, hi);
  for (std::size_t i = 0; i < reps.size(); ++i) idx.set(reps[i], static_cast<std::int32_t>(i));
  const std::size_t n = reps.size();
  const double q = 1.0 / (2 * d);
  std::vector<double> D(n);
  std::vector<std::vector<std::pair<std::size_t, double>>> nb(n);
  std::size_t bw = 0;
  for (std::size_t i = 0; i < n; ++i) {
    D[i] = static_cast<double>(orbit_size(reps[i]));
    for (int e = 0; e < 2 * d; ++e) {
      Point z = reps[i] + direction(d, e);
      if (z.norm2() > kmax) continue;
      const auto j = static_cast<std::size_t>(idx.get(orbit_representative(z)));
      if (j == i) continue;
      bool merged = false;
      for (auto& [jj, v] : nb[i])
        if (jj == j) v -= D[i] * q, merged = true;
      if (!merged) nb[i].emplace_back(j, -D[i] * q);
      bw = std::max(bw, i > j ? i - j : j - i);
    }
  }
  // diagonal self-loops (z maps back to its own orbit)
  std::vector<double> diag(D);
  for (std::size_t i = 0; i < n; ++i)
    for (int e = 0; e < 2 * d; ++e) {
      Point z = reps[i] + direction(d, e);
      if (z.norm2() <= kmax && static_cast<std::size_t>(idx.get(orbit_representative(z))) == i) diag[i] -= D[i] * q;
    }
  // band storage: Lb[i*(bw+1) + (i-j)] for i-bw <= j <= i
  const std::size_t W = bw + 1;
  std::vector<double> Lb(n * W, 0.0);
  auto at = [&](std::size_t i, std::size_t j) -> double& { return Lb[i * W + (i - j)]; };
  for (std::size_t i = 0; i < n; ++i) {
    at(i, i) = diag[i];
    for (const auto& [j, v] : nb[i])
      if (j < i) at(i, j) = v;
  }
  std::vector<double> dd(n);
  for (std::size_t j = 0; j < n; ++j) {
    const std::size_t k0 = j >= bw ? j - bw : 0;
    double s = at(j, j);
    for (std::size_t k = k0; k < j; ++k) s -= at(j, k) * at(j, k) * dd[k];
    if (!(s > 0)) throw Error(ErrorCode::singular_system, "radial band factorization");
    dd[j] = s;
    const std::size_t i1 = std::min(n - 1, j + bw);
    for (std::size_t i = j + 1; i <= i1; ++i) {
      const std::size_t kk0 = std::max(k0, i >= bw ? i - bw : 0);
      double t = at(i, j);
      for (std::size_t k = kk0; k < j; ++k) t -= at(i, k) * at(j, k) * dd[k];
      at(i, j) = t / s;
    }
  }
  // forward: L y = D_0 e_0, z = y / dd
  std::vector<double> z(n);
  for (std::size_t i = 0; i < n; ++i) {
    double t = i == 0 ? D[0] : 0.0;
    for (std::size_t k = (i >= bw ? i - bw : 0); k < i; ++k) t -= at(i, k) * z[k] * dd[k];
    z[i] = t / dd[i];
  }
  std::vector<std::size_t> count(ks.size());
  std::vector<double> v(n);
  for (std::size_t p = 0; p < ks.size(); ++p) {
    const std::int64_t k = ks[p];
    const auto nk = static_cast<std::size_t>(
        std::partition_point(reps.begin(), reps.end(), [k](const Point& y) { return y.norm2() <= k; }) -
        reps.begin());
    // back: L^T v = z on the leading block
    for (std::size_t ii = nk; ii-- > 0;) {
      double t = z[ii];
      for (std::size_t i = ii + 1; i < std::min(nk, ii + bw + 1); ++i) t -= at(i, ii) * v[i];
      v[ii] = t;
    }
    RadialExit& out = outs[p];
    for (std::size_t i = 0; i < nk; ++i) out.mean_time += v[i] * D[i];
    std::map<Point, double> seen;
    for (std::size_t i = 0; i < nk; ++i)
      for (int e = 0; e < 2 * d; ++e) {
        Point y = orbit_representative(reps[i] + direction(d, e));
        if (y.norm2() <= k || seen.count(y)) continue;
        double s = 0;
        for (int f = 0; f < 2 * d; ++f) {
          Point w = y + direction(d, f);
          if (w.norm2() <= k) s += q * v[static_cast<std::size_t>(idx.get(orbit_representative(w)))];
        }
        seen.emplace(y, s);
      }
    out.rep_probs.assign(seen.begin(), seen.end());
  }
  return outs;
}

}  // namespace detail

inline StepDistribution compute_step_distribution(double m, int d, const Mollifier& phi = default_mollifier()) {
  if (!(m > 0)) throw Error(ErrorCode::degenerate_field, "step scale must be positive");
  const std::int64_t kmax = coarse_kmax(m);
  auto pieces = mixture_pieces(lattice_radii(d, kmax), m, phi);
  StepDistribution sd;
  sd.d = d;
  sd.m = m;
  sd.radius = static_cast<int>(std::floor(std::sqrt(static_cast<double>(kmax)))) + 1;
  std::map<Point, double> rep_acc;
  double tau = 0;
  std::vector<std::int64_t> ks;
  for (const auto& pc : pieces) ks.push_back(pc.k);
  const auto exits = detail::radial_srw_exit_nested(d, ks);
  for (std::size_t p = 0; p < pieces.size(); ++p) {
    for (const auto& [z, pr] : exits[p].rep_probs) rep_acc[z] += pieces[p].w * pr;
    tau += pieces[p].w * exits[p].mean_time;
  }
  sd.mean_time = tau;
  // expand orbits
  auto group = signed_permutation_group(d);
  std::map<Point, double> full;
  double g2 = 0;
  for (const auto& [z, p] : rep_acc) {
    std::vector<Point> orbit;
    for (const auto& g : group) orbit.push_back(g.apply(z));
    std::sort(orbit.begin(), orbit.end());
    orbit.erase(std::unique(orbit.begin(), orbit.end()), orbit.end());
    for (const auto& y : orbit) full[y] = p;
    g2 += p * static_cast<double>(orbit.size()) * static_cast<double>(z.norm2());
  }
  sd.gamma = g2 / d;
  for (const auto& [y, p] : full) {
    sd.points.push_back(y);
    sd.probs.push_back(p);
  }
  return sd;
}

// Cached by (d, m).
inline std::shared_ptr<const StepDistribution> step_distribution(double m, int d) {
  static std::mutex mu;
  static std::map<std::pair<int, double>, std::shared_ptr<const StepDistribution>> cache;
  {
    std::lock_guard<std::mutex> lock(mu);
    auto it = cache.find({d, m});
    if (it != cache.end()) return it->second;
  }
  auto sd = std::make_shared<const StepDistribution>(compute_step_distribution(m, d));
  std::lock_guard<std::mutex> lock(mu);
  cache[{d, m}] = sd;
  return sd;
}

inline double gamma_m(double m, int d) { return step_distribution(m, d)->gamma; }

// ---------------------------------------------------------------------------
// Level-4 modification: at bad x the row becomes the exit law of the coarse
// chain from V_{t(x)}(x) ∩ W, t(x) = K1 h(x).

inline Kernel modify_level4(const Kernel& cg, const std::vector<Point>& bad, double K1, const SmoothingField& h) {
  if (!(K1 >= 2)) throw Error(ErrorCode::config_invalid, "K1 must be >= 2");
  const Domain& W = *cg.domain;
  const double half = std::sqrt(static_cast<double>(W.radius2())) / 2;
  std::map<std::size_t, std::vector<std::pair<std::size_t, double>>> replaced;
  for (const auto& x : bad) {
    if (W.kind() == DomainKind::ball && dist(x, W.center()) > half)
      throw Error(ErrorCode::domain_violation, "bad point outside V_{L/2}: " + x.str());
    auto xi = W.find(x);
    if (!xi || *xi >= W.n_interior()) continue;
    const double t = K1 * h(x);
    const std::int64_t k = squared_threshold(t);
    // local set A = V_t(x) ∩ interior(W)
    std::vector<std::size_t> A;
    std::unordered_map<std::size_t, Eigen::Index> loc;
    for (std::size_t i = 0; i < W.n_interior(); ++i)
      if (dist2(W.point(i), x) <= k) {
        loc[i] = static_cast<Eigen::Index>(A.size());
        A.push_back(i);
      }
    const auto na = static_cast<Eigen::Index>(A.size());
    std::vector<Eigen::Triplet<double>> trips;
    for (Eigen::Index a = 0; a < na; ++a) {
      trips.emplace_back(static_cast<int>(a), static_cast<int>(a), 1.0);
      for (SpMat::InnerIterator it(cg.P, static_cast<Eigen::Index>(A[static_cast<std::size_t>(a)])); it; ++it) {
        auto f = loc.find(static_cast<std::size_t>(it.col()));
        // transpose: column a of M^T holds row a of M
        if (f != loc.end()) trips.emplace_back(static_cast<int>(f->second), static_cast<int>(a), -it.value());
      }
    }
    SpMatC Mt(na, na);
    Mt.setFromTriplets(trips.begin(), trips.end());
    Eigen::SparseLU<SpMatC> lu(Mt);
    if (lu.info() != Eigen::Success) throw Error(ErrorCode::solver_failure, "inner exit solve failed");
    Vec b = Vec::Zero(na);
    b[loc[*xi]] = 1.0;
    Vec u = lu.solve(b);
    std::map<std::size_t, double> row;
    for (Eigen::Index a = 0; a < na; ++a)
      for (SpMat::InnerIterator it(cg.P, static_cast<Eigen::Index>(A[static_cast<std::size_t>(a)])); it; ++it)
        if (!loc.count(static_cast<std::size_t>(it.col())))
          row[static_cast<std::size_t>(it.col())] += u[a] * it.value();
    replaced[*xi] = {row.begin(), row.end()};
  }
  std::vector<Triplet> trips;
  for (std::size_t i = 0; i < cg.n_interior(); ++i) {
    auto f = replaced.find(i);
    if (f != replaced.end()) {
      for (const auto& [j, p] : f->second) trips.emplace_back(static_cast<int>(i), static_cast<int>(j), p);
    } else {
      for (SpMat::InnerIterator it(cg.P, static_cast<Eigen::Index>(i)); it; ++it)
        trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), it.value());
    }
  }
  Kernel K{cg.domain, SpMat(cg.P.rows(), cg.P.cols())};
  K.P.setFromTriplets(trips.begin(), trips.end());
  K.P.makeCompressed();
  return K;
}

// ---------------------------------------------------------------------------
// Sojourn fields

struct SojournField {
  DomainPtr domain;
  Vec values;  // Lambda_L(x) per interior point; zero outside V_L
  double at(const Point& x) const {
    auto i = domain->find(x);
    return (i && *i < domain->n_interior()) ? values[static_cast<Eigen::Index>(*i)] : 0.0;
  }
};

inline SojournField sojourn_field(const Environment& env, const Schedule& S) {
  auto W = make_ball(Point::zero(env.dim()), S.L);
  auto res = coarse_grain(env, SmoothingField::h_profile(S, Point::zero(env.dim())), W);
  return {W, res.mean_time};
}

struct SojournCheck {
  double direct = 0;   // E_{x,w}[tau_L], nearest-neighbour solve
  double coarse = 0;   // (G^ Lambda_L)(x)
  double residual = 0;
};

// Compare E_x[tau_L] with the coarse Green's function applied to Lambda_L,
// at every point of `xs`.
inline std::vector<SojournCheck> sojourn_decomposition_check(const Environment& env, const Schedule& S,
                                                             const std::vector<Point>& xs) {
  auto W = make_ball(Point::zero(env.dim()), S.L);
  auto res = coarse_grain(env, SmoothingField::h_profile(S, Point::zero(env.dim())), W);
  GreenOperator Gc(res.kernel);
  const Vec lhs = Gc.solve(res.mean_time);
  GreenOperator Gd(rwre_kernel(env, W));
  const Vec direct = Gd.mean_exit_times();
  std::vector<SojournCheck> out;
  for (const auto& x : xs) {
    auto i = W->find(x);
    SojournCheck c;
    if (i && *i < W->n_interior()) {
      c.direct = direct[static_cast<Eigen::Index>(*i)];
      c.coarse = lhs[static_cast<Eigen::Index>(*i)];
    }
    c.residual = std::abs(c.direct - c.coarse);
    out.push_back(c);
  }
  return out;
}

}  // namespace rwre
