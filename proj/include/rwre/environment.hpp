#pragma once

// I.i.d. random environments on Z^d and the isotropy check.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "rwre/errors.hpp"
#include "rwre/lattice.hpp"
#include "rwre/rng.hpp"

namespace rwre {

// Direction probabilities ordered (+e_1, -e_1, ..., +e_d, -e_d).
struct SiteLaw {
  std::array<double, 2 * kMaxDim> p{};
  int dim = 0;

  static SiteLaw uniform(int d) {
    SiteLaw s;
    s.dim = d;
    for (int k = 0; k < 2 * d; ++k) s.p[k] = 1.0 / (2 * d);
    return s;
  }
  double operator[](int k) const { return p[k]; }
  double& operator[](int k) { return p[k]; }
  int n() const { return 2 * dim; }

  double sum() const {
    double s = 0;
    for (int k = 0; k < n(); ++k) s += p[k];
    return s;
  }
  // max_e |p(e) - 1/(2d)|
  double deviation() const {
    double m = 0;
    for (int k = 0; k < n(); ++k) m = std::max(m, std::abs(p[k] - 1.0 / (2 * dim)));
    return m;
  }
  bool valid(double eps, double tol = 1e-14) const {
    for (int k = 0; k < n(); ++k)
      if (p[k] < 0) return false;
    return std::abs(sum() - 1.0) <= tol && deviation() <= eps + tol;
  }
  // Law of the image walk: (g.q)(g e) = q(e).
  SiteLaw transformed(const SignedPermutation& g) const {
    SiteLaw r;
    r.dim = dim;
    for (int k = 0; k < n(); ++k) r.p[g.apply_direction(k)] = p[k];
    return r;
  }
  bool operator==(const SiteLaw& o) const {
    if (dim != o.dim) return false;
    for (int k = 0; k < n(); ++k)
      if (p[k] != o.p[k]) return false;
    return true;
  }
};

enum class Family : std::uint8_t { srw = 0, isotropic_tilt = 1, balanced_axis = 2, symmetric_balanced = 3 };

inline const char* family_name(Family f) {
  switch (f) {
    case Family::srw: return "srw";
    case Family::isotropic_tilt: return "isotropic_tilt";
    case Family::balanced_axis: return "balanced_axis";
    case Family::symmetric_balanced: return "symmetric_balanced";
  }
  return "?";
}

inline Family parse_family(const std::string& s) {
  if (s == "srw") return Family::srw;
  if (s == "isotropic_tilt") return Family::isotropic_tilt;
  if (s == "balanced_axis") return Family::balanced_axis;
  if (s == "symmetric_balanced") return Family::symmetric_balanced;
  throw Error(ErrorCode::config_invalid, "unknown family '" + s + "'");
}

struct FamilySpec {
  Family family = Family::srw;
  int dim = 3;
  double epsilon = 0.0;
  int axis = 0;  // balanced_axis only: the balanced direction e_{axis+1}

  void validate() const {
    if (dim < 1 || dim > kMaxDim) throw Error(ErrorCode::config_invalid, "dimension out of range");
    if (!(epsilon >= 0) || epsilon >= 1.0 / (2 * dim))
      throw Error(ErrorCode::invalid_epsilon, "epsilon must lie in [0, 1/(2d))");
    if (family == Family::balanced_axis && (axis < 0 || axis >= dim))
      throw Error(ErrorCode::config_invalid, "balanced axis out of range");
  }
};

// One site law drawn from the family using the stream `rng`.
//
// Perturbations u are drawn uniform in [-eps/2, eps/2] and centred to zero
// sum, so |q(e) - 1/(2d)| <= eps holds exactly.
inline SiteLaw draw_site_law(const FamilySpec& spec, CounterRng& rng) {
  const int d = spec.dim;
  const int n = 2 * d;
  SiteLaw q = SiteLaw::uniform(d);
  if (spec.family == Family::srw || spec.epsilon == 0.0) return q;
  const double half = spec.epsilon / 2;
  std::array<double, 2 * kMaxDim> u{};

  if (spec.family == Family::symmetric_balanced) {
    std::array<double, kMaxDim> v{};
    double mean = 0;
    for (int i = 0; i < d; ++i) mean += (v[i] = rng.uniform(-half, half));
    mean /= d;
    // random axis permutation keeps the law exchange invariant
    std::array<int, kMaxDim> perm{};
    std::iota(perm.begin(), perm.begin() + d, 0);
    for (int i = d - 1; i > 0; --i) std::swap(perm[i], perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    for (int i = 0; i < d; ++i) u[2 * perm[i]] = u[2 * perm[i] + 1] = v[i] - mean;
  } else {
    double mean = 0;
    for (int k = 0; k < n; ++k) mean += (u[k] = rng.uniform(-half, half));
    mean /= n;
    for (int k = 0; k < n; ++k) u[k] -= mean;
    if (spec.family == Family::balanced_axis) {
      const double a = 0.5 * (u[2 * spec.axis] + u[2 * spec.axis + 1]);
      u[2 * spec.axis] = u[2 * spec.axis + 1] = a;
    }
  }
  for (int k = 0; k < n; ++k) q.p[k] += u[k];

  if (spec.family == Family::isotropic_tilt) {
    // uniform element of the signed permutation group
    SignedPermutation g = SignedPermutation::identity(d);
    for (int i = d - 1; i > 0; --i) std::swap(g.perm[i], g.perm[rng.below(static_cast<std::uint64_t>(i) + 1)]);
    for (int i = 0; i < d; ++i) g.sign[i] = (rng() >> 63) ? -1 : 1;
    q = q.transformed(g);
  }
  // renormalise so the row sums to one to rounding
  double s = q.sum();
  for (int k = 0; k < n; ++k) q.p[k] /= s;
  return q;
}

// A quenched environment: a pure function of (spec, seed, point), with
// optional per-site overrides for constructed test cases.
class Environment {
 public:
  Environment() = default;
  Environment(FamilySpec spec, std::uint64_t seed) : spec_(spec), seed_(seed) { spec_.validate(); }

  const FamilySpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }
  int dim() const { return spec_.dim; }
  double epsilon() const { return spec_.epsilon; }

  SiteLaw law(const Point& x) const {
    if (!overrides_.empty()) {
      auto it = overrides_.find(x);
      if (it != overrides_.end()) return it->second;
    }
    if (spec_.family == Family::srw || spec_.epsilon == 0.0) return SiteLaw::uniform(spec_.dim);
    CounterRng rng(site_key(x));
    return draw_site_law(spec_, rng);
  }

  // Replace the law at x. The override must itself satisfy A0(eps).
  void set_override(const Point& x, const SiteLaw& q) {
    if (!q.valid(spec_.epsilon, 1e-12))
      throw Error(ErrorCode::invalid_epsilon, "override law violates the ellipticity bound");
    overrides_[x] = q;
  }
  const std::map<Point, SiteLaw>& overrides() const { return overrides_; }

  bool is_srw() const {
    return overrides_.empty() && (spec_.family == Family::srw || spec_.epsilon == 0.0);
  }

 private:
  std::uint64_t site_key(const Point& x) const {
    std::uint64_t h = hash_words({seed_, static_cast<std::uint64_t>(spec_.family),
                                  static_cast<std::uint64_t>(x.dim)});
    for (int i = 0; i < x.dim; ++i) h = splitmix64(h ^ static_cast<std::uint64_t>(static_cast<std::int64_t>(x.c[i])));
    return h;
  }

  FamilySpec spec_;
  std::uint64_t seed_ = 0;
  std::map<Point, SiteLaw> overrides_;
};

using EnvironmentPtr = std::shared_ptr<const Environment>;

inline Environment sample_environment(const FamilySpec& spec, std::uint64_t seed) {
  return Environment(spec, seed);
}

// A law at the corner of the ellipticity box: maximal drift towards +e_1.
inline SiteLaw corner_law(int d, double eps) {
  SiteLaw q = SiteLaw::uniform(d);
  q.p[0] += eps;
  q.p[1] -= eps;
  return q;
}

// ---------------------------------------------------------------------------
// Isotropy check

struct IsotropyEntry {
  std::string generator;
  double distance = 0;
  double threshold = 0;
};

struct IsotropyReport {
  std::vector<IsotropyEntry> entries;
  double max_distance = 0;
  bool passed = true;  // every distance below its 99% threshold
};

namespace detail {

// Feature vector of a law: the 2d probabilities and the d axis differences.
inline std::vector<double> isotropy_features(const SiteLaw& q) {
  std::vector<double> f(q.p.begin(), q.p.begin() + q.n());
  for (int i = 0; i < q.dim; ++i) f.push_back(q.p[2 * i] - q.p[2 * i + 1]);
  return f;
}

// Max over features of the two-sample Kolmogorov-Smirnov statistic, with
// ties handled by advancing through equal values together. `order[f]` is the
// pooled index order sorted by feature f; `label[i]` is 0 or 1.
inline double ks_max(const std::vector<std::vector<double>>& pooled,
                     const std::vector<std::vector<std::size_t>>& order,
                     const std::vector<std::uint8_t>& label, std::size_t n0, std::size_t n1) {
  double best = 0;
  for (std::size_t f = 0; f < order.size(); ++f) {
    const auto& ord = order[f];
    const auto& v = pooled[f];
    std::size_t c0 = 0, c1 = 0;
    std::size_t i = 0;
    while (i < ord.size()) {
      const double val = v[ord[i]];
      while (i < ord.size() && v[ord[i]] == val) {
        (label[ord[i]] ? c1 : c0)++;
        ++i;
      }
      best = std::max(best, std::abs(static_cast<double>(c0) / n0 - static_cast<double>(c1) / n1));
    }
  }
  return best;
}

}  // namespace detail

// For every generator O of the signed permutation group, compare the law of
// (w(Oe))_e on one half of the sample with (w(e))_e on the other half. The
// threshold is the 99% quantile of a 99-fold label permutation test.
inline IsotropyReport check_isotropy(const FamilySpec& spec, std::size_t n_samples, std::uint64_t seed) {
  if (n_samples < 1) throw Error(ErrorCode::config_invalid, "n_samples must be >= 1");
  spec.validate();
  const int d = spec.dim;
  std::vector<SiteLaw> laws(n_samples);
  for (std::size_t i = 0; i < n_samples; ++i) {
    CounterRng rng(seed, 0x1507ull * (i + 1));
    laws[i] = draw_site_law(spec, rng);
  }
  const std::size_t n0 = std::max<std::size_t>(1, n_samples / 2);
  const std::size_t n1 = std::max<std::size_t>(1, n_samples - n0);

  IsotropyReport rep;
  auto gens = signed_permutation_generators(d);
  for (std::size_t gi = 0; gi < gens.size(); ++gi) {
    const auto& g = gens[gi];
    // pooled sample: first half transformed, second half as is
    const std::size_t nf = 3 * static_cast<std::size_t>(d);
    std::vector<std::vector<double>> pooled(nf, std::vector<double>(n0 + n1));
    std::vector<std::uint8_t> label(n0 + n1);
    for (std::size_t i = 0; i < n0 + n1; ++i) {
      const SiteLaw& src = laws[std::min(i, n_samples - 1)];
      // (w(Oe))_e: feature of the law composed with O
      SiteLaw q = src;
      if (i < n0) {
        for (int k = 0; k < 2 * d; ++k) q.p[k] = src.p[g.apply_direction(k)];
      }
      auto f = detail::isotropy_features(q);
      for (std::size_t j = 0; j < nf; ++j) pooled[j][i] = f[j];
      label[i] = i < n0 ? 0 : 1;
    }
    std::vector<std::vector<std::size_t>> order(nf);
    for (std::size_t j = 0; j < nf; ++j) {
      order[j].resize(n0 + n1);
      std::iota(order[j].begin(), order[j].end(), 0);
      std::stable_sort(order[j].begin(), order[j].end(),
                       [&](std::size_t a, std::size_t b) { return pooled[j][a] < pooled[j][b]; });
    }
    const double stat = detail::ks_max(pooled, order, label, n0, n1);
    std::vector<double> perm_stats;
    CounterRng prng(seed, 0xAB00ull + gi);
    std::vector<std::uint8_t> pl = label;
    for (int r = 0; r < 99; ++r) {
      for (std::size_t i = pl.size() - 1; i > 0; --i) std::swap(pl[i], pl[prng.below(i + 1)]);
      perm_stats.push_back(detail::ks_max(pooled, order, pl, n0, n1));
    }
    std::sort(perm_stats.begin(), perm_stats.end());
    // with 99 permutations the largest one is the 99% point
    const double thr = perm_stats.back();
    std::string name;
    bool is_flip = true;
    for (int i = 0; i < d; ++i)
      if (g.perm[i] != i) is_flip = false;
    if (is_flip) {
      for (int i = 0; i < d; ++i)
        if (g.sign[i] < 0) name = "flip(" + std::to_string(i + 1) + ")";
    } else {
      int a = -1, b = -1;
      for (int i = 0; i < d; ++i)
        if (g.perm[i] != i) (a < 0 ? a : b) = i;
      name = "swap(" + std::to_string(a + 1) + "," + std::to_string(b + 1) + ")";
    }
    rep.entries.push_back({name, stat, thr});
    rep.max_distance = std::max(rep.max_distance, stat);
    if (stat > thr) rep.passed = false;
  }
  return rep;
}

}  // namespace rwre
