#pragma once

// Lattice geometry on Z^d: points, balls, intersected balls, outer
// boundaries, shells and the signed permutation group.

#include <algorithm>
#include <atomic>
#include <array>
#include <cmath>
#include <compare>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "rwre/errors.hpp"

namespace rwre {

inline constexpr int kMaxDim = 6;
inline constexpr std::size_t kDefaultCapacity = 5'000'000;

// Process-wide limit set by a running experiment; 0 means unset.
inline std::atomic<std::size_t>& capacity_override() {
  static std::atomic<std::size_t> v{0};
  return v;
}

// Interior-point limit; RWRE_CAPACITY overrides the default.
inline std::size_t default_capacity() {
  if (const auto o = capacity_override().load(); o > 0) return o;
  if (const char* v = std::getenv("RWRE_CAPACITY")) {
    try {
      return static_cast<std::size_t>(std::stoull(v));
    } catch (...) {
    }
  }
  return kDefaultCapacity;
}

class CapacityError : public Error {
 public:
  explicit CapacityError(const std::string& what) : Error(ErrorCode::capacity, what) {}
};

struct Point {
  std::array<std::int32_t, kMaxDim> c{};
  int dim = 0;

  Point() = default;
  explicit Point(int d) : dim(d) {
    if (d < 1 || d > kMaxDim) throw std::invalid_argument("dimension out of range");
  }
  Point(std::initializer_list<std::int32_t> coords) : dim(static_cast<int>(coords.size())) {
    if (dim < 1 || dim > kMaxDim) throw std::invalid_argument("dimension out of range");
    std::copy(coords.begin(), coords.end(), c.begin());
  }

  static Point zero(int d) { return Point(d); }
  static Point unit(int d, int axis, int sign = 1) {
    Point p(d);
    p.c[axis] = sign;
    return p;
  }

  std::int32_t& operator[](int i) { return c[i]; }
  std::int32_t operator[](int i) const { return c[i]; }

  // Exact squared Euclidean norm.
  std::int64_t norm2() const {
    std::int64_t s = 0;
    for (int i = 0; i < dim; ++i) s += std::int64_t{c[i]} * c[i];
    return s;
  }
  double norm() const { return std::sqrt(static_cast<double>(norm2())); }

  Point operator+(const Point& o) const {
    Point r = *this;
    for (int i = 0; i < dim; ++i) r.c[i] += o.c[i];
    return r;
  }
  Point operator-(const Point& o) const {
    Point r = *this;
    for (int i = 0; i < dim; ++i) r.c[i] -= o.c[i];
    return r;
  }
  Point operator-() const {
    Point r = *this;
    for (int i = 0; i < dim; ++i) r.c[i] = -r.c[i];
    return r;
  }

  bool operator==(const Point& o) const {
    if (dim != o.dim) return false;
    for (int i = 0; i < dim; ++i)
      if (c[i] != o.c[i]) return false;
    return true;
  }
  // Lexicographic order on coordinates.
  std::strong_ordering operator<=>(const Point& o) const {
    if (auto cmp = dim <=> o.dim; cmp != 0) return cmp;
    for (int i = 0; i < dim; ++i)
      if (auto cmp = c[i] <=> o.c[i]; cmp != 0) return cmp;
    return std::strong_ordering::equal;
  }

  std::string str() const {
    std::string s = "(";
    for (int i = 0; i < dim; ++i) {
      if (i) s += ",";
      s += std::to_string(c[i]);
    }
    return s + ")";
  }
};

struct PointHash {
  std::size_t operator()(const Point& p) const noexcept {
    std::uint64_t h = 0x9E3779B97F4A7C15ull * static_cast<std::uint64_t>(p.dim + 1);
    for (int i = 0; i < p.dim; ++i) {
      h ^= static_cast<std::uint64_t>(static_cast<std::uint32_t>(p.c[i])) + 0x9E3779B97F4A7C15ull +
           (h << 6) + (h >> 2);
    }
    return static_cast<std::size_t>(h);
  }
};

inline double dist(const Point& a, const Point& b) { return (a - b).norm(); }
inline std::int64_t dist2(const Point& a, const Point& b) { return (a - b).norm2(); }

// Direction index convention: 2*i is +e_i, 2*i+1 is -e_i.
inline Point direction(int d, int k) { return Point::unit(d, k / 2, (k % 2 == 0) ? 1 : -1); }

// Largest integer n with n <= L^2, i.e. the squared-norm threshold of V_L.
inline std::int64_t squared_threshold(double L) {
  if (L < 0) return -1;
  const long double v = static_cast<long double>(L) * static_cast<long double>(L);
  auto k = static_cast<std::int64_t>(std::floor(v));
  while (static_cast<long double>(k + 1) <= v) ++k;
  while (k >= 0 && static_cast<long double>(k) > v) --k;
  return k;
}

inline double d_L(const Point& x, double L) { return L - x.norm(); }

// Dense box index used by Domain for O(1) lookup.
class BoxIndex {
 public:
  BoxIndex() = default;
  BoxIndex(int dim, const std::array<std::int32_t, kMaxDim>& lo,
           const std::array<std::int32_t, kMaxDim>& hi)
      : dim_(dim), lo_(lo) {
    std::size_t total = 1;
    for (int i = 0; i < dim; ++i) {
      ext_[i] = static_cast<std::size_t>(hi[i] - lo[i] + 1);
      stride_[i] = total;
      total *= ext_[i];
    }
    if (total > 400'000'000ull) throw CapacityError("bounding box too large");
    slots_.assign(total, -1);
  }

  std::optional<std::size_t> slot(const Point& p) const {
    std::size_t s = 0;
    for (int i = 0; i < dim_; ++i) {
      const std::int64_t off = std::int64_t{p.c[i]} - lo_[i];
      if (off < 0 || off >= static_cast<std::int64_t>(ext_[i])) return std::nullopt;
      s += static_cast<std::size_t>(off) * stride_[i];
    }
    return s;
  }
  void set(const Point& p, std::int32_t v) { slots_[*slot(p)] = v; }
  std::int32_t get(const Point& p) const {
    auto s = slot(p);
    return s ? slots_[*s] : -1;
  }

 private:
  int dim_ = 0;
  std::array<std::int32_t, kMaxDim> lo_{};
  std::array<std::size_t, kMaxDim> ext_{};
  std::array<std::size_t, kMaxDim> stride_{};
  std::vector<std::int32_t> slots_;
};

enum class DomainKind { ball, intersected_ball, explicit_set };

// A finite set V of lattice points together with its outer boundary.
// Ordinals: interior points are 0..n_interior-1, boundary points follow.
class Domain {
 public:
  DomainKind kind() const { return kind_; }
  int dim() const { return dim_; }
  const Point& center() const { return center_; }
  std::int64_t radius2() const { return radius2_; }

  std::size_t n_interior() const { return interior_.size(); }
  std::size_t n_boundary() const { return boundary_.size(); }
  std::size_t size() const { return interior_.size() + boundary_.size(); }

  std::span<const Point> interior() const { return interior_; }
  std::span<const Point> boundary() const { return boundary_; }
  const Point& point(std::size_t ordinal) const {
    return ordinal < interior_.size() ? interior_[ordinal] : boundary_[ordinal - interior_.size()];
  }

  std::optional<std::size_t> find(const Point& p) const {
    const auto v = index_.get(p);
    if (v < 0) return std::nullopt;
    return static_cast<std::size_t>(v);
  }
  bool is_interior(const Point& p) const {
    auto i = find(p);
    return i && *i < interior_.size();
  }
  bool is_boundary(const Point& p) const {
    auto i = find(p);
    return i && *i >= interior_.size();
  }

  // V_L(center) = {x : |x - center| <= L}.
  static Domain ball(const Point& center, double L, std::size_t capacity = default_capacity()) {
    if (L < 0) throw std::invalid_argument("radius must be nonnegative");
    return ball_sq(center, squared_threshold(L), capacity);
  }

  // Ball given by an exact squared-radius threshold r2.
  static Domain ball_sq(const Point& center, std::int64_t r2, std::size_t capacity = default_capacity()) {
    if (r2 < 0) throw std::invalid_argument("squared radius must be nonnegative");
    const int d = center.dim;
    std::vector<Point> pts;
    const auto R = static_cast<std::int32_t>(std::floor(std::sqrt(static_cast<double>(r2)))) + 1;
    Point off(d);
    // Odometer over the cube [-R, R]^d, lexicographic.
    for (int i = 0; i < d; ++i) off.c[i] = -R;
    while (true) {
      if (off.norm2() <= r2) {
        pts.push_back(center + off);
        if (pts.size() > capacity) throw CapacityError("ball exceeds capacity limit");
      }
      int i = d - 1;
      while (i >= 0 && off.c[i] == R) {
        off.c[i] = -R;
        --i;
      }
      if (i < 0) break;
      ++off.c[i];
    }
    Domain dom = from_sorted_points(std::move(pts), d);
    dom.kind_ = DomainKind::ball;
    dom.center_ = center;
    dom.radius2_ = r2;
    return dom;
  }

  // V_t(center) ∩ outer, with t given by squared threshold.
  static Domain intersected_ball_sq(const Point& center, std::int64_t r2, const Domain& outer) {
    std::vector<Point> pts;
    for (const auto& p : outer.interior())
      if (dist2(p, center) <= r2) pts.push_back(p);
    Domain dom = from_sorted_points(std::move(pts), outer.dim());
    dom.kind_ = DomainKind::intersected_ball;
    dom.center_ = center;
    dom.radius2_ = r2;
    return dom;
  }
  static Domain intersected_ball(const Point& center, double t, const Domain& outer) {
    return intersected_ball_sq(center, squared_threshold(t), outer);
  }

  static Domain from_points(std::vector<Point> pts, int d) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    return from_sorted_points(std::move(pts), d);
  }

 private:
  static Domain from_sorted_points(std::vector<Point> pts, int d) {
    Domain dom;
    dom.kind_ = DomainKind::explicit_set;
    dom.dim_ = d;
    dom.center_ = Point(d);
    dom.interior_ = std::move(pts);
    std::array<std::int32_t, kMaxDim> lo{}, hi{};
    for (int i = 0; i < d; ++i) {
      lo[i] = std::numeric_limits<std::int32_t>::max();
      hi[i] = std::numeric_limits<std::int32_t>::min();
    }
    for (const auto& p : dom.interior_)
      for (int i = 0; i < d; ++i) {
        lo[i] = std::min(lo[i], p.c[i] - 1);
        hi[i] = std::max(hi[i], p.c[i] + 1);
      }
    if (dom.interior_.empty())
      for (int i = 0; i < d; ++i) lo[i] = hi[i] = 0;
    dom.index_ = BoxIndex(d, lo, hi);
    for (std::size_t i = 0; i < dom.interior_.size(); ++i)
      dom.index_.set(dom.interior_[i], static_cast<std::int32_t>(i));
    std::vector<Point> bd;
    for (const auto& p : dom.interior_)
      for (int k = 0; k < 2 * d; ++k) {
        Point q = p + direction(d, k);
        if (dom.index_.get(q) < 0) {
          dom.index_.set(q, -2);  // mark, assigned below
          bd.push_back(q);
        }
      }
    std::sort(bd.begin(), bd.end());
    dom.boundary_ = std::move(bd);
    const auto n = static_cast<std::int32_t>(dom.interior_.size());
    for (std::size_t i = 0; i < dom.boundary_.size(); ++i)
      dom.index_.set(dom.boundary_[i], n + static_cast<std::int32_t>(i));
    return dom;
  }

  DomainKind kind_ = DomainKind::explicit_set;
  int dim_ = 0;
  Point center_;
  std::int64_t radius2_ = -1;
  std::vector<Point> interior_;
  std::vector<Point> boundary_;
  BoxIndex index_;
};

using DomainPtr = std::shared_ptr<const Domain>;

inline DomainPtr make_ball(const Point& center, double L, std::size_t capacity = default_capacity()) {
  return std::make_shared<const Domain>(Domain::ball(center, L, capacity));
}

inline Domain enumerate_ball(const Point& center, double L, std::size_t capacity = default_capacity()) {
  return Domain::ball(center, L, capacity);
}

struct ShellSpec {
  double a = 0;
  double b = 1;
  double L = 1;
};

// Sh_L(a,b) = {x in V_L : a <= d_L(x) < b}, ball centered at the origin.
inline std::vector<Point> shell_points(const ShellSpec& spec, int d) {
  if (!(spec.a >= 0 && spec.b > spec.a)) throw std::invalid_argument("shell requires 0 <= a < b");
  const Domain ball = Domain::ball(Point::zero(d), spec.L);
  std::vector<Point> out;
  for (const auto& p : ball.interior()) {
    const double dl = d_L(p, spec.L);
    if (dl >= spec.a && dl < spec.b) out.push_back(p);
  }
  return out;
}

// Element of the signed permutation group acting on Z^d:
// (O x)_i = sign[i] * x[perm[i]].
struct SignedPermutation {
  std::array<int, kMaxDim> perm{};
  std::array<int, kMaxDim> sign{};
  int dim = 0;

  static SignedPermutation identity(int d) {
    SignedPermutation g;
    g.dim = d;
    for (int i = 0; i < d; ++i) {
      g.perm[i] = i;
      g.sign[i] = 1;
    }
    return g;
  }
  static SignedPermutation transposition(int d, int i, int j) {
    auto g = identity(d);
    std::swap(g.perm[i], g.perm[j]);
    return g;
  }
  static SignedPermutation flip(int d, int i) {
    auto g = identity(d);
    g.sign[i] = -1;
    return g;
  }

  Point apply(const Point& x) const {
    Point y(x.dim);
    for (int i = 0; i < dim; ++i) y.c[i] = sign[i] * x.c[perm[i]];
    return y;
  }
  // Image of direction index k (see direction()).
  int apply_direction(int k) const {
    const Point e = direction(dim, k);
    const Point f = apply(e);
    for (int i = 0; i < dim; ++i)
      if (f.c[i] != 0) return 2 * i + (f.c[i] > 0 ? 0 : 1);
    return k;
  }
};

// All 2^d d! group elements.
inline std::vector<SignedPermutation> signed_permutation_group(int d) {
  std::vector<SignedPermutation> out;
  std::array<int, kMaxDim> perm{};
  for (int i = 0; i < d; ++i) perm[i] = i;
  do {
    for (unsigned mask = 0; mask < (1u << d); ++mask) {
      SignedPermutation g;
      g.dim = d;
      g.perm = perm;
      for (int i = 0; i < d; ++i) g.sign[i] = (mask >> i & 1u) ? -1 : 1;
      out.push_back(g);
    }
  } while (std::next_permutation(perm.begin(), perm.begin() + d));
  return out;
}

// Generators: the transpositions (i j), i<j, and the d coordinate flips.
inline std::vector<SignedPermutation> signed_permutation_generators(int d) {
  std::vector<SignedPermutation> out;
  for (int i = 0; i < d; ++i)
    for (int j = i + 1; j < d; ++j) out.push_back(SignedPermutation::transposition(d, i, j));
  for (int i = 0; i < d; ++i) out.push_back(SignedPermutation::flip(d, i));
  return out;
}

// Canonical orbit representative: absolute values sorted descending.
inline Point orbit_representative(const Point& x) {
  Point r = x;
  for (int i = 0; i < x.dim; ++i) r.c[i] = std::abs(r.c[i]);
  std::sort(r.c.begin(), r.c.begin() + x.dim, std::greater<>());
  return r;
}

// A group element g with g(orbit_representative(x)) == x.
inline SignedPermutation map_from_representative(const Point& x) {
  const int d = x.dim;
  std::array<int, kMaxDim> order{};
  for (int i = 0; i < d; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.begin() + d,
                   [&](int a, int b) { return std::abs(x.c[a]) > std::abs(x.c[b]); });
  // rep[k] = |x[order[k]]|; want (g rep)_i = x_i, so perm[order[k]] = k.
  SignedPermutation g;
  g.dim = d;
  for (int k = 0; k < d; ++k) {
    const int i = order[k];
    g.perm[i] = k;
    g.sign[i] = x.c[i] < 0 ? -1 : 1;
  }
  return g;
}

// Volume of the unit ball in R^d.
inline double unit_ball_volume(int d) {
  return std::pow(std::acos(-1.0), d / 2.0) / std::tgamma(d / 2.0 + 1.0);
}

}  // namespace rwre
