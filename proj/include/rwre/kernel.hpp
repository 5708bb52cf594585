#pragma once

// Transition kernels on a Domain. Rows are indexed by interior ordinals,
// columns by domain ordinals (interior then boundary).

#include <Eigen/SparseCore>

#include <cmath>
#include <fstream>
#include <memory>
#include <set>
#include <string>
#include <unordered_set>
#include <vector>

#include "rwre/environment.hpp"
#include "rwre/errors.hpp"
#include "rwre/lattice.hpp"

namespace rwre {

using SpMat = Eigen::SparseMatrix<double, Eigen::RowMajor>;
using Triplet = Eigen::Triplet<double>;

struct Kernel {
  DomainPtr domain;
  SpMat P;  // n_interior x size

  std::size_t n_interior() const { return domain->n_interior(); }
  std::size_t size() const { return domain->size(); }

  double row_sum(std::size_t i) const {
    double s = 0;
    for (SpMat::InnerIterator it(P, static_cast<Eigen::Index>(i)); it; ++it) s += it.value();
    return s;
  }
  double max_row_sum_deviation() const {
    double m = 0;
    for (std::size_t i = 0; i < n_interior(); ++i) m = std::max(m, std::abs(row_sum(i) - 1.0));
    return m;
  }
  bool stochastic(double tol = 1e-12) const { return max_row_sum_deviation() <= tol; }

  // Row of x as (ordinal, probability) pairs.
  std::vector<std::pair<std::size_t, double>> row(std::size_t i) const {
    std::vector<std::pair<std::size_t, double>> r;
    for (SpMat::InnerIterator it(P, static_cast<Eigen::Index>(i)); it; ++it)
      r.emplace_back(static_cast<std::size_t>(it.col()), it.value());
    return r;
  }
  double entry(const Point& x, const Point& y) const {
    auto i = domain->find(x);
    auto j = domain->find(y);
    if (!i || !j || *i >= n_interior()) return 0.0;
    return P.coeff(static_cast<Eigen::Index>(*i), static_cast<Eigen::Index>(*j));
  }
  double nnz_per_row() const {
    return n_interior() ? static_cast<double>(P.nonZeros()) / static_cast<double>(n_interior()) : 0.0;
  }
};

// Nearest-neighbour kernel from a site-law function.
template <class LawFn>
Kernel nearest_neighbor_kernel(DomainPtr dom, LawFn&& law) {
  const int d = dom->dim();
  const std::size_t n = dom->n_interior();
  std::vector<Triplet> trips;
  trips.reserve(n * 2 * static_cast<std::size_t>(d));
  for (std::size_t i = 0; i < n; ++i) {
    const Point& x = dom->point(i);
    const SiteLaw q = law(x);
    for (int k = 0; k < 2 * d; ++k) {
      const auto j = dom->find(x + direction(d, k));
      trips.emplace_back(static_cast<int>(i), static_cast<int>(*j), q.p[k]);
    }
  }
  Kernel K{dom, SpMat(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(dom->size()))};
  K.P.setFromTriplets(trips.begin(), trips.end());
  K.P.makeCompressed();
  return K;
}

inline Kernel srw_kernel(DomainPtr dom) {
  const int d = dom->dim();
  return nearest_neighbor_kernel(std::move(dom), [d](const Point&) { return SiteLaw::uniform(d); });
}

inline Kernel rwre_kernel(const Environment& env, DomainPtr dom) {
  if (env.dim() != dom->dim()) throw Error(ErrorCode::domain_violation, "environment dimension mismatch");
  return nearest_neighbor_kernel(std::move(dom), [&env](const Point& x) { return env.law(x); });
}

// Rows at `bad` replaced by the rows of cg_srw.
inline Kernel goodify(const Kernel& cg_rwre, const Kernel& cg_srw, const std::vector<Point>& bad) {
  if (cg_rwre.domain.get() != cg_srw.domain.get() && cg_rwre.size() != cg_srw.size())
    throw Error(ErrorCode::domain_violation, "goodify needs kernels on one domain");
  std::unordered_set<std::size_t> badset;
  for (const auto& x : bad) {
    auto i = cg_rwre.domain->find(x);
    if (i && *i < cg_rwre.n_interior()) badset.insert(*i);
  }
  std::vector<Triplet> trips;
  trips.reserve(static_cast<std::size_t>(cg_rwre.P.nonZeros()));
  for (std::size_t i = 0; i < cg_rwre.n_interior(); ++i) {
    const SpMat& src = badset.count(i) ? cg_srw.P : cg_rwre.P;
    for (SpMat::InnerIterator it(src, static_cast<Eigen::Index>(i)); it; ++it)
      trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), it.value());
  }
  Kernel K{cg_rwre.domain, SpMat(cg_rwre.P.rows(), cg_rwre.P.cols())};
  K.P.setFromTriplets(trips.begin(), trips.end());
  K.P.makeCompressed();
  return K;
}

// Diagnostic sparse-triplet dump: x_index,y_index,prob
inline void dump_csv(const Kernel& K, const std::string& path) {
  std::ofstream f(path);
  if (!f) throw Error(ErrorCode::config_invalid, "cannot open '" + path + "'");
  f << "x_index,y_index,prob\n";
  f.precision(17);
  for (std::size_t i = 0; i < K.n_interior(); ++i)
    for (SpMat::InnerIterator it(K.P, static_cast<Eigen::Index>(i)); it; ++it)
      f << i << ',' << it.col() << ',' << it.value() << '\n';
}

}  // namespace rwre
