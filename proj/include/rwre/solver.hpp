#pragma once

// Green's functions, exit measures and mean exit times on finite domains,
// plus the perturbation expansion diagnostics.

#include <Eigen/Dense>
#include <Eigen/IterativeLinearSolvers>
#include <Eigen/SparseLU>

#include <cmath>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <vector>

#include "rwre/errors.hpp"
#include "rwre/kernel.hpp"
#include "rwre/lattice.hpp"

namespace rwre {

using SpMatC = Eigen::SparseMatrix<double, Eigen::ColMajor>;
using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

enum class SolverMethod { automatic, direct, iterative };

struct SolverOptions {
  SolverMethod method = SolverMethod::automatic;
  double tolerance = 1e-13;  // relative residual for the iterative path
  double accept = 1e-10;     // max |(I-P)x - b| accepted on any solve
  int max_iterations = 5000;
};

struct ExitMeasure {
  Point source;
  DomainPtr domain;
  std::vector<double> weights;  // indexed by boundary position (ordinal - n_interior)

  double total() const {
    double s = 0;
    for (double w : weights) s += w;
    return s;
  }
  double at(const Point& z) const {
    auto i = domain->find(z);
    if (!i || *i < domain->n_interior()) return 0.0;
    return weights[*i - domain->n_interior()];
  }
  const Point& point(std::size_t k) const { return domain->boundary()[k]; }
};

// Factorisation of (I - 1_V P) on the interior states of a kernel.
class GreenOperator {
 public:
  explicit GreenOperator(const Kernel& K, SolverOptions opt = {}) : K_(K), opt_(opt) {
    const auto n = static_cast<Eigen::Index>(K.n_interior());
    if (n == 0) return;
    std::vector<Eigen::Triplet<double>> trips;
    trips.reserve(static_cast<std::size_t>(K.P.nonZeros()) + static_cast<std::size_t>(n));
    for (Eigen::Index i = 0; i < n; ++i) {
      trips.emplace_back(static_cast<int>(i), static_cast<int>(i), 1.0);
      for (SpMat::InnerIterator it(K.P, i); it; ++it)
        if (it.col() < n) trips.emplace_back(static_cast<int>(i), static_cast<int>(it.col()), -it.value());
    }
    A_.resize(n, n);
    A_.setFromTriplets(trips.begin(), trips.end());
    A_.makeCompressed();
    check_leakage();
    if (opt_.method == SolverMethod::automatic)
      direct_ = n <= 200000 && !(K.nnz_per_row() > 40 && n > 1500);
    else
      direct_ = opt_.method == SolverMethod::direct;
  }

  const Kernel& kernel() const { return K_; }
  const Domain& domain() const { return *K_.domain; }
  std::size_t n() const { return K_.n_interior(); }
  bool direct() const { return direct_; }

  // x = G b
  Vec solve(const Vec& b) const { return solve_impl(b, false); }
  // x = G^T b
  Vec solve_transpose(const Vec& b) const { return solve_impl(b, true); }

  // G(x, .) on the interior
  Vec green_row(std::size_t i) const {
    Vec e = Vec::Zero(static_cast<Eigen::Index>(n()));
    e[static_cast<Eigen::Index>(i)] = 1.0;
    return solve_transpose(e);
  }
  // G(., y) on the interior
  Vec green_column(std::size_t j) const {
    Vec e = Vec::Zero(static_cast<Eigen::Index>(n()));
    e[static_cast<Eigen::Index>(j)] = 1.0;
    return solve(e);
  }
  double green(const Point& x, const Point& y) const {
    auto i = domain().find(x), j = domain().find(y);
    if (!i || !j) return 0.0;
    if (*i >= n()) return *i == *j ? 1.0 : 0.0;  // g(x,.) = delta_x off V
    if (*j >= n()) return exit_from_row(green_row(*i), x).weights[*j - n()];
    return green_row(*i)[static_cast<Eigen::Index>(*j)];
  }

  ExitMeasure exit_from_row(const Vec& u, const Point& x) const {
    ExitMeasure ex{x, K_.domain, std::vector<double>(domain().n_boundary(), 0.0)};
    const auto nn = static_cast<Eigen::Index>(n());
    for (Eigen::Index y = 0; y < nn; ++y) {
      if (u[y] == 0.0) continue;
      for (SpMat::InnerIterator it(K_.P, y); it; ++it)
        if (it.col() >= nn) ex.weights[static_cast<std::size_t>(it.col() - nn)] += u[y] * it.value();
    }
    return ex;
  }

  ExitMeasure exit_measure(const Point& x) const {
    auto i = domain().find(x);
    if (!i) throw Error(ErrorCode::domain_violation, "exit_measure source outside domain closure " + x.str());
    if (*i >= n()) {
      ExitMeasure ex{x, K_.domain, std::vector<double>(domain().n_boundary(), 0.0)};
      ex.weights[*i - n()] = 1.0;
      return ex;
    }
    return exit_from_row(green_row(*i), x);
  }

  // Sum_y G(x,y) holding(y); unit holding when `holding` is empty.
  double mean_exit_time(const Point& x, const Vec& holding = Vec()) const {
    auto i = domain().find(x);
    if (!i || *i >= n()) return 0.0;
    return mean_exit_times(holding)[static_cast<Eigen::Index>(*i)];
  }
  Vec mean_exit_times(const Vec& holding = Vec()) const {
    if (n() == 0) return Vec();
    Vec h = holding.size() ? holding : Vec::Ones(static_cast<Eigen::Index>(n()));
    return solve(h);
  }

  // Dense G for small domains.
  Mat dense() const {
    const auto nn = static_cast<Eigen::Index>(n());
    Mat G(nn, nn);
    for (Eigen::Index j = 0; j < nn; ++j) G.col(j) = green_column(static_cast<std::size_t>(j));
    return G;
  }

  // max |(I - P) x - b|
  double residual(const Vec& x, const Vec& b, bool transpose = false) const {
    Vec r = transpose ? Vec(A_.transpose() * x - b) : Vec(A_ * x - b);
    return r.size() ? r.cwiseAbs().maxCoeff() : 0.0;
  }

 private:
  void check_leakage() const {
    // Every interior state must reach a state with mass leaving V.
    const auto nn = static_cast<Eigen::Index>(n());
    std::vector<std::vector<Eigen::Index>> pred(static_cast<std::size_t>(nn));
    std::vector<char> ok(static_cast<std::size_t>(nn), 0);
    std::deque<Eigen::Index> q;
    for (Eigen::Index i = 0; i < nn; ++i) {
      double inside = 0;
      for (SpMat::InnerIterator it(K_.P, i); it; ++it)
        if (it.col() < nn) {
          inside += it.value();
          if (it.value() > 0) pred[static_cast<std::size_t>(it.col())].push_back(i);
        }
      if (inside < 1.0 - 1e-15) {
        ok[static_cast<std::size_t>(i)] = 1;
        q.push_back(i);
      }
    }
    while (!q.empty()) {
      auto j = q.front();
      q.pop_front();
      for (auto i : pred[static_cast<std::size_t>(j)])
        if (!ok[static_cast<std::size_t>(i)]) {
          ok[static_cast<std::size_t>(i)] = 1;
          q.push_back(i);
        }
    }
    for (Eigen::Index i = 0; i < nn; ++i)
      if (!ok[static_cast<std::size_t>(i)])
        throw Error(ErrorCode::singular_system, "chain cannot leave the domain from state " + std::to_string(i));
  }

  void factor_direct(bool transpose) const {
    std::lock_guard<std::mutex> lock(*mu_);
    auto& lu = transpose ? lut_ : lu_;
    if (lu) return;
    lu = std::make_unique<Eigen::SparseLU<SpMatC>>();
    SpMatC M = transpose ? SpMatC(A_.transpose()) : A_;
    lu->analyzePattern(M);
    lu->factorize(M);
    if (lu->info() != Eigen::Success)
      throw Error(ErrorCode::singular_system, "sparse LU factorisation failed: " + lu->lastErrorMessage());
  }

  Vec solve_direct(const Vec& b, bool transpose) const {
    factor_direct(transpose);
    auto& lu = transpose ? lut_ : lu_;
    Vec x = lu->solve(b);
    if (lu->info() != Eigen::Success) throw Error(ErrorCode::solver_failure, "sparse LU solve failed");
    return x;
  }

  Vec solve_impl(const Vec& b, bool transpose) const {
    if (n() == 0) return Vec();
    Vec x;
    if (direct_) {
      x = solve_direct(b, transpose);
    } else {
      auto& it = transpose ? itt_ : it_;
      std::unique_lock<std::mutex> lock(*mu_);
      if (!it) {
        it = std::make_unique<Eigen::BiCGSTAB<SpMatC>>();
        it->setTolerance(opt_.tolerance);
        it->setMaxIterations(opt_.max_iterations);
        if (transpose) {
          At_ = A_.transpose();
          it->compute(At_);
        } else {
          it->compute(A_);
        }
      }
      lock.unlock();
      x = it->solve(b);
      if (it->info() != Eigen::Success || residual(x, b, transpose) > opt_.accept) {
        // escalate to the direct path
        x = solve_direct(b, transpose);
        lock.lock();
        direct_ = true;
      }
    }
    const double res = residual(x, b, transpose);
    if (!(res <= opt_.accept))
      throw Error(ErrorCode::solver_failure, "linear solve residual " + std::to_string(res) + " above tolerance");
    return x;
  }

  Kernel K_;
  SolverOptions opt_;
  SpMatC A_;
  mutable SpMatC At_;
  mutable bool direct_ = true;
  std::unique_ptr<std::mutex> mu_ = std::make_unique<std::mutex>();
  mutable std::unique_ptr<Eigen::SparseLU<SpMatC>> lu_, lut_;
  mutable std::unique_ptr<Eigen::BiCGSTAB<SpMatC>> it_, itt_;
};

inline GreenOperator green(const Kernel& K, SolverOptions opt = {}) { return GreenOperator(K, opt); }

inline ExitMeasure exit_measure(const Kernel& K, const Point& x) { return GreenOperator(K).exit_measure(x); }

inline double mean_exit_time(const Kernel& K, const Point& x, const Vec& holding = Vec()) {
  return GreenOperator(K).mean_exit_time(x, holding);
}

// E_x[tau^k] for k in {1,2}; E tau^2 = sum_y G(x,y) (2 E_y tau - 1).
inline double quenched_moment(const GreenOperator& G, const Point& x, int k) {
  if (k != 1 && k != 2) throw Error(ErrorCode::config_invalid, "quenched_moment supports k = 1, 2");
  auto i = G.domain().find(x);
  if (!i || *i >= G.n()) return 0.0;
  const Vec m1 = G.mean_exit_times();
  if (k == 1) return m1[static_cast<Eigen::Index>(*i)];
  const Vec m2 = G.solve(2.0 * m1 - Vec::Ones(m1.size()));
  return m2[static_cast<Eigen::Index>(*i)];
}

// ---------------------------------------------------------------------------
// Perturbation expansion, dense. p and P are the restricted kernels 1_V p
// and 1_V P as square matrices on the interior; Delta = P - p.

struct PerturbationReport {
  Mat truncation;                     // sum_{k=1}^K (g Delta)^k g
  std::vector<double> term_norms;     // ||(g Delta)^k g||_inf, k = 1..K
  std::vector<double> pbe3_residuals; // ||G - g sum_{m<=M} (Rg)^m S||_inf, M = 0..K
  double resolvent_left = 0;          // ||G - g - g Delta G||_inf
  double resolvent_right = 0;         // ||G - g - G Delta g||_inf
  double series_residual = 0;         // ||G - g - truncation||_inf
  double contraction = 0;             // ||g Delta||_inf
  bool diverged = false;
};

inline double inf_norm(const Mat& M) { return M.size() ? M.cwiseAbs().rowwise().sum().maxCoeff() : 0.0; }

inline PerturbationReport perturbation_truncation(const Mat& p, const Mat& P, int K) {
  if (p.rows() != p.cols() || P.rows() != p.rows() || P.cols() != p.cols())
    throw Error(ErrorCode::domain_violation, "perturbation kernels must be square and equal size");
  if (K < 0) throw Error(ErrorCode::config_invalid, "truncation order must be nonnegative");
  const auto n = p.rows();
  const Mat I = Mat::Identity(n, n);
  const Mat D = P - p;
  Eigen::PartialPivLU<Mat> lug(I - p), luG(I - P);
  const Mat g = lug.solve(I);
  const Mat G = luG.solve(I);
  if (!g.allFinite() || !G.allFinite()) throw Error(ErrorCode::singular_system, "perturbation kernels not solvable");

  PerturbationReport r;
  r.resolvent_left = inf_norm(G - g - g * D * G);
  r.resolvent_right = inf_norm(G - g - G * D * g);
  const Mat gD = g * D;
  r.contraction = inf_norm(gD);

  r.truncation = Mat::Zero(n, n);
  Mat term = g;
  for (int k = 1; k <= K; ++k) {
    term = gD * term;
    const double nk = inf_norm(term);
    r.term_norms.push_back(nk);
    r.truncation += term;
    if (!std::isfinite(nk)) r.diverged = true;
  }
  // partial sums growing: the last three terms increase monotonically and
  // exceed the first
  const auto& t = r.term_norms;
  if (t.size() >= 3 && t[t.size() - 1] > t[t.size() - 2] && t[t.size() - 2] > t[t.size() - 3] &&
      t.back() > t.front())
    r.diverged = true;
  r.series_residual = inf_norm(G - g - r.truncation);

  // R = sum_{k>=1} D^k p, S = sum_{k>=0} D^k, truncated at the point where
  // further terms are below rounding.
  Mat S = I, Dk = I;
  for (int k = 1; k <= 200; ++k) {
    Dk = Dk * D;
    S += Dk;
    if (inf_norm(Dk) < 1e-18) break;
  }
  const Mat R = (S - I) * p;
  const Mat Rg = R * g;
  Mat acc = Mat::Zero(n, n), pw = I;
  for (int m = 0; m <= K; ++m) {
    acc += pw;
    r.pbe3_residuals.push_back(inf_norm(G - g * acc * S));
    pw = pw * Rg;
  }
  return r;
}

// Dense interior block of a kernel.
inline Mat interior_block(const Kernel& K) {
  const auto n = static_cast<Eigen::Index>(K.n_interior());
  Mat M = Mat::Zero(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (SpMat::InnerIterator it(K.P, i); it; ++it)
      if (it.col() < n) M(i, it.col()) = it.value();
  return M;
}

}  // namespace rwre
