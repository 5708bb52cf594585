#include <gtest/gtest.h>

#include "rwre/clt.hpp"
#include "rwre/coarse.hpp"
#include "rwre/gamma.hpp"
#include "rwre/kernel.hpp"
#include "rwre/mollifier.hpp"
#include "rwre/schedule.hpp"
#include "rwre/solver.hpp"

using namespace rwre;

// ---------------------------------------------------------------------------
// mollifier and h

TEST(Mollifier, IsADensityOnOneTwo) {
  const auto& phi = default_mollifier();
  EXPECT_EQ(phi.cdf(1.0), 0.0);
  EXPECT_NEAR(phi.cdf(2.0), 1.0, 1e-14);
  EXPECT_EQ(phi.pdf(0.5), 0.0);
  EXPECT_EQ(phi.pdf(2.5), 0.0);
  for (double t : {0.05, 0.2, 0.4}) EXPECT_NEAR(phi.pdf(1.5 + t), phi.pdf(1.5 - t), 1e-14);
  double prev = 0;
  for (int i = 0; i <= 100; ++i) {
    const double c = phi.cdf(1.0 + i / 100.0);
    EXPECT_GE(c, prev - 1e-16);
    prev = c;
  }
}

TEST(Mollifier, MixtureWeightsSumToOne) {
  for (double m : {1.0, 2.5, 4.0, 7.3}) {
    const auto pieces = mixture_pieces(lattice_radii(3, coarse_kmax(m)), m);
    double s = 0;
    for (const auto& p : pieces) {
      EXPECT_GT(p.w, 0.0);
      s += p.w;
    }
    EXPECT_NEAR(s, 1.0, 1e-14) << "m=" << m;
  }
}

TEST(HFunction, ShapeConstraints) {
  const auto& h = default_hfunction();
  EXPECT_DOUBLE_EQ(h(0.3), 0.3);
  EXPECT_NEAR(h(2.0), 1.0, 1e-14);
  EXPECT_DOUBLE_EQ(h(5.0), 1.0);
  double prev = 0;
  for (int i = 1; i <= 400; ++i) {
    const double x = i / 100.0;
    EXPECT_GE(h(x), prev);
    EXPECT_LE(h(x), std::min(x, 1.0) + 1e-14);
    prev = h(x);
  }
  EXPECT_NEAR(h(2.0 - 1e-9), 1.0, 1e-8);
}

// ---------------------------------------------------------------------------
// schedules

TEST(Schedule, OverrideOrderingEnforced) {
  EXPECT_THROW(Schedule::override_sr(12, 2, 4, 0.5), Error);
  EXPECT_THROW(Schedule::override_sr(12, 14, 2, 0.5), Error);
  EXPECT_NO_THROW(Schedule::override_sr(12, 4, 2, 0.5));
}

TEST(Schedule, RadiusBetweenScaledRAndS) {
  const auto S = Schedule::override_sr(16, 4, 2, 0.5);
  const Domain V = Domain::ball(Point::zero(3), 16);
  for (const auto& x : V.interior()) {
    const double h = S(x);
    EXPECT_GE(h, 0.5 * 2 - 1e-12);
    EXPECT_LE(h, 0.5 * 4 + 1e-12);
  }
  EXPECT_NEAR(S(Point::zero(3)), 2.0, 1e-12);
}

TEST(Schedule, StandardScheduleIsDegenerateAtDeskScale) {
  EXPECT_TRUE(Schedule::standard(12).degenerate());
  EXPECT_FALSE(Schedule::override_sr(12, 4, 2, 0.5).degenerate());
}

TEST(Schedule, RescaledKeepsProportions) {
  const auto S = Schedule::override_sr(16, 4, 2, 0.5).rescaled(8);
  EXPECT_DOUBLE_EQ(S.L, 8);
  EXPECT_DOUBLE_EQ(S.s, 2);
  EXPECT_DOUBLE_EQ(S.r, 1);
}

// ---------------------------------------------------------------------------
// coarse graining

TEST(Coarse, StepDistributionIsSymmetricProbability) {
  const auto sd = step_distribution(3, 3);
  double s = 0, var = 0;
  for (std::size_t i = 0; i < sd->points.size(); ++i) {
    s += sd->probs[i];
    var += sd->probs[i] * sd->points[i].c[0] * sd->points[i].c[0];
  }
  EXPECT_NEAR(s, 1.0, 1e-13);
  EXPECT_NEAR(var, sd->gamma, 1e-12);
  for (const auto& g : signed_permutation_group(3))
    for (std::size_t i = 0; i < sd->points.size(); i += 7)
      EXPECT_NEAR(sd->at(g.apply(sd->points[i])), sd->probs[i], 1e-15);
}

TEST(Coarse, FreeRowMatchesStepDistribution) {
  const auto sd = step_distribution(2.5, 3);
  const Point x{3, -1, 4};
  for (const auto& [z, p] : srw_free_row(x, 2.5).entries) EXPECT_NEAR(p, sd->at(z - x), 1e-14);
}

TEST(Coarse, NestedRadialSolveMatchesPerBall) {
  const std::vector<std::int64_t> ks = {0, 1, 2, 3, 5, 9, 14, 20};
  const auto nested = detail::radial_srw_exit_nested(3, ks);
  ASSERT_EQ(nested.size(), ks.size());
  for (std::size_t i = 0; i < ks.size(); ++i) {
    const auto one = detail::radial_srw_exit(3, ks[i]);
    EXPECT_NEAR(nested[i].mean_time, one.mean_time, 1e-12 * std::max(1.0, one.mean_time));
    ASSERT_EQ(nested[i].rep_probs.size(), one.rep_probs.size());
    std::map<Point, double> got(nested[i].rep_probs.begin(), nested[i].rep_probs.end());
    for (const auto& [rep, p] : one.rep_probs) {
      ASSERT_TRUE(got.count(rep)) << rep.str();
      EXPECT_NEAR(got[rep], p, 1e-13) << "k=" << ks[i] << " " << rep.str();
    }
  }
}

TEST(Coarse, CachedSrwRowEqualsDirectSolve) {
  const Point x{1, 2, 0};
  const auto cached = coarse_row(x, 2, nullptr, srw_law(3), true);
  const auto direct = coarse_row(x, 2, nullptr, srw_law(3), false);
  ASSERT_EQ(cached.entries.size(), direct.entries.size());
  std::map<Point, double> a(cached.entries.begin(), cached.entries.end());
  for (const auto& [z, p] : direct.entries) EXPECT_NEAR(a[z], p, 1e-13);
  EXPECT_NEAR(cached.mean_time, direct.mean_time, 1e-11);
}

TEST(Coarse, KernelIsStochasticAndPreservesExitLaws) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 21);
  auto W = make_ball(Point::zero(3), 6);
  const auto S = Schedule::override_sr(6, 3, 1, 0.5);
  const auto cg = coarse_grain(env, SmoothingField::h_profile(S, Point::zero(3)), W);
  EXPECT_TRUE(cg.kernel.stochastic(1e-12));
  GreenOperator Gc(cg.kernel), Gb(rwre_kernel(env, W));
  for (const auto& x : {Point{0, 0, 0}, Point{2, -3, 1}, Point{5, 0, 0}}) {
    const auto a = Gc.exit_measure(x), b = Gb.exit_measure(x);
    double l1 = 0;
    for (std::size_t k = 0; k < a.weights.size(); ++k) l1 += std::abs(a.weights[k] - b.weights[k]);
    EXPECT_LE(l1, 1e-10) << x.str();
  }
}

TEST(Coarse, SojournDecomposition) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 22);
  const auto S = Schedule::override_sr(6, 3, 1, 0.5);
  for (const auto& c : sojourn_decomposition_check(env, S, {Point{0, 0, 0}, Point{1, 4, 0}}))
    EXPECT_LE(c.residual, 1e-9 * 36);
}

TEST(Coarse, GoodifyReplacesBadRows) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 23);
  auto W = make_ball(Point::zero(3), 4);
  const auto field = SmoothingField::constant(1.5);
  const auto Pc = coarse_grain(env, field, W).kernel;
  const auto pc = coarse_grain_srw(3, field, W).kernel;
  const auto Pg = goodify(Pc, pc, {Point::zero(3)});
  const auto i0 = static_cast<Eigen::Index>(*W->find(Point::zero(3)));
  const auto i1 = static_cast<Eigen::Index>(*W->find(Point{1, 1, 0}));
  for (std::size_t j = 0; j < W->size(); ++j) {
    const auto c = static_cast<Eigen::Index>(j);
    EXPECT_EQ(Pg.P.coeff(i0, c), pc.P.coeff(i0, c));
    EXPECT_EQ(Pg.P.coeff(i1, c), Pc.P.coeff(i1, c));
  }
}

TEST(Coarse, LevelFourModificationIsStochastic) {
  auto W = make_ball(Point::zero(3), 6);
  const auto field = SmoothingField::constant(1.5);
  const auto pc = coarse_grain_srw(3, field, W).kernel;
  const auto mod = modify_level4(pc, {Point::zero(3)}, 2, field);
  EXPECT_TRUE(mod.stochastic(1e-12));
  EXPECT_THROW(modify_level4(pc, {Point::zero(3)}, 1, field), Error);
}

TEST(Coarse, NonpositiveRadiusRejected) {
  EXPECT_THROW(coarse_row(Point::zero(3), 0, nullptr, srw_law(3), true), Error);
}

TEST(Coarse, GammaBandSmallScales) {
  for (double m : {2.0, 3.0, 5.0}) {
    const double g = gamma_m(m, 3) / (m * m);
    EXPECT_GT(g, 1.0 / 3.0);
    EXPECT_LT(g, 4.0 / 3.0);
  }
}

// ---------------------------------------------------------------------------
// local CLT

TEST(Clt, PowersStaySymmetricProbabilities) {
  const auto rep = local_clt_scan(2, 2, 6);
  ASSERT_EQ(rep.rows.size(), 5u);
  for (const auto& r : rep.rows) {
    EXPECT_NEAR(r.mass, 1.0, 1e-12);
    EXPECT_LE(r.asymmetry, 1e-15);
  }
  EXPECT_LT(rep.rows.back().sup_error, rep.rows.front().sup_error);
  EXPECT_LT(rep.slope, 0.0);
}

TEST(Clt, FitLineIsExactOnLines) {
  const auto [b, a] = fit_line({0, 1, 2, 3}, {1, -1.5, -4, -6.5});
  EXPECT_NEAR(b, -2.5, 1e-14);
  EXPECT_NEAR(a, 1.0, 1e-14);
}

// ---------------------------------------------------------------------------
// Gamma kernel

TEST(Gamma, LipschitzAndTriangle) {
  const auto g = GammaKernelSpec::make(40, 4, 10, 3);
  const auto rep = gamma_lipschitz_check(g, 2000, 3);
  EXPECT_TRUE(rep.passed()) << rep.worst_tilde << " " << rep.worst_a << " " << rep.worst_triangle;
}

TEST(Gamma, ComparableOnNeighbourhoods) {
  const auto g = GammaKernelSpec::make(40, 4, 10, 3);
  EXPECT_TRUE(gamma_asymp_check(g, 2000, 5).passed());
}

TEST(Gamma, DominatesCoarseGreenFunction) {
  const auto g = GammaKernelSpec::make(10, 1, 2.5, 3);
  const auto rep = gamma_bounds_report(g, Schedule::override_sr(10, 2.5, 1, 0.5), 10, 10, 1);
  EXPECT_TRUE(rep.finite_positive);
  EXPECT_GT(rep.C1, 0.0);
  EXPECT_TRUE(std::isfinite(rep.C1));
}
