#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>
#include <set>

#include "rwre/env_io.hpp"
#include "rwre/environment.hpp"
#include "rwre/lattice.hpp"

using namespace rwre;

// ---------------------------------------------------------------------------
// lattice

TEST(Lattice, BallOfRadiusTwoHas33Points) {
  auto V = Domain::ball(Point::zero(3), 2);
  EXPECT_EQ(V.n_interior(), 33u);
  for (const auto& p : V.interior()) EXPECT_LE(p.norm2(), 4);
}

TEST(Lattice, BallSizesMatchEnumeration) {
  for (double L : {1.0, 1.5, 3.0, 4.2, 6.0}) {
    std::size_t n = 0;
    const int R = static_cast<int>(L) + 1;
    for (int x = -R; x <= R; ++x)
      for (int y = -R; y <= R; ++y)
        for (int z = -R; z <= R; ++z) n += (x * x + y * y + z * z <= L * L);
    EXPECT_EQ(Domain::ball(Point::zero(3), L).n_interior(), n) << "L=" << L;
  }
}

TEST(Lattice, BoundaryIsOuterNeighbourhood) {
  auto V = Domain::ball(Point::zero(3), 3);
  std::set<Point> expect;
  for (const auto& p : V.interior())
    for (int k = 0; k < 6; ++k) {
      Point q = p + direction(3, k);
      if (!V.is_interior(q)) expect.insert(q);
    }
  std::set<Point> got(V.boundary().begin(), V.boundary().end());
  EXPECT_EQ(got, expect);
}

TEST(Lattice, ShellOfWidthOneAtRadiusTwo) {
  // |x|^2 in {2, 3, 4}: 12 + 8 + 6 points
  auto sh = shell_points({0, 1, 2}, 3);
  EXPECT_EQ(sh.size(), 26u);
  for (const auto& p : sh) EXPECT_GT(p.norm(), 1.0);
}

TEST(Lattice, SquaredThresholdIsExact) {
  EXPECT_EQ(squared_threshold(2), 4);
  EXPECT_EQ(squared_threshold(std::nextafter(3.0, 4.0)), 9);
  EXPECT_EQ(squared_threshold(std::nextafter(3.0, 0.0)), 8);
  EXPECT_EQ(squared_threshold(2.999999), 8);
  EXPECT_EQ(squared_threshold(-1), -1);
}

TEST(Lattice, SignedPermutationGroupOrder) {
  EXPECT_EQ(signed_permutation_group(1).size(), 2u);
  EXPECT_EQ(signed_permutation_group(2).size(), 8u);
  EXPECT_EQ(signed_permutation_group(3).size(), 48u);
}

TEST(Lattice, GroupPreservesNorms) {
  const Point x{3, -1, 2};
  for (const auto& g : signed_permutation_group(3)) EXPECT_EQ(g.apply(x).norm2(), x.norm2());
}

TEST(Lattice, OrbitRepresentativeIsCanonical) {
  const Point x{-2, 5, 0};
  const Point r = orbit_representative(x);
  for (const auto& g : signed_permutation_group(3)) EXPECT_EQ(orbit_representative(g.apply(x)), r);
  EXPECT_EQ(map_from_representative(x).apply(r), x);
}

TEST(Lattice, CapacityIsEnforced) {
  EXPECT_THROW(Domain::ball(Point::zero(3), 50, 1000), CapacityError);
}

// ---------------------------------------------------------------------------
// environment

class FamilyProps : public ::testing::TestWithParam<Family> {};

TEST_P(FamilyProps, SiteLawsSatisfyEllipticity) {
  for (double eps : {0.0, 0.01, 0.05, 0.15}) {
    FamilySpec f{GetParam(), 3, eps, 1};
    Environment env(f, 42);
    const Domain V = Domain::ball(Point::zero(3), 4);
    for (const auto& x : V.interior()) {
      const SiteLaw q = env.law(x);
      ASSERT_TRUE(q.valid(eps, 1e-14)) << family_name(GetParam()) << " " << x.str();
      EXPECT_NEAR(q.sum(), 1.0, 1e-15);
    }
  }
}

TEST_P(FamilyProps, LawsAreDeterministicPerSite) {
  FamilySpec f{GetParam(), 3, 0.1, 0};
  Environment a(f, 9), b(f, 9);
  const Domain V = Domain::ball(Point::zero(3), 3);
  for (const auto& x : V.interior()) EXPECT_TRUE(a.law(x) == b.law(x));
}

INSTANTIATE_TEST_SUITE_P(All, FamilyProps,
                         ::testing::Values(Family::srw, Family::isotropic_tilt, Family::balanced_axis,
                                           Family::symmetric_balanced));

TEST(Environment, ZeroEpsilonIsSimpleRandomWalk) {
  Environment env({Family::isotropic_tilt, 3, 0.0, 0}, 1);
  EXPECT_TRUE(env.is_srw());
  EXPECT_TRUE(env.law(Point{5, 1, -2}) == SiteLaw::uniform(3));
}

TEST(Environment, BalancedAxisIsBalanced) {
  Environment env({Family::balanced_axis, 3, 0.1, 2}, 3);
  const Domain V = Domain::ball(Point::zero(3), 3);
  for (const auto& x : V.interior()) {
    const SiteLaw q = env.law(x);
    EXPECT_DOUBLE_EQ(q[4], q[5]);
  }
}

TEST(Environment, SymmetricBalancedIsBalancedOnEveryAxis) {
  Environment env({Family::symmetric_balanced, 3, 0.1, 0}, 3);
  const Domain V = Domain::ball(Point::zero(3), 3);
  for (const auto& x : V.interior()) {
    const SiteLaw q = env.law(x);
    for (int i = 0; i < 3; ++i) EXPECT_DOUBLE_EQ(q[2 * i], q[2 * i + 1]);
  }
}

TEST(Environment, DifferentSeedsDiffer) {
  Environment a({Family::isotropic_tilt, 3, 0.1, 0}, 1), b({Family::isotropic_tilt, 3, 0.1, 0}, 2);
  EXPECT_FALSE(a.law(Point::zero(3)) == b.law(Point::zero(3)));
}

TEST(Environment, RejectsInvalidEpsilon) {
  EXPECT_THROW(Environment({Family::isotropic_tilt, 3, 1.0 / 6, 0}, 1), Error);
  EXPECT_THROW(Environment({Family::isotropic_tilt, 3, -0.01, 0}, 1), Error);
  Environment env({Family::srw, 3, 0.05, 0}, 1);
  EXPECT_THROW(env.set_override(Point::zero(3), corner_law(3, 0.1)), Error);
}

TEST(Environment, IsotropicFamiliesPassIsotropyCheck) {
  for (Family f : {Family::isotropic_tilt, Family::symmetric_balanced}) {
    auto rep = check_isotropy({f, 3, 0.1, 0}, 4000, 11);
    EXPECT_TRUE(rep.passed) << family_name(f) << " max distance " << rep.max_distance;
  }
}

TEST(Environment, BalancedAxisFailsIsotropyCheck) {
  auto rep = check_isotropy({Family::balanced_axis, 3, 0.1, 0}, 4000, 11);
  EXPECT_FALSE(rep.passed);
}

// ---------------------------------------------------------------------------
// environment files

TEST(EnvIo, RoundTripReproducesLaws) {
  Environment env({Family::isotropic_tilt, 3, 0.07, 0}, 77);
  env.set_override(Point::zero(3), corner_law(3, 0.07));
  const Domain V = Domain::ball(Point::zero(3), 4);
  const auto rec = deserialize(serialize(env, V));
  EXPECT_EQ(rec.seed, 77u);
  EXPECT_EQ(rec.laws.size(), V.n_interior());
  const Environment back = rec.environment();
  for (const auto& x : V.interior()) EXPECT_TRUE(back.law(x) == env.law(x));
}

TEST(EnvIo, FileRoundTrip) {
  Environment env({Family::balanced_axis, 3, 0.05, 1}, 5);
  const Domain V = Domain::ball(Point::zero(3), 3);
  const auto path = (std::filesystem::temp_directory_path() / "rwre_env_test.bin").string();
  write_file(path, serialize(env, V));
  const auto rec = deserialize(read_file(path));
  EXPECT_EQ(rec.spec.family, Family::balanced_axis);
  EXPECT_EQ(rec.spec.axis, 1);
  std::remove(path.c_str());
}

TEST(EnvIo, DetectsCorruption) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 5);
  auto bytes = serialize(env, Domain::ball(Point::zero(3), 2));
  auto flipped = bytes;
  flipped[40] ^= 0x01;
  try {
    deserialize(flipped);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::corrupt_payload);
  }
  auto truncated = bytes;
  truncated.resize(8);
  EXPECT_THROW(deserialize(truncated), Error);
}

TEST(EnvIo, RejectsOtherVersions) {
  Environment env({Family::isotropic_tilt, 3, 0.05, 0}, 5);
  auto bytes = serialize(env, Domain::ball(Point::zero(3), 2));
  bytes[4] = 2;
  try {
    deserialize(bytes);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::version_mismatch);
  }
}
