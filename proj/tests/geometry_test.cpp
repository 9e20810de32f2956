#include "ps2kit/geometry.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <random>

using namespace ps2kit;

namespace {

Vec3 random_upper_dir(std::mt19937& rng) {
  std::uniform_real_distribution<double> el(-89.0, 89.0), az(1.0, 179.0);
  return spherical_to_dir({el(rng), az(rng)});
}

}  // namespace

TEST(SphericalToDir, FrontalBinIsViewDirection) {
  Vec3 d = spherical_to_dir({0.0, 90.0});
  EXPECT_NEAR(d.x, 0.0, 1e-12);
  EXPECT_NEAR(d.y, 0.0, 1e-12);
  EXPECT_NEAR(d.z, 1.0, 1e-12);
}

TEST(SphericalToDir, PoleAndAzimuthOrigin) {
  Vec3 pole = spherical_to_dir({90.0, 123.0});
  EXPECT_NEAR(pole.x, 0.0, 1e-12);
  EXPECT_NEAR(pole.y, 1.0, 1e-12);
  EXPECT_NEAR(pole.z, 0.0, 1e-12);

  Vec3 eq = spherical_to_dir({0.0, 0.0});
  EXPECT_NEAR(eq.x, 1.0, 1e-12);
  EXPECT_NEAR(eq.y, 0.0, 1e-12);
  EXPECT_NEAR(eq.z, 0.0, 1e-12);
}

TEST(SphericalToDir, OutOfRangeThrows) {
  EXPECT_THROW(spherical_to_dir({91.0, 90.0}), std::domain_error);
  EXPECT_THROW(spherical_to_dir({0.0, -1.0}), std::domain_error);
  EXPECT_THROW(spherical_to_dir({0.0, 180.5}), std::domain_error);
}

TEST(SphericalToDir, RoundTripRecoversAngles) {
  std::mt19937 rng(7);
  std::uniform_real_distribution<double> el(-89.999, 89.999), az(0.001, 179.999);
  for (int i = 0; i < 2000; ++i) {
    SphericalLight s{el(rng), az(rng)};
    Vec3 d = spherical_to_dir(s);
    EXPECT_NEAR(d.norm(), 1.0, 1e-12);
    EXPECT_GE(d.z, -1e-15);
    SphericalLight r = dir_to_spherical(d);
    EXPECT_NEAR(r.elevation_deg, s.elevation_deg, 1e-9);
    EXPECT_NEAR(r.azimuth_deg, s.azimuth_deg, 1e-9);
  }
}

TEST(HalfVector, IdentityAndSymmetryExamples) {
  Vec3 h = half_vector({0, 0, 1}, {0, 0, 1});
  EXPECT_NEAR(h.z, 1.0, 1e-12);

  Vec3 h2 = half_vector({1, 0, 0}, {0, 0, 1});
  EXPECT_NEAR(h2.x, std::sqrt(2.0) / 2.0, 1e-12);
  EXPECT_NEAR(h2.y, 0.0, 1e-12);
  EXPECT_NEAR(h2.z, std::sqrt(2.0) / 2.0, 1e-12);
}

TEST(HalfVector, AntiparallelThrows) {
  EXPECT_THROW(half_vector({0, 0, 1}, {0, 0, -1}), std::domain_error);
}

TEST(HalfVector, UnitNormAndArgumentSymmetryProperty) {
  std::mt19937 rng(11);
  for (int i = 0; i < 500; ++i) {
    Vec3 l = random_upper_dir(rng);
    Vec3 v = random_upper_dir(rng);
    Vec3 h = half_vector(l, v);
    // independent route: direct normalization of the sum
    Vec3 ref = (l + v).normalized();
    EXPECT_NEAR(h.norm(), 1.0, 1e-6);
    EXPECT_NEAR(h.x, ref.x, 1e-12);
    EXPECT_NEAR(h.y, ref.y, 1e-12);
    EXPECT_NEAR(h.z, ref.z, 1e-12);
    Vec3 hswap = half_vector(v, l);
    EXPECT_DOUBLE_EQ(h.x, hswap.x);
    EXPECT_DOUBLE_EQ(h.y, hswap.y);
    EXPECT_DOUBLE_EQ(h.z, hswap.z);
  }
}

TEST(PositionalEncode, ZeroInput) {
  auto v = positional_encode({0.0}, 3);
  std::vector<double> want = {0, 0, 1, 0, 1, 0, 1};
  ASSERT_EQ(v.size(), want.size());
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(v[i], want[i], 1e-12);
}

TEST(PositionalEncode, UnitInputSingleFrequency) {
  auto v = positional_encode({1.0}, 1);
  ASSERT_EQ(v.size(), 3u);
  EXPECT_NEAR(v[0], 1.0, 1e-12);
  EXPECT_NEAR(v[1], 0.0, 1e-12);   // sin(pi)
  EXPECT_NEAR(v[2], -1.0, 1e-12);  // cos(pi)
}

// Brute-force scalar-by-scalar oracle for the layout of the encoded vector.
TEST(PositionalEncode, MatchesScalarOracle) {
  std::vector<double> p = {0.3, 0.7};
  int m = 3;
  auto v = positional_encode(p, m);
  ASSERT_EQ(v.size(), 14u);
  std::vector<double> want;
  for (double x : p) want.push_back(x);
  for (double x : p)
    for (int k = 0; k < m; ++k) {
      double f = std::pow(2.0, k) * kPi;
      want.push_back(std::sin(f * x));
      want.push_back(std::cos(f * x));
    }
  for (std::size_t i = 0; i < want.size(); ++i) EXPECT_NEAR(v[i], want[i], 1e-12);
}

TEST(PositionalEncode, GammaComponentsBounded) {
  std::mt19937 rng(3);
  std::uniform_real_distribution<double> u(-5.0, 5.0);
  for (int t = 0; t < 200; ++t) {
    std::vector<double> p = {u(rng), u(rng)};
    auto v = positional_encode(p, 4);
    for (std::size_t i = p.size(); i < v.size(); ++i) {
      EXPECT_LE(v[i], 1.0 + 1e-12);
      EXPECT_GE(v[i], -1.0 - 1e-12);
    }
  }
}

TEST(AngularError, Examples) {
  EXPECT_NEAR(angular_error_deg({0, 0, 1}, {0, 0, 1}), 0.0, 1e-12);
  EXPECT_NEAR(angular_error_deg({0, 0, 1}, {1, 0, 0}), 90.0, 1e-12);
  double s = std::sin(deg2rad(10.0)), c = std::cos(deg2rad(10.0));
  EXPECT_NEAR(angular_error_deg({0, 0, 1}, {0, s, c}), 10.0, 1e-6);
}

TEST(AngularError, ClampHandlesRoundoff) {
  Vec3 n{0.6, 0.8, 0.0};
  double e = angular_error_deg(n, n);
  EXPECT_FALSE(std::isnan(e));
  EXPECT_NEAR(e, 0.0, 1e-6);
}

TEST(AngularError, SymmetricAndTriangleInequality) {
  std::mt19937 rng(23);
  for (int i = 0; i < 300; ++i) {
    Vec3 a = random_upper_dir(rng), b = random_upper_dir(rng), c = random_upper_dir(rng);
    EXPECT_DOUBLE_EQ(angular_error_deg(a, b), angular_error_deg(b, a));
    EXPECT_LE(angular_error_deg(a, c),
              angular_error_deg(a, b) + angular_error_deg(b, c) + 1e-9);
  }
}
