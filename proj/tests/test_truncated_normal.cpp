#include <gtest/gtest.h>

#include <cmath>
#include <numbers>
#include <random>

#include "siglass/truncated_normal.hpp"
#include "support/oracles.hpp"

using namespace siglass;

namespace {

double Phi(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

IntervalUnion whole() { return IntervalUnion(Interval::whole()); }

double rel_err(double got, const oracle::Real& want) {
  const oracle::Real w = want;
  if (w == 0) return std::abs(got);
  return static_cast<double>(abs((oracle::Real(got) - w) / w));
}

}  // namespace

TEST(LogGaussMass, TotalAndHalf) {
  EXPECT_EQ(log_gauss_mass(-kInf, kInf, 1), 0.0);
  EXPECT_NEAR(log_gauss_mass(0, kInf, 1), std::log(0.5), 1e-15);
  EXPECT_NEAR(log_gauss_mass(-kInf, 0, 3), std::log(0.5), 1e-15);
}

TEST(LogGaussMass, FarTailAgainstExtendedPrecision) {
  const double got = log_gauss_mass(8, 9, 1);
  ASSERT_TRUE(std::isfinite(got));
  EXPECT_LT(got, 0.0);
  const oracle::Real want = log(oracle::gauss_mass(8, 9, 1));
  EXPECT_LT(rel_err(got, want), 1e-10);
}

TEST(LogGaussMass, SweepAgainstExtendedPrecision) {
  std::mt19937_64 rng(17);
  std::uniform_real_distribution<double> pos(-45, 45), width(1e-6, 5);
  for (int i = 0; i < 200; ++i) {
    const double lo = pos(rng);
    const double hi = lo + (i % 3 == 0 ? width(rng) * 1e-3 : width(rng));
    const double got = log_gauss_mass(lo, hi, 1);
    const oracle::Real want = log(oracle::gauss_mass(lo, hi, 1));
    EXPECT_LT(rel_err(got, want), 1e-10) << lo << " " << hi;
  }
}

TEST(LogGaussMass, ExtremeTailStaysFinite) {
  const double v = log_gauss_mass(1e4, kInf, 1);
  EXPECT_TRUE(std::isfinite(v));
  EXPECT_NEAR(v / (-0.5e8), 1.0, 1e-6);
  EXPECT_EQ(log_gauss_mass(2, 2, 1), kNegInf);
  EXPECT_EQ(log_gauss_mass(3, 2, 1), kNegInf);
  EXPECT_THROW(log_gauss_mass(0, 1, 0), Error);
}

TEST(TwoSidedP, CenterIsOne) { EXPECT_EQ(two_sided_p(whole(), 0, 1), 1.0); }

TEST(TwoSidedP, NormalQuantile) { EXPECT_NEAR(two_sided_p(whole(), 1.959964, 1), 0.05, 1e-6); }

TEST(TwoSidedP, SymmetricTruncation) {
  const double want = 2 * (Phi(2) - Phi(1)) / (2 * Phi(2) - 1);
  const IntervalUnion z(Interval{-2, 2});
  EXPECT_NEAR(two_sided_p(z, 1, 1), want, 1e-14);
  EXPECT_LT(rel_err(two_sided_p(z, 1, 1), oracle::two_sided_p(z, 1, 1)), 1e-12);
}

TEST(TwoSidedP, MatchesNaivePathOnWholeLine) {
  for (double z : {-6.0, -1.3, 0.2, 2.5, 9.0, 30.0})
    for (double s : {0.5, 1.0, 7.0})
      EXPECT_NEAR(two_sided_p(whole(), z, s), std::exp(log_two_sided_normal_p(z, s)), 1e-12);
}

TEST(TwoSidedP, NonIncreasingInAbsZ) {
  IntervalUnion z;
  z.add({-3, -1});
  z.add({0.5, 4});
  z.add({12, 14});
  double prev = 1.0;
  for (double t = 0.5; t <= 4; t += 0.05) {
    const double p = two_sided_p(z, t, 1);
    EXPECT_LE(p, prev + 1e-15);
    prev = p;
  }
}

TEST(TwoSidedP, ScaleEquivariance) {
  std::mt19937_64 rng(23);
  for (int i = 0; i < 30; ++i) {
    const auto r = oracle::random_union(rng);
    const double c = 3.7;
    IntervalUnion scaled;
    for (const auto& s : r.region.segments()) scaled.add({s.lo * c, s.hi * c});
    EXPECT_NEAR(two_sided_p(scaled, r.z_obs * c, r.sigma * c), two_sided_p(r.region, r.z_obs, r.sigma), 1e-12);
  }
}

TEST(TwoSidedP, RandomUnionsAgainstExtendedPrecision) {
  std::mt19937_64 rng(29);
  for (int i = 0; i < 40; ++i) {
    const auto r = oracle::random_union(rng);
    const double got = two_sided_p(r.region, r.z_obs, r.sigma);
    EXPECT_GE(got, 0.0);
    EXPECT_LE(got, 1.0);
    const auto want = oracle::two_sided_p(r.region, r.z_obs, r.sigma);
    if (want >= std::numeric_limits<double>::min()) {
      EXPECT_LT(rel_err(got, want), 1e-8) << "case " << i;
    } else {
      EXPECT_LE(got, std::numeric_limits<double>::min()) << "case " << i;
    }
    // Relative accuracy of p is absolute accuracy of log p.
    const double log_got = log_two_sided_p(r.region, r.z_obs, r.sigma);
    EXPECT_LT(std::abs(static_cast<double>(oracle::Real(log_got) - log(want))), 1e-8) << "case " << i;
  }
}

TEST(TwoSidedP, FarTailSegmentsGiveMeaningfulRatio) {
  IntervalUnion z;
  z.add({30, 31});
  z.add({35, kInf});
  const double p = two_sided_p(z, 30.5, 1);
  EXPECT_GT(p, 0.0);
  EXPECT_LT(p, 1.0);
  EXPECT_LT(rel_err(p, oracle::two_sided_p(z, 30.5, 1)), 1e-8);
}

TEST(TwoSidedP, Errors) {
  const IntervalUnion z(Interval{1, 2});
  try {
    two_sided_p(z, 5, 1);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ObservationOutsideRegion);
  }
  EXPECT_NO_THROW(two_sided_p(z, 2 + 1e-10, 1));
  const IntervalUnion far(Interval{1e200, 2e200});
  try {
    two_sided_p(far, 1.5e200, 1e-200);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.kind(), ErrorKind::ZeroDenominator);
  }
}
