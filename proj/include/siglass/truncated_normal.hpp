#pragma once

// Centered normal probabilities over unions of intervals, computed in the
// log domain so that masses far in the tails stay finite and relatively
// accurate.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <vector>

#include <boost/math/quadrature/gauss.hpp>

#include "siglass/error.hpp"
#include "siglass/interval.hpp"

namespace siglass {

inline constexpr double kNegInf = -std::numeric_limits<double>::infinity();

/// log Phi(x) for the standard normal CDF.
inline double log_ndtr(double x) {
  if (std::isnan(x)) return x;
  if (x == kInf) return 0.0;
  if (x == -kInf) return kNegInf;
  if (x > 6.0) return std::log1p(-0.5 * std::erfc(x / std::numbers::sqrt2));
  if (x > -20.0) return std::log(0.5 * std::erfc(-x / std::numbers::sqrt2));
  // Mills-ratio expansion: Phi(x) = phi(x)/(-x) * (1 - 1/x^2 + 3/x^4 - ...).
  const double x2 = x * x;
  double term = 1.0, sum = 1.0;
  for (int k = 1; k < 40; ++k) {
    term *= -(2.0 * k - 1.0) / x2;
    sum += term;
    if (std::abs(term) < 1e-17) break;
  }
  return -0.5 * x2 - std::log(-x) - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(sum);
}

/// log(exp(x) - exp(y)) for x >= y.
inline double log_diff_exp(double x, double y) {
  if (y == kNegInf) return x;
  if (!(x > y)) return kNegInf;
  const double d = y - x;
  return x + (d > -std::numbers::ln2 ? std::log(-std::expm1(d)) : std::log1p(-std::exp(d)));
}

inline double log_sum_exp(const std::vector<double>& v) {
  double m = kNegInf;
  for (double x : v) m = std::max(m, x);
  if (m == kNegInf) return kNegInf;
  if (m == kInf) return kInf;
  double s = 0.0;
  for (double x : v) s += std::exp(x - m);
  return m + std::log(s);
}

namespace detail {

/// log P(lo <= N(0,1) <= hi) for 0 <= lo < hi with a narrow segment,
/// integrating the density relative to its value at lo.
inline double log_upper_narrow_mass(double lo, double hi) {
  const double w = hi - lo;
  const double rel = boost::math::quadrature::gauss<double, 15>::integrate(
      [lo](double t) { return std::exp(-lo * t - 0.5 * t * t); }, 0.0, w);
  return -0.5 * lo * lo - 0.5 * std::log(2.0 * std::numbers::pi) + std::log(rel);
}

/// Same-sign upper segment, 0 <= lo < hi.
inline double log_upper_mass(double lo, double hi) {
  const double w = hi - lo;
  if (std::isfinite(hi) && (lo + w) * w < 0.5) return log_upper_narrow_mass(lo, hi);
  return log_diff_exp(log_ndtr(-lo), log_ndtr(-hi));
}

}  // namespace detail

/// log P(lo <= N(0, sigma^2) <= hi); -inf for an empty or degenerate segment.
inline double log_gauss_mass(double lo, double hi, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorKind::InvalidConfig, "sigma must be positive");
  const double l = lo / sigma, h = hi / sigma;
  if (!(l < h)) return kNegInf;
  if (l >= 0.0) return detail::log_upper_mass(l, h);
  if (h <= 0.0) return detail::log_upper_mass(-h, -l);
  // Straddles zero: both halves are positive, no cancellation.
  const double half = std::erf(h / std::numbers::sqrt2) - std::erf(l / std::numbers::sqrt2);
  return std::log(0.5 * half);
}

/// log of the unconditional two-sided p-value 2*Phi(-|z|/sigma).
inline double log_two_sided_normal_p(double z, double sigma) {
  return std::min(0.0, std::numbers::ln2 + log_ndtr(-std::abs(z) / sigma));
}

/// log P(|Z| > |z_obs| | Z in region) for Z ~ N(0, sigma^2). Stays finite
/// when the probability itself is below the double range.
inline double log_two_sided_p(const IntervalUnion& region, double z_obs, double sigma) {
  if (!(sigma > 0.0)) throw Error(ErrorKind::InvalidConfig, "sigma must be positive");
  const double tol = 1e-9 * std::max(1.0, sigma);
  bool inside = false;
  for (const auto& s : region.segments())
    if (s.lo - tol <= z_obs && z_obs <= s.hi + tol) inside = true;
  if (!inside)
    throw Error(ErrorKind::ObservationOutsideRegion, "z_obs = " + std::to_string(z_obs) + " lies outside the region");

  const double t = std::abs(z_obs);
  std::vector<double> num, den;
  for (const auto& s : region.segments()) {
    den.push_back(log_gauss_mass(s.lo, s.hi, sigma));
    if (s.lo < -t) num.push_back(log_gauss_mass(s.lo, std::min(s.hi, -t), sigma));
    if (s.hi > t) num.push_back(log_gauss_mass(std::max(s.lo, t), s.hi, sigma));
  }
  const double log_den = log_sum_exp(den);
  if (log_den == kNegInf) throw Error(ErrorKind::ZeroDenominator, "truncation region has zero probability mass");
  return std::min(0.0, log_sum_exp(num) - log_den);
}

/// P(|Z| > |z_obs| | Z in region) for Z ~ N(0, sigma^2).
inline double two_sided_p(const IntervalUnion& region, double z_obs, double sigma) {
  return std::clamp(std::exp(log_two_sided_p(region, z_obs, sigma)), 0.0, 1.0);
}

}  // namespace siglass
