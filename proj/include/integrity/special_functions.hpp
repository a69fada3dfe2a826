#pragma once

#include <cmath>
#include <limits>
#include <numbers>
#include <string>

#include "integrity/error.hpp"

namespace integrity {

/// Standard normal CDF.
inline double normal_cdf(double x) {
  if (!std::isfinite(x)) throw Error(ErrorCode::NonFiniteInput, "normal_cdf of a non-finite value");
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

namespace detail {

// Continued fraction for the incomplete beta (modified Lentz).
inline double incomplete_beta_fraction(double a, double b, double x) {
  constexpr int kMaxIterations = 20000;
  constexpr double kEpsilon = 1e-16;
  constexpr double kTiny = 1e-300;

  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::fabs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::fabs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::fabs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::fabs(delta - 1.0) < kEpsilon) return h;
  }
  throw Error(ErrorCode::InvalidArgument, "incomplete beta continued fraction did not converge (a=" +
                                              std::to_string(a) + ", b=" + std::to_string(b) + ")");
}

}  // namespace detail

/// Regularized incomplete beta I_x(a, b).
inline double regularized_incomplete_beta(double a, double b, double x) {
  if (!(a > 0.0) || !(b > 0.0)) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs a, b > 0");
  if (!(x >= 0.0 && x <= 1.0)) throw Error(ErrorCode::InvalidArgument, "incomplete beta needs x in [0, 1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front =
      std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) + b * std::log1p(-x);
  const double front = std::exp(log_front);
  if (x < (a + 1.0) / (a + b + 2.0)) return front * detail::incomplete_beta_fraction(a, b, x) / a;
  return 1.0 - front * detail::incomplete_beta_fraction(b, a, 1.0 - x) / b;
}

/// Upper tail P(T >= t) of Student's t with df degrees of freedom.
inline double student_t_sf(double t, double df) {
  if (!(df > 0.0) || std::isnan(df))
    throw Error(ErrorCode::InvalidDegreesOfFreedom, "degrees of freedom must be positive, got " + std::to_string(df));
  if (std::isnan(t)) throw Error(ErrorCode::NonFiniteInput, "student_t_sf of NaN");
  if (t == std::numeric_limits<double>::infinity()) return 0.0;
  if (t == -std::numeric_limits<double>::infinity()) return 1.0;
  if (t == 0.0) return 0.5;
  if (std::isinf(df)) return 1.0 - normal_cdf(t);
  // x = df / (df + t^2), written to avoid cancellation when t^2 << df
  const double x = 1.0 / (1.0 + (t * t) / df);
  const double tail = 0.5 * regularized_incomplete_beta(0.5 * df, 0.5, x);
  return t > 0.0 ? tail : 1.0 - tail;
}

}  // namespace integrity
