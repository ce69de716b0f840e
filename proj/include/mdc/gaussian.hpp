#pragma once

#include <cmath>
#include <numbers>

namespace mdc {

inline constexpr double kSigmaMin = 1e-6;
inline constexpr double kProbabilityFloor = 1.0 / 65536.0;

inline double std_normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::numbers::sqrt2);
}

inline double std_normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

/// Probability of the unit-width bin centred on `value`. Evaluated in the
/// upper tail of |value - mu| to avoid cancellation far from the mean.
inline double gaussian_bin_mass(double value, double mu, double sigma) {
  const double d = std::abs(value - mu);
  const double s = sigma * std::numbers::sqrt2;
  return 0.5 * (std::erfc((d - 0.5) / s) - std::erfc((d + 0.5) / s));
}

inline double gaussian_bin_bits(double value, double mu, double sigma,
                                double p_min = kProbabilityFloor) {
  const double p = gaussian_bin_mass(value, mu, sigma);
  return -std::log2(p < p_min ? p_min : p);
}

/// Rounds half away from zero.
inline double round_half_away(double v) { return std::round(v); }

}  // namespace mdc
