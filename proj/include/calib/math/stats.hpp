#pragma once

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <vector>

namespace calib {

inline constexpr double kPi = 3.14159265358979323846;

inline double deg2rad(double deg) { return deg * (kPi / 180.0); }

inline double normal_pdf(double x) {
  return std::exp(-0.5 * x * x) / std::sqrt(2.0 * kPi);
}

// Phi(x); erfc keeps the lower tail accurate where erf loses digits.
inline double normal_cdf(double x) {
  return 0.5 * std::erfc(-x / std::sqrt(2.0));
}

inline double mean(const std::vector<double>& v) {
  if (v.empty()) throw std::invalid_argument("mean: empty sample");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

// Unbiased (n-1) sample variance.
inline double sample_variance(const std::vector<double>& v) {
  if (v.size() < 2) throw std::invalid_argument("variance: need two points");
  const double m = mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return s / static_cast<double>(v.size() - 1);
}

// Coefficient of variation, sigma/mu with the sample standard deviation.
inline double coefficient_of_variation(const std::vector<double>& v) {
  const double m = mean(v);
  if (m == 0.0) throw std::domain_error("cov: zero mean");
  return std::sqrt(sample_variance(v)) / std::abs(m);
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw std::invalid_argument("median: empty sample");
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace calib
