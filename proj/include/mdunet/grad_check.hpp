#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace mdunet {

struct GradCheckReport {
  double max_relative_error = 0.0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

/// Relative error with denominator max(|a|, |b|, 1e-8).
inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
  return std::abs(analytic - numeric) / denom;
}

/// Compares `analytic` against central differences of `loss` taken by
/// perturbing `x` in place. `x` is restored before returning.
template <typename T>
GradCheckReport grad_check(const std::function<double()>& loss, std::span<T> x, std::span<const T> analytic,
                           double eps) {
  GradCheckReport report;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const T saved = x[i];
    x[i] = static_cast<T>(static_cast<double>(saved) + eps);
    const double up = loss();
    x[i] = static_cast<T>(static_cast<double>(saved) - eps);
    const double down = loss();
    x[i] = saved;
    const double numeric = (up - down) / (2.0 * eps);
    const double err = relative_error(static_cast<double>(analytic[i]), numeric);
    if (i == 0 || err > report.max_relative_error) {
      report.max_relative_error = err;
      report.worst_index = i;
      report.worst_analytic = static_cast<double>(analytic[i]);
      report.worst_numeric = numeric;
    }
  }
  return report;
}

}  // namespace mdunet
