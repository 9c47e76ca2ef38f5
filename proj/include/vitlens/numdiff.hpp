#pragma once

// Central finite differences used to check hand-derived gradients.

#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace vitlens::numdiff {

/// (f(x + h) - f(x - h)) / 2h
inline double central(const std::function<double(double)>& f, double x, double h) {
  return (f(x + h) - f(x - h)) / (2.0 * h);
}

/// Gradient of f at x, one coordinate at a time.
inline std::vector<double> gradient(
    const std::function<double(const std::vector<double>&)>& f,
    std::vector<double> x, double h) {
  std::vector<double> g(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double plus = f(x);
    x[i] = saved - h;
    const double minus = f(x);
    x[i] = saved;
    g[i] = (plus - minus) / (2.0 * h);
  }
  return g;
}

/// |a - b| / max(|a|, |b|); zero when both are zero.
inline double relative_error(double a, double b) {
  const double scale = std::max(std::abs(a), std::abs(b));
  return scale == 0.0 ? 0.0 : std::abs(a - b) / scale;
}

}  // namespace vitlens::numdiff
