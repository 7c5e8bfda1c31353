#pragma once

#include <algorithm>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace greip {

// Cubic Hermite interpolation through (xs, ys) with Catmull-Rom style
// finite-difference tangents, valid on non-uniform grids. Reproduces
// constant and linear data exactly, which the resampling round-trip
// guarantees rely on. Queries are clamped to the knot range.
class CubicInterpolant {
 public:
  CubicInterpolant(std::vector<double> xs, std::vector<double> ys)
      : xs_(std::move(xs)), ys_(std::move(ys)) {
    const std::size_t n = xs_.size();
    if (n < 2 || ys_.size() != n)
      throw std::invalid_argument("cubic interpolation needs >= 2 matched knots");
    for (std::size_t i = 1; i < n; ++i)
      if (!(xs_[i] > xs_[i - 1]))
        throw std::invalid_argument("cubic interpolation knots must increase");
    tangents_.resize(n);
    tangents_[0] = (ys_[1] - ys_[0]) / (xs_[1] - xs_[0]);
    tangents_[n - 1] = (ys_[n - 1] - ys_[n - 2]) / (xs_[n - 1] - xs_[n - 2]);
    for (std::size_t i = 1; i + 1 < n; ++i)
      tangents_[i] = (ys_[i + 1] - ys_[i - 1]) / (xs_[i + 1] - xs_[i - 1]);
  }

  double operator()(double x) const {
    if (x <= xs_.front()) return ys_.front();
    if (x >= xs_.back()) return ys_.back();
    const std::size_t hi = static_cast<std::size_t>(
        std::upper_bound(xs_.begin(), xs_.end(), x) - xs_.begin());
    const std::size_t i = hi - 1;
    const double h = xs_[i + 1] - xs_[i];
    const double t = (x - xs_[i]) / h;
    const double t2 = t * t;
    const double t3 = t2 * t;
    return (2.0 * t3 - 3.0 * t2 + 1.0) * ys_[i] +
           (t3 - 2.0 * t2 + t) * h * tangents_[i] +
           (-2.0 * t3 + 3.0 * t2) * ys_[i + 1] +
           (t3 - t2) * h * tangents_[i + 1];
  }

 private:
  std::vector<double> xs_;
  std::vector<double> ys_;
  std::vector<double> tangents_;
};

inline std::vector<double> resample_cubic(const std::vector<double>& xs,
                                          const std::vector<double>& ys,
                                          const std::vector<double>& queries) {
  CubicInterpolant ci(xs, ys);
  std::vector<double> out(queries.size());
  for (std::size_t i = 0; i < queries.size(); ++i) out[i] = ci(queries[i]);
  return out;
}

}  // namespace greip
