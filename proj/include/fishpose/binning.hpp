#pragma once

#include "fishpose/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace fishpose {

/// Equal-width intervals turning a continuous target into classes. Estimates
/// are recovered as the probability-weighted sum of interval midpoints.
struct BinningSpec {
  int n_bins = 66;
  double bin_width = 3.0;
  double range_min = -99.0;

  /// Euler angles: 66 bins of 3 degrees over [-99, 99].
  static constexpr BinningSpec pose() { return {66, 3.0, -99.0}; }
  /// Polar angle: 72 bins of 5 degrees over [-180, 180].
  static constexpr BinningSpec theta() { return {72, 5.0, -180.0}; }
  /// Normalized radial distance: 66 bins of 0.015 over [0, 0.99].
  static constexpr BinningSpec rho() { return {66, 0.015, 0.0}; }

  double range_max() const { return range_min + n_bins * bin_width; }

  /// Midpoint of 0-based bin i.
  double midpoint(int i) const { return range_min + bin_width * (i + 0.5); }

  Eigen::VectorXd midpoints() const {
    Eigen::VectorXd m(n_bins);
    for (int i = 0; i < n_bins; ++i) m[i] = midpoint(i);
    return m;
  }

  bool contains(double value) const { return value >= range_min && value <= range_max(); }

  /// floor((value - range_min) / bin_width) clamped to the last bin. Throws
  /// std::out_of_range outside [range_min, range_max].
  int label(double value) const {
    if (!contains(value)) throw std::out_of_range("bin label: value outside binning range");
    const int i = static_cast<int>(std::floor((value - range_min) / bin_width));
    return std::clamp(i, 0, n_bins - 1);
  }
};

inline int bin_label(double value, const BinningSpec& spec) { return spec.label(value); }

/// Expectation over bin midpoints of a probability vector.
inline double decode_expectation(const Eigen::VectorXd& probs, const BinningSpec& spec) {
  if (probs.size() != spec.n_bins) throw DimensionError("decode_expectation: probability length mismatch");
  return probs.dot(spec.midpoints());
}

/// Differentiable form of decode_expectation.
inline Tensor expectation(const Tensor& probs, const BinningSpec& spec) {
  if (probs.size() != spec.n_bins) throw DimensionError("expectation: probability length mismatch");
  return dot(probs, Tensor(Shape{spec.n_bins}, spec.midpoints()));
}

}  // namespace fishpose
