#pragma once

#include <Eigen/Core>
#include <Eigen/LU>

#include <algorithm>
#include <array>
#include <cmath>
#include <limits>
#include <numbers>
#include <optional>
#include <stdexcept>

namespace fishpose {

/// Point in normalized image coordinates: the image center is the origin and
/// the four image corners are (±1, ±1). The y axis points up.
template <typename Scalar>
using NormalizedPoint = Eigen::Matrix<Scalar, 2, 1>;

using Point2d = NormalizedPoint<double>;

/// Head location about the image center. theta is counterclockwise, degrees.
struct PolarLocation {
  double theta = 0.0;
  double rho = 0.0;
};

/// Axis-aligned box in normalized coordinates.
struct BoundingBox {
  Point2d center = Point2d::Zero();
  double half_width = 0.0;
  double half_height = 0.0;

  Point2d min_corner() const { return center - Point2d(half_width, half_height); }
  Point2d max_corner() const { return center + Point2d(half_width, half_height); }

  static BoundingBox from_corners(const Point2d& lo, const Point2d& hi) {
    return {(lo + hi) / 2.0, (hi.x() - lo.x()) / 2.0, (hi.y() - lo.y()) / 2.0};
  }
};

/// Pixel extent of an image; converts between pixel-center coordinates
/// (column, row) and normalized coordinates.
struct ImageGeometry {
  int width_px = 1;
  int height_px = 1;

  ImageGeometry(int width, int height) : width_px(width), height_px(height) {
    if (width < 1 || height < 1) throw std::invalid_argument("ImageGeometry: extents must be >= 1");
  }

  /// (col, row) are continuous pixel coordinates; integer values are pixel centers.
  Point2d to_normalized(double col, double row) const {
    const double hw = width_px / 2.0;
    const double hh = height_px / 2.0;
    return {(col + 0.5 - hw) / hw, (hh - row - 0.5) / hh};
  }

  Eigen::Vector2d to_pixel(const Point2d& p) const {
    const double hw = width_px / 2.0;
    const double hh = height_px / 2.0;
    return {p.x() * hw + hw - 0.5, hh - p.y() * hh - 0.5};
  }
};

/// Rectilinear-to-fisheye map. The first stage squeezes the unit square onto
/// the unit disk; the second scales by exp(-r^2/2), r measured after the
/// first stage. Throws std::domain_error outside [-1, 1]^2.
template <typename Scalar>
NormalizedPoint<Scalar> fisheye_forward(const NormalizedPoint<Scalar>& p) {
  using std::abs;
  using std::exp;
  using std::sqrt;
  if (!(abs(p.x()) <= Scalar(1)) || !(abs(p.y()) <= Scalar(1))) {
    throw std::domain_error("fisheye_forward: coordinate outside [-1, 1]");
  }
  const Scalar xs = p.x() * sqrt(Scalar(1) - p.y() * p.y() / Scalar(2));
  const Scalar ys = p.y() * sqrt(Scalar(1) - p.x() * p.x() / Scalar(2));
  const Scalar scale = exp(-(xs * xs + ys * ys) / Scalar(2));
  return {xs * scale, ys * scale};
}

/// Analytic Jacobian of fisheye_forward.
template <typename Scalar>
Eigen::Matrix<Scalar, 2, 2> fisheye_jacobian(const NormalizedPoint<Scalar>& p) {
  using std::exp;
  using std::sqrt;
  const Scalar x = p.x();
  const Scalar y = p.y();
  const Scalar sy = sqrt(Scalar(1) - y * y / Scalar(2));
  const Scalar sx = sqrt(Scalar(1) - x * x / Scalar(2));

  Eigen::Matrix<Scalar, 2, 2> squeeze;
  squeeze << sy, -x * y / (Scalar(2) * sy),
             -x * y / (Scalar(2) * sx), sx;

  const NormalizedPoint<Scalar> u(x * sy, y * sx);
  const Scalar scale = exp(-u.squaredNorm() / Scalar(2));
  const Eigen::Matrix<Scalar, 2, 2> radial =
      scale * (Eigen::Matrix<Scalar, 2, 2>::Identity() - u * u.transpose());
  return radial * squeeze;
}

struct InverseOptions {
  double tol = 1e-6;
  int max_iterations = 50;
};

/// Numerical inverse of fisheye_forward by damped Newton iteration started at
/// q, with iterates clamped to [-1, 1]^2. Returns nullopt when no point of the
/// square maps within opts.tol of q (q lies outside the mapped region).
template <typename Scalar>
std::optional<NormalizedPoint<Scalar>> fisheye_inverse(const NormalizedPoint<Scalar>& q,
                                                       const InverseOptions& opts = {}) {
  using Vec = NormalizedPoint<Scalar>;
  using std::abs;
  if (!(opts.tol > 0.0)) throw std::invalid_argument("fisheye_inverse: tol must be positive");
  const auto clamp_square = [](Vec v) {
    return Vec(std::clamp(v.x(), Scalar(-1), Scalar(1)), std::clamp(v.y(), Scalar(-1), Scalar(1)));
  };

  Vec p = clamp_square(q);
  Vec residual = fisheye_forward(p) - q;
  Scalar err = residual.squaredNorm();

  // Iterate past tol: near the rim the map flattens and a residual of tol can
  // still leave the preimage far from converged.
  constexpr Scalar floor_err = Scalar(1e-30);
  for (int it = 0; it < opts.max_iterations && err > floor_err; ++it) {
    const Eigen::Matrix<Scalar, 2, 2> jac = fisheye_jacobian(p);
    const Scalar det = jac.determinant();
    if (!(abs(det) > Scalar(1e-300))) break;
    const Vec step = -(jac.inverse() * residual);

    Scalar damping = 1;
    bool improved = false;
    for (int ls = 0; ls < 30; ++ls) {
      const Vec trial = clamp_square(p + damping * step);
      const Vec trial_res = fisheye_forward(trial) - q;
      const Scalar trial_err = trial_res.squaredNorm();
      if (trial_err < err) {
        p = trial;
        residual = trial_res;
        err = trial_err;
        improved = true;
        break;
      }
      damping /= 2;
    }
    if (!improved) break;
  }

  if (residual.template lpNorm<Eigen::Infinity>() <= Scalar(opts.tol)) return p;
  return std::nullopt;
}

inline double degrees(double rad) { return rad * 180.0 / std::numbers::pi; }
inline double radians(double deg) { return deg * std::numbers::pi / 180.0; }

/// theta = atan2(y, x) in degrees, rho = |p|. The origin maps to theta 0.
inline PolarLocation to_polar(const Point2d& p) {
  if (p.x() == 0.0 && p.y() == 0.0) return {0.0, 0.0};
  return {degrees(std::atan2(p.y(), p.x())), p.norm()};
}

inline Point2d from_polar(const PolarLocation& l) {
  const double t = radians(l.theta);
  return {l.rho * std::cos(t), l.rho * std::sin(t)};
}

/// Maps a box through fisheye_forward by sampling its boundary (corners plus
/// samples_per_side interior points on each edge) and returns the axis-aligned
/// hull of the mapped samples.
BoundingBox transport_box(const BoundingBox& box, int samples_per_side = 16);

}  // namespace fishpose
