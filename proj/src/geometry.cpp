#include "fishpose/geometry.hpp"

namespace fishpose {

BoundingBox transport_box(const BoundingBox& box, int samples_per_side) {
  if (!(box.half_width >= 0.0) || !(box.half_height >= 0.0)) {
    throw std::invalid_argument("transport_box: negative extent");
  }
  const Point2d lo = box.min_corner();
  const Point2d hi = box.max_corner();
  Point2d out_lo = Point2d::Constant(std::numeric_limits<double>::infinity());
  Point2d out_hi = -out_lo;

  const auto visit = [&](const Point2d& p) {
    const Point2d q = fisheye_forward(p);
    out_lo = out_lo.cwiseMin(q);
    out_hi = out_hi.cwiseMax(q);
  };

  const std::array<Point2d, 4> corners = {lo, Point2d(hi.x(), lo.y()), hi, Point2d(lo.x(), hi.y())};
  for (std::size_t k = 0; k < corners.size(); ++k) {
    const Point2d& a = corners[k];
    const Point2d& b = corners[(k + 1) % corners.size()];
    visit(a);
    for (int i = 1; i <= samples_per_side; ++i) {
      const double t = static_cast<double>(i) / (samples_per_side + 1);
      visit(a + t * (b - a));
    }
  }
  return BoundingBox::from_corners(out_lo, out_hi);
}

}  // namespace fishpose
