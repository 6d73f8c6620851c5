#include "doctest.h"

#include "fishpose/geometry.hpp"

#include <random>

using namespace fishpose;

namespace {

// Straight transcription of the map in extended precision, kept apart from
// the library template.
std::array<long double, 2> forward_ld(long double x, long double y) {
  const long double xs = x * std::sqrt(1.0L - y * y / 2.0L);
  const long double ys = y * std::sqrt(1.0L - x * x / 2.0L);
  const long double s = std::exp(-(xs * xs + ys * ys) / 2.0L);
  return {xs * s, ys * s};
}

Point2d random_in_disk(std::mt19937_64& rng, double radius = 1.0) {
  std::uniform_real_distribution<double> u(-radius, radius);
  for (;;) {
    Point2d p(u(rng), u(rng));
    if (p.norm() < radius) return p;
  }
}

}  // namespace

TEST_CASE("forward map fixes the center") {
  CHECK(fisheye_forward(Point2d(0, 0)) == Point2d(0, 0));
}

TEST_CASE("forward map at the rim of the x axis is exp(-1/2)") {
  const Point2d q = fisheye_forward(Point2d(1, 0));
  CHECK(q.x() == doctest::Approx(0.6065306597126334236).epsilon(1e-15));
  CHECK(q.y() == 0.0);
}

TEST_CASE("forward map on the diagonal against a multiprecision value") {
  const Point2d q = fisheye_forward(Point2d(0.5, 0.5));
  // 40-digit evaluation
  CHECK(std::abs(q.x() - 0.37581327166041034210) < 1e-12);
  CHECK(std::abs(q.y() - 0.37581327166041034210) < 1e-12);
  const Point2d r = fisheye_forward(Point2d(0.3, -0.7));
  CHECK(std::abs(r.x() - 0.19940016994109665889) < 1e-12);
  CHECK(std::abs(r.y() + 0.52327564221543075972) < 1e-12);
}

TEST_CASE("forward map agrees with an extended-precision transcription") {
  std::mt19937_64 rng(11);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    const Point2d p(u(rng), u(rng));
    const auto ref = forward_ld(p.x(), p.y());
    const Point2d q = fisheye_forward(p);
    CHECK(std::abs(q.x() - static_cast<double>(ref[0])) < 1e-14);
    CHECK(std::abs(q.y() - static_cast<double>(ref[1])) < 1e-14);
  }
}

TEST_CASE("forward map works with long double scalars") {
  const auto q = fisheye_forward(NormalizedPoint<long double>(0.5L, 0.5L));
  CHECK(std::abs(q.x() - forward_ld(0.5L, 0.5L)[0]) < 1e-18L);
}

TEST_CASE("forward map rejects points outside the square") {
  CHECK_THROWS_AS(fisheye_forward(Point2d(1.0000001, 0)), std::domain_error);
  CHECK_THROWS_AS(fisheye_forward(Point2d(0, -1.5)), std::domain_error);
  CHECK_THROWS_AS(fisheye_forward(Point2d(std::nan(""), 0)), std::domain_error);
  CHECK_NOTHROW(fisheye_forward(Point2d(1, -1)));
}

TEST_CASE("radial compression holds everywhere and is strict away from the center") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 5000; ++i) {
    const Point2d p(u(rng), u(rng));
    CHECK(fisheye_forward(p).norm() < p.norm());
  }
}

TEST_CASE("forward map commutes with the symmetries of the square") {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  for (int i = 0; i < 500; ++i) {
    const Point2d p(u(rng), u(rng));
    const Point2d q = fisheye_forward(p);
    for (int sx : {-1, 1}) {
      for (int sy : {-1, 1}) {
        const Point2d a = fisheye_forward(Point2d(sx * p.x(), sy * p.y()));
        CHECK(a.x() == sx * q.x());
        CHECK(a.y() == sy * q.y());
        const Point2d b = fisheye_forward(Point2d(sy * p.y(), sx * p.x()));
        // swapping axes reorders a floating-point sum
        CHECK(std::abs(b.x() - sy * q.y()) < 1e-15);
        CHECK(std::abs(b.y() - sx * q.x()) < 1e-15);
      }
    }
  }
}

TEST_CASE("the x axis is mapped monotonically") {
  double prev = -1.0;
  for (int i = 0; i < 1000; ++i) {
    const double x = i / 1000.0;
    const double v = fisheye_forward(Point2d(x, 0)).x();
    CHECK(v > prev);
    prev = v;
  }
}

TEST_CASE("analytic jacobian matches central differences") {
  std::mt19937_64 rng(8);
  for (int i = 0; i < 200; ++i) {
    const Point2d p = random_in_disk(rng, 0.95);
    const Eigen::Matrix2d j = fisheye_jacobian(p);
    const double h = 1e-6;
    for (int c = 0; c < 2; ++c) {
      Point2d dp = Point2d::Zero();
      dp[c] = h;
      const Point2d col = (fisheye_forward<double>(p + dp) - fisheye_forward<double>(p - dp)) / (2 * h);
      CHECK((j.col(c) - col).lpNorm<Eigen::Infinity>() < 1e-8);
    }
  }
}

TEST_CASE("inverse map") {
  SUBCASE("center") {
    const auto p = fisheye_inverse(Point2d(0, 0));
    REQUIRE(p);
    CHECK(p->norm() == 0.0);
  }
  SUBCASE("rim of the x axis") {
    const auto p = fisheye_inverse(Point2d(std::exp(-0.5), 0));
    REQUIRE(p);
    CHECK(std::abs(p->x() - 1.0) < 1e-6);
    CHECK(std::abs(p->y()) < 1e-12);
  }
  SUBCASE("rounded example value") {
    const auto p = fisheye_inverse(Point2d(0.606531, 0));
    REQUIRE(p);
    CHECK(std::abs(fisheye_forward(*p).x() - 0.606531) <= 1e-6);
  }
  SUBCASE("round trip") {
    std::mt19937_64 rng(21);
    for (int i = 0; i < 2000; ++i) {
      const Point2d p = random_in_disk(rng);
      const auto back = fisheye_inverse(fisheye_forward(p));
      REQUIRE(back);
      CHECK((*back - p).lpNorm<Eigen::Infinity>() < 1e-6);
    }
  }
  SUBCASE("residual bound on the whole square") {
    std::mt19937_64 rng(22);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    for (int i = 0; i < 2000; ++i) {
      const Point2d q = fisheye_forward(Point2d(u(rng), u(rng)));
      const auto p = fisheye_inverse(q);
      REQUIRE(p);
      CHECK((fisheye_forward(*p) - q).lpNorm<Eigen::Infinity>() <= 1e-6);
    }
  }
  SUBCASE("points outside the mapped region fail") {
    // the image of the square stays inside radius exp(-1/2) along the axes
    CHECK_FALSE(fisheye_inverse(Point2d(0.7, 0)));
    CHECK_FALSE(fisheye_inverse(Point2d(0.9, 0.9)));
  }
  SUBCASE("tolerance must be positive") {
    CHECK_THROWS_AS(fisheye_inverse(Point2d(0.1, 0.1), {0.0, 50}), std::invalid_argument);
  }
}

TEST_CASE("polar conversion") {
  const PolarLocation o = to_polar(Point2d(0, 0));
  CHECK(o.theta == 0.0);
  CHECK(o.rho == 0.0);

  const PolarLocation up = to_polar(Point2d(0, 0.5));
  CHECK(up.theta == doctest::Approx(90.0));
  CHECK(up.rho == doctest::Approx(0.5));

  CHECK(to_polar(Point2d(-0.3, 0)).theta == doctest::Approx(180.0));
  CHECK(to_polar(Point2d(0, -0.3)).theta == doctest::Approx(-90.0));

  std::mt19937_64 rng(4);
  for (int i = 0; i < 1000; ++i) {
    const Point2d p = random_in_disk(rng);
    const Point2d back = from_polar(to_polar(p));
    CHECK((back - p).lpNorm<Eigen::Infinity>() < 1e-14);
    const PolarLocation l = to_polar(p);
    CHECK(l.theta >= -180.0);
    CHECK(l.theta <= 180.0);
  }
}

TEST_CASE("image geometry") {
  const ImageGeometry g(200, 100);
  const Point2d tl = g.to_normalized(-0.5, -0.5);
  CHECK(tl.x() == doctest::Approx(-1.0));
  CHECK(tl.y() == doctest::Approx(1.0));
  const Point2d c = g.to_normalized(99.5, 49.5);
  CHECK(c.norm() == doctest::Approx(0.0));
  const Eigen::Vector2d px = g.to_pixel(g.to_normalized(17.0, 63.0));
  CHECK(px.x() == doctest::Approx(17.0));
  CHECK(px.y() == doctest::Approx(63.0));
  CHECK_THROWS_AS(ImageGeometry(0, 5), std::invalid_argument);
}

TEST_CASE("box transport") {
  SUBCASE("tiny box at the center stays put") {
    const BoundingBox b{Point2d::Zero(), 1e-9, 1e-9};
    const BoundingBox t = transport_box(b);
    CHECK(t.center.norm() < 1e-20);
    CHECK(t.half_width == doctest::Approx(1e-9).epsilon(1e-6));
  }
  SUBCASE("centered boxes never grow") {
    std::mt19937_64 rng(9);
    std::uniform_real_distribution<double> u(0.01, 1.0);
    for (int i = 0; i < 1000; ++i) {
      const BoundingBox b{Point2d::Zero(), u(rng), u(rng)};
      const BoundingBox t = transport_box(b);
      CHECK(t.half_width <= b.half_width);
      CHECK(t.half_height <= b.half_height);
      CHECK(t.center.norm() < 1e-15);
    }
  }
  SUBCASE("off-center box matches a dense boundary hull") {
    std::mt19937_64 rng(10);
    std::uniform_real_distribution<double> u(-0.6, 0.6), e(0.05, 0.35);
    for (int i = 0; i < 20; ++i) {
      const BoundingBox b{Point2d(u(rng), u(rng)), e(rng), e(rng)};
      const BoundingBox t = transport_box(b);
      Point2d lo = Point2d::Constant(1e9), hi = Point2d::Constant(-1e9);
      const Point2d a = b.min_corner(), z = b.max_corner();
      const int n = 1000;
      for (int k = 0; k <= n; ++k) {
        const double s = static_cast<double>(k) / n;
        for (const Point2d& p : {Point2d(a.x() + s * (z.x() - a.x()), a.y()), Point2d(a.x() + s * (z.x() - a.x()), z.y()),
                                 Point2d(a.x(), a.y() + s * (z.y() - a.y())), Point2d(z.x(), a.y() + s * (z.y() - a.y()))}) {
          const Point2d q = fisheye_forward(p);
          lo = lo.cwiseMin(q);
          hi = hi.cwiseMax(q);
        }
      }
      CHECK((t.min_corner() - lo).lpNorm<Eigen::Infinity>() < 1e-4);
      CHECK((hi - t.max_corner()).lpNorm<Eigen::Infinity>() < 1e-4);
    }
  }
  SUBCASE("boxes leaving the square are rejected") {
    CHECK_THROWS_AS(transport_box(BoundingBox{Point2d(0.9, 0), 0.2, 0.1}), std::domain_error);
  }
}
