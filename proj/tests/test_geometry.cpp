#include "detlens/geometry.hpp"

#include <doctest.h>

#include <limits>
#include <random>

using namespace detlens;

namespace {

// Pixel-counting oracle for integer-coordinate boxes.
double raster_iou(const BBox& a, const BBox& b) {
  long inter = 0, uni = 0;
  const long lo_x = static_cast<long>(std::min(a.x1, b.x1)), hi_x = static_cast<long>(std::max(a.x2, b.x2));
  const long lo_y = static_cast<long>(std::min(a.y1, b.y1)), hi_y = static_cast<long>(std::max(a.y2, b.y2));
  for (long y = lo_y; y < hi_y; ++y) {
    for (long x = lo_x; x < hi_x; ++x) {
      const bool in_a = x >= a.x1 && x < a.x2 && y >= a.y1 && y < a.y2;
      const bool in_b = x >= b.x1 && x < b.x2 && y >= b.y1 && y < b.y2;
      inter += in_a && in_b;
      uni += in_a || in_b;
    }
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

BBox random_box(std::mt19937_64& rng, double extent) {
  std::uniform_real_distribution<double> u(-extent, extent);
  double x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {x1, y1, x2, y2};
}

BBox random_int_box(std::mt19937_64& rng, int limit) {
  std::uniform_int_distribution<int> u(0, limit);
  int x1 = u(rng), x2 = u(rng), y1 = u(rng), y2 = u(rng);
  if (x1 > x2) std::swap(x1, x2);
  if (y1 > y2) std::swap(y1, y2);
  return {double(x1), double(y1), double(x2), double(y2)};
}

}  // namespace

TEST_CASE("iou examples") {
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{0, 0, 10, 10}) == 1.0);
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{20, 20, 30, 30}) == 0.0);
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  CHECK(raster_iou(BBox{0, 0, 10, 10}, BBox{5, 0, 15, 10}) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("iou of two zero-area boxes is zero") {
  CHECK(iou(BBox{3, 3, 3, 3}, BBox{3, 3, 3, 3}) == 0.0);
  CHECK(iou(BBox{0, 0, 0, 5}, BBox{0, 0, 4, 5}) == 0.0);
}

TEST_CASE("iou is symmetric, bounded and reflexive") {
  std::mt19937_64 rng(1);
  for (int i = 0; i < 10000; ++i) {
    const BBox a = random_box(rng, 100.0), b = random_box(rng, 100.0);
    const double ab = iou(a, b);
    REQUIRE(ab == iou(b, a));
    REQUIRE(ab >= 0.0);
    REQUIRE(ab <= 1.0);
    if (a.area() > 0) REQUIRE(iou(a, a) == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("iou agrees with the raster oracle") {
  std::mt19937_64 rng(2);
  for (int i = 0; i < 400; ++i) {
    const BBox a = random_int_box(rng, 100), b = random_int_box(rng, 100);
    REQUIRE(std::abs(iou(a, b) - raster_iou(a, b)) < 1e-9);
  }
}

TEST_CASE("iou is invariant under translation and uniform scaling") {
  std::mt19937_64 rng(3);
  for (int i = 0; i < 1000; ++i) {
    const BBox a = random_box(rng, 50.0), b = random_box(rng, 50.0);
    CHECK(iou(a.translated(17.0, -4.0), b.translated(17.0, -4.0)) == doctest::Approx(iou(a, b)).epsilon(1e-9));
    CHECK(iou(a.scaled(3.0), b.scaled(3.0)) == doctest::Approx(iou(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("float boxes share the same arithmetic") {
  const Box<float> a{0, 0, 10, 10}, b{5, 0, 15, 10};
  CHECK(iou(a, b) == doctest::Approx(1.0f / 3.0f));
}

TEST_CASE("clamp_box examples") {
  CHECK(clamp_box(BBox{-12, 87, 451, 1325}, 1280.0, 960.0).box == BBox{0, 87, 451, 960});
  CHECK(clamp_box(BBox{608, 61, 758, 444}, 1280.0, 960.0).box == BBox{608, 61, 758, 444});
  CHECK(clamp_box(BBox{-50, 35, 531, 131}, 1280.0, 960.0).box == BBox{0, 35, 531, 131});
  CHECK_FALSE(clamp_box(BBox{-50, 35, 531, 131}, 1280.0, 960.0).degenerate);
}

TEST_CASE("clamp_box flags boxes entirely outside") {
  const auto c = clamp_box(BBox{-10, -10, -1, -1}, 100.0, 100.0);
  CHECK(c.degenerate);
  CHECK(c.box == BBox{0, 0, 0, 0});
  CHECK(c.box.is_valid());
  const auto right = clamp_box(BBox{120, 10, 150, 20}, 100.0, 100.0);
  CHECK(right.degenerate);
  CHECK(right.box == BBox{100, 10, 100, 20});
}

TEST_CASE("clamp_box rejects empty images") {
  CHECK_THROWS_AS(clamp_box(BBox{0, 0, 1, 1}, 0.0, 10.0), std::invalid_argument);
  CHECK_THROWS_AS(box_inside(BBox{0, 0, 1, 1}, 10.0, -1.0), std::invalid_argument);
}

TEST_CASE("clamp_box is idempotent and lands inside") {
  std::mt19937_64 rng(4);
  for (int i = 0; i < 10000; ++i) {
    const BBox b = random_box(rng, 300.0);
    const auto once = clamp_box(b, 160.0, 120.0);
    REQUIRE(box_inside(once.box, 160.0, 120.0));
    REQUIRE(clamp_box(once.box, 160.0, 120.0).box == once.box);
    if (box_inside(b, 160.0, 120.0)) REQUIRE(once.box == b);
  }
}

TEST_CASE("box_inside examples") {
  CHECK(box_inside(BBox{608, 61, 758, 444}, 1280.0, 960.0));
  CHECK_FALSE(box_inside(BBox{-50, 35, 531, 131}, 1280.0, 960.0));
  CHECK_FALSE(box_inside(BBox{499, 171, 988, 1201}, 1280.0, 960.0));
  CHECK(box_inside(BBox{0, 0, 1280, 960}, 1280.0, 960.0));
}

TEST_CASE("from_xywh converts to corners") { CHECK(from_xywh(10.0, 20.0, 30.0, 40.0) == BBox{10, 20, 40, 60}); }

TEST_CASE("box validation") {
  CHECK_NOTHROW(validate(BBox{0, 0, 0, 0}));
  CHECK_THROWS_AS(validate(BBox{5, 0, 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(validate(BBox{0, std::numeric_limits<double>::quiet_NaN(), 1, 1}), std::invalid_argument);
  CHECK_THROWS_AS(validate(BBox{0, 0, std::numeric_limits<double>::infinity(), 1}), std::invalid_argument);
}

TEST_CASE("detection validation") {
  CHECK_NOTHROW(validate(Detection{{0, 0, 1, 1}, 0.3, std::nullopt}));
  CHECK_NOTHROW(validate(Detection{{0, 0, 1, 1}, 1.0, std::vector<double>{0.2, 0.8}}));
  CHECK_THROWS_AS(validate(Detection{{0, 0, 1, 1}, 1.2, std::nullopt}), std::invalid_argument);
  CHECK_THROWS_AS(validate(Detection{{0, 0, 1, 1}, 0.5, std::vector<double>{-0.1}}), std::invalid_argument);
  CHECK_THROWS_AS(validate(Detection{{2, 0, 1, 1}, 0.5, std::nullopt}), std::invalid_argument);
}
