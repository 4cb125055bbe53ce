#include <doctest.h>

#include <random>

#include "cvthead/camera/camera.hpp"
#include "cvthead/errors.hpp"

using namespace cvthead;
using namespace cvthead::camera;

TEST_CASE("project follows the image-down convention") {
  const auto p = project(0.5f, -0.25f, 0.1f, {});
  CHECK(p.u == 0.5f);
  CHECK(p.v == 0.25f);
  CHECK(p.d == 0.1f);

  const auto q = project(0.5f, -0.25f, 0.1f, {2.0f, 0.0f, 0.0f});
  CHECK(q.u == 1.0f);
  CHECK(q.v == 0.5f);
  CHECK(q.d == 0.1f);

  const auto t = project(0.5f, -0.25f, 0.1f, {1.0f, 0.1f, 0.0f});
  CHECK(t.u == doctest::Approx(0.6f));
  CHECK(t.v == 0.25f);
  CHECK(t.d == 0.1f);
}

TEST_CASE("to_pixel addressing and culling") {
  CHECK(to_pixel(-1.0f, -1.0f, 256, 256) == Pixel{0, 0});
  CHECK(to_pixel(0.0f, 0.0f, 256, 256) == Pixel{128, 128});
  CHECK_FALSE(to_pixel(1.0f, 0.0f, 256, 256).has_value());
  CHECK_FALSE(to_pixel(0.0f, 1.0f, 256, 256).has_value());
  CHECK_FALSE(to_pixel(-1.0001f, 0.0f, 256, 256).has_value());
  CHECK(to_pixel(0.99999f, 0.99999f, 16, 16) == Pixel{15, 15});
  CHECK(to_pixel(0.0f, 0.0f, 1, 1) == Pixel{0, 0});
  CHECK_THROWS_AS(to_pixel(0.0f, 0.0f, 0, 4), ShapeError);
}

TEST_CASE("project is affine on dyadic inputs") {
  // Dyadic values keep every intermediate exact in float.
  std::mt19937 rng(7);
  auto dy = [&] { return static_cast<float>(static_cast<int>(rng() % 64) - 32) / 64.0f; };
  for (int trial = 0; trial < 200; ++trial) {
    const CameraParams c{0.5f + static_cast<float>(rng() % 8) / 8.0f, dy(), dy()};
    const float k1[3] = {dy(), dy(), dy()}, k2[3] = {dy(), dy(), dy()};
    const float a = 0.25f;
    const auto pm = project(a * k1[0] + (1 - a) * k2[0], a * k1[1] + (1 - a) * k2[1], a * k1[2] + (1 - a) * k2[2], c);
    const auto p1 = project(k1[0], k1[1], k1[2], c), p2 = project(k2[0], k2[1], k2[2], c);
    CHECK(pm.u == a * p1.u + (1 - a) * p2.u);
    CHECK(pm.v == a * p1.v + (1 - a) * p2.v);
    CHECK(pm.d == a * p1.d + (1 - a) * p2.d);
    // Depth never depends on the camera.
    CHECK(p1.d == k1[2]);
  }
}

TEST_CASE("camera validation") {
  CHECK_NOTHROW(CameraParams{}.validate());
  CHECK_THROWS_AS((CameraParams{0.0f, 0.0f, 0.0f}.validate()), InvariantError);
  CHECK_THROWS_AS((CameraParams{-1.0f, 0.0f, 0.0f}.validate()), InvariantError);
  CHECK_THROWS_AS((CameraParams{1.0f, std::numeric_limits<float>::quiet_NaN(), 0.0f}.validate()), InvariantError);
}
