#include <cmath>

#include "doctest.h"
#include "emib/geometry.hpp"
#include "emib/masking.hpp"
#include "emib/rng.hpp"

using namespace emib;

namespace {
constexpr double kPi = 3.14159265358979323846;

// independent oracle: build the 3-vectors from the convention formula inline
// and take acos of the dot product
double angle_oracle_deg(const GazeDirection& a, const GazeDirection& b) {
  const double ax = -std::cos(a.pitch) * std::sin(a.yaw);
  const double ay = -std::sin(a.pitch);
  const double az = -std::cos(a.pitch) * std::cos(a.yaw);
  const double bx = -std::cos(b.pitch) * std::sin(b.yaw);
  const double by = -std::sin(b.pitch);
  const double bz = -std::cos(b.pitch) * std::cos(b.yaw);
  double dot = ax * bx + ay * by + az * bz;
  dot = std::min(1.0, std::max(-1.0, dot));
  return std::acos(dot) * 180.0 / kPi;
}

GazeDirection random_gaze(Rng& rng) {
  return {rng.uniform(-kPi / 2 + 1e-6, kPi / 2 - 1e-6), rng.uniform(-kPi, kPi)};
}
}  // namespace

TEST_SUITE_BEGIN("geometry");

TEST_CASE("pitchyaw_to_vector fixed points") {
  auto v = pitchyaw_to_vector({0, 0});
  CHECK(v.x == doctest::Approx(0).epsilon(1e-12));
  CHECK(v.y == doctest::Approx(0).epsilon(1e-12));
  CHECK(v.z == doctest::Approx(-1).epsilon(1e-12));

  v = pitchyaw_to_vector({0, kPi / 2});
  CHECK(v.x == doctest::Approx(-1));
  CHECK(std::fabs(v.y) < 1e-12);
  CHECK(std::fabs(v.z) < 1e-9);

  v = pitchyaw_to_vector({kPi / 2, 0});
  CHECK(std::fabs(v.x) < 1e-9);
  CHECK(v.y == doctest::Approx(-1));
  CHECK(std::fabs(v.z) < 1e-9);
}

TEST_CASE("pitchyaw_to_vector rejects out-of-range angles") {
  CHECK_THROWS_AS(pitchyaw_to_vector({kPi, 0}), std::domain_error);
  CHECK_THROWS_AS(pitchyaw_to_vector({0, 4.0}), std::domain_error);
}

TEST_CASE("unit norm over random inputs") {
  Rng rng(7);
  for (int i = 0; i < 10000; ++i) {
    const Vec3 v = pitchyaw_to_vector(random_gaze(rng));
    const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
    REQUIRE(std::fabs(n - 1.0) < 1e-9);
  }
}

TEST_CASE("round trip through vector form") {
  Rng rng(11);
  for (int i = 0; i < 2000; ++i) {
    GazeDirection g{rng.uniform(-kPi / 2 + 1e-3, kPi / 2 - 1e-3),
                    rng.uniform(-kPi + 1e-6, kPi - 1e-6)};
    const GazeDirection back = vector_to_pitchyaw(pitchyaw_to_vector(g));
    REQUIRE(std::fabs(back.pitch - g.pitch) < 1e-9);
    REQUIRE(std::fabs(back.yaw - g.yaw) < 1e-9);
  }
}

TEST_CASE("angular error fixed cases") {
  CHECK(angular_error_deg({0.3, -0.4}, {0.3, -0.4}) == doctest::Approx(0.0));
  CHECK(angular_error_deg({0, 0}, {0, kPi / 2}) == doctest::Approx(90.0));
}

TEST_CASE("angular error matches the dot-product oracle on 1000 random pairs") {
  Rng rng(13);
  for (int i = 0; i < 1000; ++i) {
    const GazeDirection a = random_gaze(rng);
    const GazeDirection b = random_gaze(rng);
    const double got = angular_error_deg(a, b);
    const double want = angle_oracle_deg(a, b);
    REQUIRE(std::fabs(got - want) < 1e-6);
    REQUIRE(got == angular_error_deg(b, a));  // symmetry
    REQUIRE(got >= 0.0);
    REQUIRE(got <= 180.0);
  }
}

TEST_CASE("triangle inequality on random triples") {
  Rng rng(17);
  for (int i = 0; i < 1000; ++i) {
    const GazeDirection a = random_gaze(rng), b = random_gaze(rng), c = random_gaze(rng);
    REQUIRE(angular_error_deg(a, c) <=
            angular_error_deg(a, b) + angular_error_deg(b, c) + 1e-6);
  }
}

TEST_CASE("head rotation maps straight-ahead to the head direction") {
  Rng rng(23);
  for (int i = 0; i < 200; ++i) {
    const HeadPose h{rng.uniform(-0.5, 0.5), rng.uniform(-0.5, 0.5)};
    const Vec3 v = rotate_by_head(h, {0, 0, -1});
    const Vec3 want = pitchyaw_to_vector({h.pitch, h.yaw});
    REQUIRE(std::fabs(v.x - want.x) < 1e-12);
    REQUIRE(std::fabs(v.y - want.y) < 1e-12);
    REQUIRE(std::fabs(v.z - want.z) < 1e-12);
    // inverse undoes it
    const Vec3 back = rotate_by_head_inverse(h, v);
    REQUIRE(std::fabs(back.z + 1.0) < 1e-12);
  }
}

TEST_CASE("eye windows at the full config") {
  const PatchGrid grid{224, 16};
  // centers (56,56) and (168,56); 3x4 windows
  const std::array<PixelPoint, 4> corners = {
      PixelPoint{40, 56}, PixelPoint{72, 56}, PixelPoint{152, 56}, PixelPoint{184, 56}};
  const EyeRegion r = eye_patch_windows(corners, grid, 3, 4);
  REQUIRE(r.left.size() == 12);
  REQUIRE(r.right.size() == 12);
  // anchor (row 3, col 3): rows {2,3,4} x cols {1,2,3,4}
  std::vector<int> want;
  for (int rr = 2; rr <= 4; ++rr)
    for (int cc = 1; cc <= 4; ++cc) want.push_back(rr * 14 + cc);
  CHECK(r.left == want);
}

TEST_CASE("eye window clamps at the image corner") {
  const PatchGrid grid{224, 16};
  const std::array<PixelPoint, 4> corners = {
      PixelPoint{4, 8}, PixelPoint{12, 8}, PixelPoint{150, 8}, PixelPoint{182, 8}};
  const EyeRegion r = eye_patch_windows(corners, grid, 3, 4);
  // center (8,8): shifted to rows {0,1,2} x cols {0,1,2,3}
  std::vector<int> want;
  for (int rr = 0; rr <= 2; ++rr)
    for (int cc = 0; cc <= 3; ++cc) want.push_back(rr * 14 + cc);
  CHECK(r.left == want);
  CHECK(r.left.size() == 12);  // size preserved under clamping
}

TEST_CASE("desk config windows cover 12.5% of the grid") {
  const PatchGrid grid{64, 8};
  const std::array<PixelPoint, 4> corners = {
      PixelPoint{16, 24}, PixelPoint{24, 24}, PixelPoint{40, 24}, PixelPoint{48, 24}};
  const EyeRegion r = eye_patch_windows(corners, grid, 2, 2);
  CHECK(r.left == std::vector<int>{25, 26, 33, 34});
  CHECK(r.right == std::vector<int>{28, 29, 36, 37});
  CHECK(r.total() == 8);
  CHECK(static_cast<double>(r.total()) / grid.n_patches() == doctest::Approx(0.125));
}

TEST_CASE("windows keep exact cardinality anywhere in bounds") {
  const PatchGrid grid{64, 8};
  Rng rng(31);
  for (int i = 0; i < 500; ++i) {
    const double xl = rng.uniform(0, 30), yl = rng.uniform(0, 63.9);
    const double xr = rng.uniform(34, 63.9), yr = rng.uniform(0, 63.9);
    const std::array<PixelPoint, 4> corners = {PixelPoint{xl, yl}, PixelPoint{xl, yl},
                                               PixelPoint{xr, yr}, PixelPoint{xr, yr}};
    EyeRegion r;
    try {
      r = eye_patch_windows(corners, grid, 2, 2);
    } catch (const std::domain_error&) {
      continue;  // overlapping windows are rejected, not mis-sized
    }
    REQUIRE(r.left.size() == 4);
    REQUIRE(r.right.size() == 4);
    for (int idx : r.all()) REQUIRE(idx >= 0);
    for (int idx : r.all()) REQUIRE(idx < grid.n_patches());
  }
}

TEST_CASE("window larger than the grid is a config error") {
  const PatchGrid grid{64, 8};
  const std::array<PixelPoint, 4> corners = {
      PixelPoint{16, 24}, PixelPoint{24, 24}, PixelPoint{40, 24}, PixelPoint{48, 24}};
  CHECK_THROWS_AS(eye_patch_windows(corners, grid, 9, 2), ConfigError);
  CHECK_THROWS_AS(eye_patch_windows(corners, grid, 2, 9), ConfigError);
}

TEST_SUITE_END();
