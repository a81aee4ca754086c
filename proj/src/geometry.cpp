#include "emib/geometry.hpp"

#include <algorithm>
#include <cmath>

#include "emib/masking.hpp"

namespace emib {

namespace {
constexpr double kPi = 3.14159265358979323846;

void check_angles(double pitch, double yaw, const char* who) {
  if (!(pitch >= -kPi / 2 && pitch <= kPi / 2))
    throw std::domain_error(std::string(who) + ": pitch outside [-pi/2, pi/2]");
  if (!(yaw >= -kPi && yaw <= kPi))
    throw std::domain_error(std::string(who) + ": yaw outside [-pi, pi]");
}
}  // namespace

std::vector<int> EyeRegion::all() const {
  std::vector<int> out;
  out.reserve(left.size() + right.size());
  out.insert(out.end(), left.begin(), left.end());
  out.insert(out.end(), right.begin(), right.end());
  std::sort(out.begin(), out.end());
  return out;
}

Vec3 pitchyaw_to_vector(const GazeDirection& g) {
  check_angles(g.pitch, g.yaw, "pitchyaw_to_vector");
  const double cp = std::cos(g.pitch);
  return {-cp * std::sin(g.yaw), -std::sin(g.pitch), -cp * std::cos(g.yaw)};
}

GazeDirection vector_to_pitchyaw(const Vec3& v) {
  const double n = std::sqrt(v.x * v.x + v.y * v.y + v.z * v.z);
  if (n < 1e-12) throw std::domain_error("vector_to_pitchyaw: zero vector");
  GazeDirection g;
  g.pitch = std::asin(std::clamp(-v.y / n, -1.0, 1.0));
  g.yaw = std::atan2(-v.x, -v.z);
  return g;
}

double angular_error_deg(const GazeDirection& a, const GazeDirection& b) {
  const Vec3 va = pitchyaw_to_vector(a);
  const Vec3 vb = pitchyaw_to_vector(b);
  const double dot = va.x * vb.x + va.y * vb.y + va.z * vb.z;
  return std::acos(std::clamp(dot, -1.0, 1.0)) * 180.0 / kPi;
}

// R(head) = R_y(yaw) * R_x(-pitch); maps (0,0,-1) to pitchyaw_to_vector(head).
Vec3 rotate_by_head(const HeadPose& head, const Vec3& v) {
  const double cp = std::cos(head.pitch), sp = std::sin(head.pitch);
  const double cy = std::cos(head.yaw), sy = std::sin(head.yaw);
  // R_x(-pitch)
  const double y1 = v.y * cp + v.z * sp;
  const double z1 = -v.y * sp + v.z * cp;
  // R_y(yaw)
  return {v.x * cy + z1 * sy, y1, -v.x * sy + z1 * cy};
}

Vec3 rotate_by_head_inverse(const HeadPose& head, const Vec3& v) {
  const double cp = std::cos(head.pitch), sp = std::sin(head.pitch);
  const double cy = std::cos(head.yaw), sy = std::sin(head.yaw);
  // R_y(-yaw)
  const double x1 = v.x * cy - v.z * sy;
  const double z1 = v.x * sy + v.z * cy;
  // R_x(pitch)
  return {x1, v.y * cp - z1 * sp, v.y * sp + z1 * cp};
}

namespace {
// rows x cols window around anchor (r0, c0), shifted to fit the grid.
// Height anchors floor((rows-1)/2) above; even widths hang the extra column
// to the left: span is [c0 - floor(cols/2), c0 + ceil(cols/2) - 1].
void window_span(int anchor, int extent, int grid_extent, bool is_col, int* lo) {
  int start = is_col ? anchor - extent / 2 : anchor - (extent - 1) / 2;
  start = std::clamp(start, 0, grid_extent - extent);
  *lo = start;
}

std::vector<int> one_eye_window(const PixelPoint& a, const PixelPoint& b,
                                const PatchGrid& grid, int rows, int cols) {
  const double cx = 0.5 * (a.x + b.x);
  const double cy = 0.5 * (a.y + b.y);
  if (cx < 0 || cy < 0 || cx >= grid.image_size || cy >= grid.image_size)
    throw std::domain_error("eye_patch_windows: eye center outside image");
  const int r0 = static_cast<int>(cy) / grid.patch_size;
  const int c0 = static_cast<int>(cx) / grid.patch_size;
  int rlo = 0, clo = 0;
  window_span(r0, rows, grid.rows(), false, &rlo);
  window_span(c0, cols, grid.cols(), true, &clo);
  std::vector<int> out;
  out.reserve(static_cast<size_t>(rows) * cols);
  for (int r = rlo; r < rlo + rows; ++r)
    for (int c = clo; c < clo + cols; ++c) out.push_back(r * grid.cols() + c);
  return out;
}
}  // namespace

EyeRegion eye_patch_windows(const std::array<PixelPoint, 4>& corners,
                            const PatchGrid& grid, int rows, int cols) {
  grid.validate();
  if (rows <= 0 || cols <= 0 || rows > grid.rows() || cols > grid.cols())
    throw ConfigError("eye_patch_windows: window exceeds grid");
  for (const auto& p : corners)
    if (p.x < 0 || p.y < 0 || p.x >= grid.image_size || p.y >= grid.image_size)
      throw std::domain_error("eye_patch_windows: corner outside image");

  EyeRegion region;
  region.rows = rows;
  region.cols = cols;
  region.left = one_eye_window(corners[0], corners[1], grid, rows, cols);
  region.right = one_eye_window(corners[2], corners[3], grid, rows, cols);
  for (int i : region.left)
    if (std::find(region.right.begin(), region.right.end(), i) != region.right.end())
      throw std::domain_error("eye_patch_windows: eye windows overlap");
  return region;
}

}  // namespace emib
