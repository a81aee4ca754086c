#pragma once

#include <array>
#include <vector>

#include "emib/common.hpp"

namespace emib {

// Angle convention used throughout: pitch is the vertical gaze component in
// [-pi/2, pi/2], yaw the horizontal one in [-pi, pi]. The camera looks along
// -z; the matching unit vector is
//   v = (-cos(pitch) sin(yaw), -sin(pitch), -cos(pitch) cos(yaw)).
// Any consistent convention gives identical angular errors; this one is fixed
// so tests and file formats are stable.

struct GazeDirection {
  double pitch = 0.0;
  double yaw = 0.0;
};

struct HeadPose {
  double pitch = 0.0;
  double yaw = 0.0;
};

struct Vec3 {
  double x = 0.0, y = 0.0, z = 0.0;
};

/// Image-space point: x grows rightward (columns), y grows downward (rows).
struct PixelPoint {
  double x = 0.0;
  double y = 0.0;
};

struct PatchGrid;  // defined in masking.hpp

/// Per-eye patch-index windows on the grid. Indices are row-major grid
/// positions; each window holds exactly rows*cols of them.
struct EyeRegion {
  std::vector<int> left;
  std::vector<int> right;
  int rows = 0;
  int cols = 0;

  bool empty() const { return left.empty() && right.empty(); }
  int total() const { return static_cast<int>(left.size() + right.size()); }
  /// Union of both windows, ascending.
  std::vector<int> all() const;
};

Vec3 pitchyaw_to_vector(const GazeDirection& g);
GazeDirection vector_to_pitchyaw(const Vec3& v);

/// Angle between the two gaze directions, in degrees, in [0, 180].
double angular_error_deg(const GazeDirection& a, const GazeDirection& b);

/// Rotate v by the head rotation R(head) with R(0) = identity and
/// R(head) * (0,0,-1) = pitchyaw_to_vector(head).
Vec3 rotate_by_head(const HeadPose& head, const Vec3& v);
/// Inverse of rotate_by_head.
Vec3 rotate_by_head_inverse(const HeadPose& head, const Vec3& v);

/// Builds the two eye windows from the four eye-corner landmarks, given as
/// (left-eye corner a, left-eye corner b, right-eye corner a, right-eye
/// corner b) in pixels. The eye center is the corner midpoint; the window is
/// the rows x cols block around the patch containing it, shifted (never
/// truncated) to stay inside the grid. Even widths hang one extra column to
/// the left of the anchor.
EyeRegion eye_patch_windows(const std::array<PixelPoint, 4>& corners,
                            const PatchGrid& grid, int rows, int cols);

}  // namespace emib
