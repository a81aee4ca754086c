#pragma once

#include <array>
#include <cstdint>

#include "emib/geometry.hpp"
#include "emib/rng.hpp"

namespace emib {

/// Procedural face renderer parameters. The geometry keeps both eyes strictly
/// inside their 2x2 desk-config patch windows for every pose in range, so no
/// eye pixel ever leaks outside the masked region; head pose is expressed as
/// in-plane roll, vertical translation, and horizontal shifts of the inner
/// features (mouth), all analytic.
struct SynthParams {
  int image_size = 64;
  double gaze_range = 0.6;  // radians per axis, absolute gaze
  double head_range = 0.4;  // radians per axis
  double iris_gain = 1.55;  // px offset per radian of eye-in-head rotation (at 64 px)
  int n_subjects = 10;
  double train_fraction = 0.8;

  // style jitter ranges
  double eye_scale_lo = 0.95, eye_scale_hi = 1.05;
  double noise_lo = 0.01, noise_hi = 0.035;

  // per-sample nuisances: a linear illumination ramp with global gain/offset,
  // a coarse blotchy shading field, and per-sample grain. Together they keep
  // raw pixels from being linearly decodable into gaze, the way real lighting
  // and sensor variation do.
  double light_ramp_hi = 0.30;
  double light_gain_lo = 0.70, light_gain_hi = 1.30;
  double light_offset = 0.06;
  double blotch_hi = 0.20;       // coarse 8x8 shading field amplitude
  double sample_grain_hi = 0.05; // per-sample fine grain on top of subject grain

  double scale() const { return image_size / 64.0; }

  /// Throws ConfigError if an in-range pose could push an iris outside its
  /// eye ellipse.
  void validate() const;
};

struct FaceSample {
  Matrix image;  // image_size x image_size*3, RGB in [0,1]
  std::array<PixelPoint, 4> corners;  // left eye outer/inner, right eye inner/outer
  GazeDirection gaze;                 // absolute gaze
  HeadPose head;
  int subject_id = 0;
};

/// Gaze expressed in the head frame (the eye-in-head rotation that composes
/// with the head rotation to give the absolute gaze).
GazeDirection gaze_relative_to_head(const GazeDirection& absolute, const HeadPose& head);

/// Deterministic render; identical inputs give bitwise-identical images.
/// nuisance_seed = 0 disables the per-sample nuisances (unit-test setting);
/// the dataset generator draws one per sample.
FaceSample render_sample(const GazeDirection& gaze, const HeadPose& head,
                         uint64_t style_seed, const SynthParams& params,
                         uint64_t nuisance_seed = 0);

struct LabelDraw {
  GazeDirection gaze;
  HeadPose head;
};

/// Uniform labels in the configured ranges.
LabelDraw sample_labels(const SynthParams& params, Rng& rng);

}  // namespace emib
