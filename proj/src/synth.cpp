#include "emib/synth.hpp"

#include <algorithm>
#include <cmath>

namespace emib {

namespace {

// canonical geometry at 64 px, head = 0. Eye centers sit at x = 19/43 and
// y = 30 so their 2x2 patch windows (rows {3,4}, cols {1,2}/{4,5}) enclose
// sclera and iris with margin for every pose in range: no eye pixel ever
// leaks outside the masked region.
constexpr double kEyeY = 30.0;
constexpr double kEyeLx = 19.0, kEyeRx = 43.0;
constexpr double kEyeRadX = 4.2, kEyeRadY = 3.8;
constexpr double kIrisRad = 1.8;
constexpr double kPivotX = 31.0, kPivotY = 30.0;
constexpr double kRollPerYaw = 0.15;        // rad of roll per rad of head yaw
constexpr double kTransPerPitch = 2.0;      // px per rad of head pitch
constexpr double kMouthShiftPerYaw = 6.0;   // px per rad of head yaw

struct Style {
  float skin[3];
  float bg[3];
  float sclera[3];
  float iris[3];
  float brow[3];
  float mouth[3];
  double eye_scale;
  double face_rx, face_ry;
  double mouth_w;
  double noise_amp;
};

Style make_style(uint64_t style_seed, const SynthParams& p) {
  Rng r = Rng(style_seed).stream(rng_stream::kStyle);
  Style s;
  const float base_skin[3] = {0.55f, 0.42f, 0.34f};
  for (int c = 0; c < 3; ++c)
    s.skin[c] = base_skin[c] + static_cast<float>(r.uniform(-0.14, 0.14));
  const float base_bg[3] = {0.12f, 0.13f, 0.15f};
  for (int c = 0; c < 3; ++c)
    s.bg[c] = base_bg[c] + static_cast<float>(r.uniform(-0.04, 0.04));
  s.sclera[0] = 0.93f; s.sclera[1] = 0.93f; s.sclera[2] = 0.90f;
  s.iris[0] = 0.07f + static_cast<float>(r.uniform(0.0, 0.02));
  s.iris[1] = 0.05f + static_cast<float>(r.uniform(0.0, 0.015));
  s.iris[2] = 0.05f;
  s.brow[0] = 0.18f; s.brow[1] = 0.12f; s.brow[2] = 0.08f;
  s.mouth[0] = 0.55f + static_cast<float>(r.uniform(-0.1, 0.1));
  s.mouth[1] = 0.22f;
  s.mouth[2] = 0.22f;
  s.eye_scale = r.uniform(p.eye_scale_lo, p.eye_scale_hi);
  s.face_rx = 20.0 * r.uniform(0.95, 1.05);
  s.face_ry = 24.0 * r.uniform(0.95, 1.05);
  s.mouth_w = r.uniform(0.85, 1.15);
  s.noise_amp = r.uniform(p.noise_lo, p.noise_hi);
  return s;
}

// deterministic pixel grain, independent of pose
float pixel_noise(uint64_t style_seed, int x, int y) {
  Rng r = Rng(style_seed).stream(rng_stream::kStyle, 1000003 + x, y);
  return static_cast<float>(r.uniform() - 0.5);
}

// coverage of an axis-aligned ellipse with ~1 px anti-aliased edge,
// evaluated at a local-frame point
double ellipse_cov(double dx, double dy, double rx, double ry) {
  const double d = std::sqrt((dx / rx) * (dx / rx) + (dy / ry) * (dy / ry));
  const double edge = (1.0 - d) * std::min(rx, ry);
  return std::clamp(edge + 0.5, 0.0, 1.0);
}

void blend(float* px, const float* color, double cov) {
  for (int c = 0; c < 3; ++c)
    px[c] = static_cast<float>(px[c] * (1.0 - cov) + color[c] * cov);
}

}  // namespace

void SynthParams::validate() const {
  if (image_size < 32 || image_size % 8 != 0)
    throw ConfigError("synth: image_size must be a multiple of 8, >= 32");
  if (n_subjects < 2) throw ConfigError("synth: need at least 2 subjects");
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw ConfigError("synth: train_fraction must be in (0,1)");
  if (gaze_range <= 0 || gaze_range > 0.8 || head_range < 0 || head_range > 0.6)
    throw ConfigError("synth: pose ranges out of supported bounds");
  // worst-case eye-in-head angles over the full pose box (coarse scan plus a
  // safety factor), checked against the smallest eye, per axis
  double worst_pitch = 0.0, worst_yaw = 0.0;
  for (int gp = -4; gp <= 4; ++gp)
    for (int gy = -4; gy <= 4; ++gy)
      for (int hp = -4; hp <= 4; ++hp)
        for (int hy = -4; hy <= 4; ++hy) {
          const GazeDirection g{gaze_range * gp / 4.0, gaze_range * gy / 4.0};
          const HeadPose h{head_range * hp / 4.0, head_range * hy / 4.0};
          const GazeDirection rel = gaze_relative_to_head(g, h);
          worst_pitch = std::max(worst_pitch, std::fabs(rel.pitch));
          worst_yaw = std::max(worst_yaw, std::fabs(rel.yaw));
        }
  const double iris = kIrisRad * eye_scale_lo;
  const double off_x = iris_gain * worst_yaw * 1.03;
  const double off_y = iris_gain * worst_pitch * 1.03;
  if (off_x + iris > 0.98 * kEyeRadX * eye_scale_lo ||
      off_y + iris > 0.98 * kEyeRadY * eye_scale_lo)
    throw ConfigError("synth: iris_gain pushes the iris outside the eye ellipse at extreme gaze");
}

GazeDirection gaze_relative_to_head(const GazeDirection& absolute, const HeadPose& head) {
  return vector_to_pitchyaw(rotate_by_head_inverse(head, pitchyaw_to_vector(absolute)));
}

LabelDraw sample_labels(const SynthParams& params, Rng& rng) {
  LabelDraw d;
  d.gaze.pitch = rng.uniform(-params.gaze_range, params.gaze_range);
  d.gaze.yaw = rng.uniform(-params.gaze_range, params.gaze_range);
  d.head.pitch = rng.uniform(-params.head_range, params.head_range);
  d.head.yaw = rng.uniform(-params.head_range, params.head_range);
  return d;
}

FaceSample render_sample(const GazeDirection& gaze, const HeadPose& head,
                         uint64_t style_seed, const SynthParams& params,
                         uint64_t nuisance_seed) {
  params.validate();
  if (std::fabs(gaze.pitch) > params.gaze_range || std::fabs(gaze.yaw) > params.gaze_range ||
      std::fabs(head.pitch) > params.head_range || std::fabs(head.yaw) > params.head_range)
    throw std::domain_error("render_sample: pose outside configured ranges");

  const double s = params.scale();
  const Style st = make_style(style_seed, params);
  const GazeDirection rel = gaze_relative_to_head(gaze, head);

  const double roll = kRollPerYaw * head.yaw;
  const double ty = kTransPerPitch * head.pitch * s;
  const double cr = std::cos(roll), sr = std::sin(roll);
  const double px0 = kPivotX * s, py0 = kPivotY * s;

  // local-frame feature geometry (pre-transform, scaled)
  const double ex[2] = {kEyeLx * s, kEyeRx * s};
  const double ey = kEyeY * s;
  const double erx = kEyeRadX * s * st.eye_scale;
  const double ery = kEyeRadY * s * st.eye_scale;
  const double irad = kIrisRad * s * st.eye_scale;
  const double gain = params.iris_gain * s;
  const double iris_dx = gain * rel.yaw;
  const double iris_dy = gain * rel.pitch;
  const double face_cx = 31.0 * s, face_cy = 33.0 * s;
  const double mouth_cx = 31.0 * s + kMouthShiftPerYaw * head.yaw * s;
  const double mouth_cy = 46.0 * s;
  const double brow_y = 20.5 * s;

  // per-sample nuisances: illumination ramp + gain/offset, a coarse blotch
  // field (bilinear over an 8x8 grid), and fine grain
  double ramp_x = 0, ramp_y = 0, light_gain = 1.0, light_off = 0.0;
  double blotch_amp = 0.0, grain_amp = 0.0;
  float blotch[81] = {0};
  if (nuisance_seed != 0) {
    Rng lr = Rng(nuisance_seed).stream(rng_stream::kLighting);
    const double ang = lr.uniform(0.0, 6.283185307179586);
    const double strength = lr.uniform(0.0, params.light_ramp_hi);
    ramp_x = strength * std::cos(ang) / (32.0 * s);
    ramp_y = strength * std::sin(ang) / (32.0 * s);
    light_gain = lr.uniform(params.light_gain_lo, params.light_gain_hi);
    light_off = lr.uniform(-params.light_offset, params.light_offset);
    blotch_amp = lr.uniform(0.0, params.blotch_hi);
    grain_amp = lr.uniform(0.0, params.sample_grain_hi);
    for (int i = 0; i < 81; ++i)
      blotch[i] = static_cast<float>(lr.uniform(-1.0, 1.0));
  }
  const double cell = params.image_size / 8.0;

  const int S = params.image_size;
  FaceSample out;
  out.gaze = gaze;
  out.head = head;
  out.image = Matrix(S, S * 3);

  for (int y = 0; y < S; ++y) {
    float* row = out.image.row(y);
    for (int x = 0; x < S; ++x) {
      // inverse canvas transform into the local frame
      const double qx = (x + 0.5) - px0;
      const double qy = (y + 0.5) - ty - py0;
      const double lx = cr * qx + sr * qy + px0;
      const double ly = -sr * qx + cr * qy + py0;

      float* px = row + static_cast<size_t>(x) * 3;
      for (int c = 0; c < 3; ++c) px[c] = st.bg[c];

      blend(px, st.skin, ellipse_cov(lx - face_cx, ly - face_cy, st.face_rx * s, st.face_ry * s));
      for (int e = 0; e < 2; ++e)
        blend(px, st.brow, ellipse_cov(lx - ex[e], ly - brow_y, 4.5 * s, 1.1 * s));
      blend(px, st.mouth,
            ellipse_cov(lx - mouth_cx, ly - mouth_cy, 6.5 * s * st.mouth_w, 2.0 * s));
      for (int e = 0; e < 2; ++e) {
        const double sc = ellipse_cov(lx - ex[e], ly - ey, erx, ery);
        if (sc > 0) {
          blend(px, st.sclera, sc);
          const double ic =
              ellipse_cov(lx - ex[e] - iris_dx, ly - ey - iris_dy, irad, irad);
          blend(px, st.iris, ic * sc);
        }
      }

      float grain = static_cast<float>(st.noise_amp) * pixel_noise(style_seed, x, y);
      float shade = 0.0f;
      if (nuisance_seed != 0) {
        grain += static_cast<float>(grain_amp) * pixel_noise(nuisance_seed + 1, x, y);
        // bilinear sample of the coarse field
        const double bx = std::min((x + 0.5) / cell, 7.999), by = std::min((y + 0.5) / cell, 7.999);
        const int x0 = static_cast<int>(bx), y0 = static_cast<int>(by);
        const double fx = bx - x0, fy = by - y0;
        const double v00 = blotch[y0 * 9 + x0], v01 = blotch[y0 * 9 + x0 + 1];
        const double v10 = blotch[(y0 + 1) * 9 + x0], v11 = blotch[(y0 + 1) * 9 + x0 + 1];
        shade = static_cast<float>(
            blotch_amp * ((1 - fy) * ((1 - fx) * v00 + fx * v01) +
                          fy * ((1 - fx) * v10 + fx * v11)));
      }
      const float light = static_cast<float>(
          light_gain + ramp_x * ((x + 0.5) - 32.0 * s) + ramp_y * ((y + 0.5) - 32.0 * s));
      for (int c = 0; c < 3; ++c)
        px[c] = std::clamp(px[c] * light + static_cast<float>(light_off) + shade + grain,
                           0.0f, 1.0f);
    }
  }

  // analytic post-transform eye corners: (outer, inner) per eye
  auto fwd = [&](double lx, double ly) {
    const double dx = lx - px0, dy = ly - py0;
    return PixelPoint{cr * dx - sr * dy + px0, sr * dx + cr * dy + py0 + ty};
  };
  out.corners[0] = fwd(ex[0] - erx, ey);
  out.corners[1] = fwd(ex[0] + erx, ey);
  out.corners[2] = fwd(ex[1] - erx, ey);
  out.corners[3] = fwd(ex[1] + erx, ey);
  return out;
}

}  // namespace emib
