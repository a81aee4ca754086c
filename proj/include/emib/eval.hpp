#pragma once

#include <filesystem>
#include <optional>
#include <string>

#include "emib/dataset.hpp"
#include "emib/losses.hpp"
#include "emib/model.hpp"
#include "emib/student.hpp"

namespace emib {

enum class FeatureMode { Bottleneck, PrePool };
const char* feature_mode_name(FeatureMode m);
FeatureMode parse_feature_mode(const std::string& s);

/// Features for the listed samples: z_b (z_dim) in Bottleneck mode, or the
/// mean-pooled encoder latents before the down-projection in PrePool mode.
/// Evaluation always encodes the fully visible image (no eyes masked).
Matrix extract_features(const EmibModel& model, const Dataset& data,
                        std::span<const int> ids, FeatureMode mode);

/// Student features are its z_dim head output on the raw image.
Matrix extract_student_features(const StudentModel& student, const Dataset& data,
                                std::span<const int> ids);

struct ProbeWeights {
  Matrix W;  // 2 x d
  double b[2] = {0, 0};
  FeatureMode mode = FeatureMode::Bottleneck;
  bool head_pose = false;
  double ridge = 1e-3;

  int dim() const { return W.cols; }
  int parameter_count() const { return 2 * W.cols + 2; }
  GazeDirection predict(std::span<const float> features) const;
};

/// Closed-form ridge regression of (pitch, yaw) on features, bias
/// unregularized. When `head_poses` is given it is appended to the features;
/// the ridge penalty applies to the gaze-feature block only (the head block
/// carries a vanishing penalty so the system stays definite).
ProbeWeights fit_linear_probe(const Matrix& features, const Matrix& gazes,
                              const Matrix* head_poses, double ridge);

struct EvalReport {
  double mean_deg = 0;
  double std_deg = 0;
  std::vector<double> per_repeat_deg;
  int k = 0;  // 0 = whole dataset
  int repeats = 1;
  bool head_pose = false;
  FeatureMode mode = FeatureMode::Bottleneck;
  int n_test = 0;
  int feature_dim = 0;
  uint64_t seed = 0;

  std::string to_json() const;
};

/// Mean angular error of the probe over the listed test samples.
EvalReport evaluate_probe(const EmibModel& model, const ProbeWeights& probe,
                          const Dataset& data, std::span<const int> test_ids);

/// K-shot calibration: per repeat, draw K training samples (seeded by the
/// repeat index), fit, evaluate on the full test split. K = 0 uses the whole
/// train split (whole-dataset probing).
EvalReport few_shot_protocol(const EmibModel& model, const Dataset& data, int k,
                             int repeats, bool with_head_pose, FeatureMode mode,
                             double ridge, uint64_t seed);

EvalReport few_shot_protocol_student(const StudentModel& student, const Dataset& data,
                                     int k, int repeats, bool with_head_pose,
                                     double ridge, uint64_t seed);

/// Runs a reconstruction pass and splices the predicted eye patches into the
/// original image. `mask_seed` drives the random facial masking.
Matrix reconstruct_eyes(const EmibModel& model, const FaceSample& sample,
                        const EyeRegion& eyes, double mask_ratio, uint64_t mask_seed);

/// Minimum-norm injection shift that moves the probe prediction by `delta`,
/// decoded in all-masked mode and spliced into the image.
Matrix redirect_gaze(const EmibModel& model, const ProbeWeights& probe,
                     const FaceSample& sample, const EyeRegion& eyes,
                     const GazeDirection& delta);

/// The shifted injection vector itself (exposed for the algebra checks).
std::vector<float> redirect_injection(const ProbeWeights& probe,
                                      std::span<const float> z_b,
                                      const GazeDirection& delta);

void save_probe(const ProbeWeights& probe, const std::filesystem::path& path);
ProbeWeights load_probe(const std::filesystem::path& path);

/// Eye windows for a sample, using the model's configured window size.
EyeRegion sample_eye_region(const EmibModel& model, const FaceSample& sample);
EyeRegion sample_eye_region(const ModelConfig& cfg, const std::array<PixelPoint, 4>& corners);

}  // namespace emib
