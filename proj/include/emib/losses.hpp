#pragma once

#include <span>

#include "emib/model.hpp"

namespace emib {

enum class ErrorMode { Squared, Absolute };

struct DistillSchedule {
  float start = 1.0f;
  float end = 0.1f;
  int steps = 1000;

  float at(int step) const {
    if (steps <= 0 || step >= steps) return end;
    const float t = static_cast<float>(step) / static_cast<float>(steps);
    return start + (end - start) * t;
  }
};

struct LossConfig {
  float lambda_contr = 0.01f;
  ErrorMode error_mode = ErrorMode::Squared;
  DistillSchedule distill;

  void validate() const {
    if (lambda_contr < 0) throw ConfigError("loss: lambda_contr must be >= 0");
    if (distill.start < distill.end || distill.end < 0)
      throw ConfigError("loss: distill schedule must satisfy start >= end >= 0");
  }
};

// ---- plain-tensor operations (also used as the loss API in tests) ----

/// Mean error over every pixel entry of the listed patches; other patches
/// contribute nothing.
double reconstruction_loss(const Matrix& pred, const Matrix& gt,
                           std::span<const int> eye_indices,
                           ErrorMode mode = ErrorMode::Squared);

/// Hinge on the triplet ordering: positive-information reconstruction must
/// not be worse than negative-information reconstruction.
double contrastive_loss(double err_pos, double err_neg);

double total_loss(double l_rec, double l_contr, const LossConfig& cfg);

/// Mean squared error between teacher and student feature batches.
double distillation_loss(const Matrix& z_teacher, const Matrix& z_student);

// ---- graph builders used by training ----

nn::Var reconstruction_loss_node(nn::Graph& g, nn::Var pred, const Matrix& gt_tokens,
                                 std::span<const int> patches, ErrorMode mode);

struct ContrastiveErrors {
  nn::Var err_pos;
  nn::Var err_neg;
};

/// Two extra decode passes sharing the main pass's injection token f0:
/// the positive pass reveals the eye patches, the negative pass reveals an
/// equally sized random sample of currently masked non-eye patches while the
/// eyes stay masked. Both errors are measured on eye pixels.
/// `stopgrad_encoders` freezes the two auxiliary encoder outputs (these
/// belong to the reconstruction side of the gradient-sharing split).
ContrastiveErrors contrastive_forward(nn::Graph& g, const EmibModel& model,
                                      const Matrix& tokens, const MaskPlan& recon_plan,
                                      const EyeRegion& eyes, nn::Var f0_inj_token,
                                      ErrorMode mode, Rng& rng,
                                      bool stopgrad_encoders = false);

/// Standalone variant for tests: computes f0 from a fully visible injection
/// pass, then returns the two scalar errors.
std::pair<double, double> contrastive_forward_eval(const EmibModel& model,
                                                   const Matrix& tokens,
                                                   const MaskPlan& recon_plan,
                                                   const EyeRegion& eyes,
                                                   ErrorMode mode, Rng& rng);

}  // namespace emib
