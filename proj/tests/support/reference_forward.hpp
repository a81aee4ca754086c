#pragma once

// Independent double-precision re-implementation of the dual-branch forward
// pass and the training losses, written as plain loops against a flat double
// parameter vector. Used as the oracle for finite-difference gradient checks
// and as a cross-check of the float implementation; it deliberately shares no
// code with the graph engine.

#include <span>
#include <string>
#include <vector>

#include "emib/losses.hpp"
#include "emib/model.hpp"

namespace emib::testsupport {

struct RefParams {
  explicit RefParams(const nn::ParamStore& store);

  const nn::ParamStore* store;
  std::vector<double> flat;

  std::span<const double> get(const std::string& name, int* rows, int* cols) const;
  std::span<double> mutable_flat() { return flat; }
};

struct RefLossSpec {
  MaskPlan recon;
  MaskPlan inj;                  // used when use_injection
  std::vector<int> loss_patches;
  bool use_injection = true;
  ErrorMode mode = ErrorMode::Squared;
  // contrastive part (lambda > 0): visible sets of the two passes and the eye
  // set the errors are measured on
  double lambda = 0.0;
  std::vector<int> pos_visible;
  std::vector<int> neg_visible;
  std::vector<int> eye_set;
};

struct RefLossValue {
  double total = 0;
  double l_rec = 0;
  double l_contr = 0;
};

/// Total training loss for one sample, all math in double.
RefLossValue ref_total_loss(const ModelConfig& cfg, const RefParams& params,
                            const Matrix& tokens, const RefLossSpec& spec);

/// Encoder latents for the listed positions (row-major |pos| x dim), for
/// value-level cross-checks of the float path.
std::vector<double> ref_encode(const ModelConfig& cfg, const RefParams& params,
                               const Matrix& tokens, std::span<const int> positions);

}  // namespace emib::testsupport
