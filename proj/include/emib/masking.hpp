#pragma once

#include <vector>

#include "emib/common.hpp"
#include "emib/geometry.hpp"
#include "emib/rng.hpp"

namespace emib {

/// Square image split into square patches, row-major patch ordering.
struct PatchGrid {
  int image_size = 224;
  int patch_size = 16;

  int rows() const { return image_size / patch_size; }
  int cols() const { return image_size / patch_size; }
  int n_patches() const { return rows() * cols(); }
  int token_dim() const { return patch_size * patch_size * 3; }

  void validate() const {
    if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
      throw ConfigError("patch grid: image_size must be a positive multiple of patch_size");
  }

  bool operator==(const PatchGrid&) const = default;
};

/// Partition of the grid into masked and visible patches. `masked` and
/// `visible` are ascending and disjoint and together cover the grid; `eye`
/// records which masked patches are eye patches.
struct MaskPlan {
  std::vector<int> masked;
  std::vector<int> visible;
  std::vector<int> eye;
  double total_ratio = 0.0;
};

/// Image (size x size x 3, row-major, values in [0,1]) -> n_patches x token_dim
/// token matrix. Row i is the row-major flattening of patch i.
Matrix patchify(const float* image, const PatchGrid& grid);
Matrix patchify(const Matrix& image_hw3, const PatchGrid& grid);

/// Exact inverse of patchify.
Matrix unpatchify(const Matrix& tokens, const PatchGrid& grid);

/// Reconstruction-branch plan: all eye patches masked, plus a uniform
/// without-replacement sample of non-eye patches, until round(ratio * n).
MaskPlan make_reconstruction_mask(const EyeRegion& eyes, double total_ratio,
                                  const PatchGrid& grid, Rng& rng);

/// Injection-branch plan: both eyes with probability 0.5, otherwise one eye
/// chosen uniformly. Everything else stays visible.
MaskPlan make_injection_mask(const EyeRegion& eyes, const PatchGrid& grid, Rng& rng);

/// MAE-single baseline: one uniformly chosen eye window plus random facial
/// patches up to round(ratio * n).
MaskPlan make_single_eye_mask(const EyeRegion& eyes, double total_ratio,
                              const PatchGrid& grid, Rng& rng);

/// Plain MAE plan: uniform random mask, no eye special-casing.
MaskPlan make_random_mask(double total_ratio, const PatchGrid& grid, Rng& rng);

/// Fully visible plan (evaluation-time injection input).
MaskPlan make_full_visible_plan(const PatchGrid& grid);

/// 2D sin-cos positional table, n_patches x dim. First half of the channels
/// encodes the patch row, second half the patch column; each half is
/// [sin(p*w_0).. , cos(p*w_0)..] with w_i = 1/10000^(2i/half_dim).
/// dim must be divisible by 4. Values lie in [-1, 1].
Matrix sincos_pos_embed(const PatchGrid& grid, int dim);

void validate_mask_plan(const MaskPlan& plan, const PatchGrid& grid);

}  // namespace emib
