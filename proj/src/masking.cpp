#include "emib/masking.hpp"

#include <algorithm>
#include <cmath>

namespace emib {

namespace {

// Half-away-from-zero; fixes |masked| = 147 at 196 * 0.75.
int round_count(double x) { return static_cast<int>(std::llround(x)); }

MaskPlan finish_plan(std::vector<int> masked, double ratio, const PatchGrid& grid,
                     std::vector<int> eye) {
  std::sort(masked.begin(), masked.end());
  MaskPlan plan;
  plan.total_ratio = ratio;
  plan.eye = std::move(eye);
  std::sort(plan.eye.begin(), plan.eye.end());
  plan.masked = std::move(masked);
  plan.visible.reserve(grid.n_patches() - plan.masked.size());
  size_t m = 0;
  for (int i = 0; i < grid.n_patches(); ++i) {
    if (m < plan.masked.size() && plan.masked[m] == i)
      ++m;
    else
      plan.visible.push_back(i);
  }
  return plan;
}

// Uniform without-replacement sample of `want` entries from `pool`
// (partial Fisher-Yates; order of the pool defines the draw sequence).
std::vector<int> sample_without_replacement(std::vector<int> pool, int want, Rng& rng) {
  std::vector<int> out;
  out.reserve(want);
  int n = static_cast<int>(pool.size());
  for (int k = 0; k < want; ++k) {
    const int j = k + static_cast<int>(rng.uniform_int(static_cast<uint64_t>(n - k)));
    std::swap(pool[k], pool[j]);
    out.push_back(pool[k]);
  }
  return out;
}

std::vector<int> non_eye_indices(const std::vector<int>& eye_sorted, const PatchGrid& grid) {
  std::vector<int> pool;
  pool.reserve(grid.n_patches() - eye_sorted.size());
  size_t e = 0;
  for (int i = 0; i < grid.n_patches(); ++i) {
    if (e < eye_sorted.size() && eye_sorted[e] == i)
      ++e;
    else
      pool.push_back(i);
  }
  return pool;
}

MaskPlan masked_core(std::vector<int> eye_sorted, double total_ratio,
                     const PatchGrid& grid, Rng& rng) {
  const int n = grid.n_patches();
  const int want = round_count(total_ratio * n);
  const int n_eye = static_cast<int>(eye_sorted.size());
  if (want < n_eye) {
    throw ConfigError("mask ratio " + std::to_string(total_ratio) +
                      " below the eye fraction; minimum feasible ratio is " +
                      std::to_string(static_cast<double>(n_eye) / n));
  }
  std::vector<int> masked = eye_sorted;
  if (want > n_eye) {
    auto extra = sample_without_replacement(non_eye_indices(eye_sorted, grid),
                                            want - n_eye, rng);
    masked.insert(masked.end(), extra.begin(), extra.end());
  }
  return finish_plan(std::move(masked), total_ratio, grid, std::move(eye_sorted));
}

}  // namespace

Matrix patchify(const float* image, const PatchGrid& grid) {
  grid.validate();
  const int p = grid.patch_size;
  const int gc = grid.cols();
  Matrix tokens(grid.n_patches(), grid.token_dim());
  for (int idx = 0; idx < grid.n_patches(); ++idx) {
    const int pr = idx / gc, pc = idx % gc;
    float* dst = tokens.row(idx);
    for (int y = 0; y < p; ++y) {
      const float* src =
          image + (static_cast<size_t>(pr * p + y) * grid.image_size + pc * p) * 3;
      std::copy(src, src + static_cast<size_t>(p) * 3, dst + static_cast<size_t>(y) * p * 3);
    }
  }
  return tokens;
}

Matrix patchify(const Matrix& image_hw3, const PatchGrid& grid) {
  if (image_hw3.rows != grid.image_size || image_hw3.cols != grid.image_size * 3)
    throw ConfigError("patchify: image dims do not match grid");
  return patchify(image_hw3.data.data(), grid);
}

Matrix unpatchify(const Matrix& tokens, const PatchGrid& grid) {
  grid.validate();
  if (tokens.rows != grid.n_patches() || tokens.cols != grid.token_dim())
    throw ConfigError("unpatchify: token matrix dims do not match grid");
  const int p = grid.patch_size;
  const int gc = grid.cols();
  Matrix image(grid.image_size, grid.image_size * 3);
  for (int idx = 0; idx < grid.n_patches(); ++idx) {
    const int pr = idx / gc, pc = idx % gc;
    const float* src = tokens.row(idx);
    for (int y = 0; y < p; ++y) {
      float* dst = image.row(pr * p + y) + static_cast<size_t>(pc * p) * 3;
      std::copy(src + static_cast<size_t>(y) * p * 3, src + static_cast<size_t>(y + 1) * p * 3, dst);
    }
  }
  return image;
}

MaskPlan make_reconstruction_mask(const EyeRegion& eyes, double total_ratio,
                                  const PatchGrid& grid, Rng& rng) {
  grid.validate();
  return masked_core(eyes.all(), total_ratio, grid, rng);
}

MaskPlan make_injection_mask(const EyeRegion& eyes, const PatchGrid& grid, Rng& rng) {
  grid.validate();
  std::vector<int> masked;
  if (rng.bernoulli(0.5)) {
    masked = eyes.all();
  } else {
    masked = rng.bernoulli(0.5) ? eyes.left : eyes.right;
    std::sort(masked.begin(), masked.end());
  }
  const double ratio = static_cast<double>(masked.size()) / grid.n_patches();
  std::vector<int> eye = masked;
  return finish_plan(std::move(masked), ratio, grid, std::move(eye));
}

MaskPlan make_single_eye_mask(const EyeRegion& eyes, double total_ratio,
                              const PatchGrid& grid, Rng& rng) {
  grid.validate();
  std::vector<int> eye = rng.bernoulli(0.5) ? eyes.left : eyes.right;
  std::sort(eye.begin(), eye.end());
  return masked_core(std::move(eye), total_ratio, grid, rng);
}

MaskPlan make_random_mask(double total_ratio, const PatchGrid& grid, Rng& rng) {
  grid.validate();
  return masked_core({}, total_ratio, grid, rng);
}

MaskPlan make_full_visible_plan(const PatchGrid& grid) {
  grid.validate();
  MaskPlan plan;
  plan.total_ratio = 0.0;
  plan.visible.resize(grid.n_patches());
  for (int i = 0; i < grid.n_patches(); ++i) plan.visible[i] = i;
  return plan;
}

Matrix sincos_pos_embed(const PatchGrid& grid, int dim) {
  grid.validate();
  if (dim <= 0 || dim % 4 != 0)
    throw ConfigError("sincos_pos_embed: dim must be a positive multiple of 4");
  const int half = dim / 2;     // channels per axis
  const int n_freq = half / 2;  // sin/cos pairs per axis
  Matrix table(grid.n_patches(), dim);
  for (int idx = 0; idx < grid.n_patches(); ++idx) {
    const int pr = idx / grid.cols();
    const int pc = idx % grid.cols();
    float* row = table.row(idx);
    for (int axis = 0; axis < 2; ++axis) {
      const double pos = axis == 0 ? pr : pc;
      float* out = row + axis * half;
      for (int i = 0; i < n_freq; ++i) {
        const double omega = 1.0 / std::pow(10000.0, 2.0 * i / half);
        out[i] = static_cast<float>(std::sin(pos * omega));
        out[n_freq + i] = static_cast<float>(std::cos(pos * omega));
      }
    }
  }
  return table;
}

void validate_mask_plan(const MaskPlan& plan, const PatchGrid& grid) {
  std::vector<char> seen(grid.n_patches(), 0);
  for (int i : plan.masked) {
    if (i < 0 || i >= grid.n_patches() || seen[i])
      throw ConfigError("mask plan: bad masked index");
    seen[i] = 1;
  }
  for (int i : plan.visible) {
    if (i < 0 || i >= grid.n_patches() || seen[i])
      throw ConfigError("mask plan: visible overlaps masked or is out of range");
    seen[i] = 2;
  }
  for (char s : seen)
    if (!s) throw ConfigError("mask plan: grid not covered");
}

}  // namespace emib
