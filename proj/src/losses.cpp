#include "emib/losses.hpp"

#include <algorithm>
#include <cmath>

namespace emib {

using nn::Graph;
using nn::Var;

double reconstruction_loss(const Matrix& pred, const Matrix& gt,
                           std::span<const int> eye_indices, ErrorMode mode) {
  if (pred.rows != gt.rows || pred.cols != gt.cols)
    throw ConfigError("reconstruction_loss: shape mismatch");
  if (eye_indices.empty())
    throw ConfigError("reconstruction_loss: empty eye set");
  double acc = 0.0;
  for (int p : eye_indices) {
    if (p < 0 || p >= pred.rows)
      throw ConfigError("reconstruction_loss: patch index out of range");
    const float* pr = pred.row(p);
    const float* gr = gt.row(p);
    for (int j = 0; j < pred.cols; ++j) {
      const double d = static_cast<double>(pr[j]) - gr[j];
      acc += mode == ErrorMode::Absolute ? std::fabs(d) : d * d;
    }
  }
  return acc / (static_cast<double>(eye_indices.size()) * pred.cols);
}

double contrastive_loss(double err_pos, double err_neg) {
  return std::max(err_pos - err_neg, 0.0);
}

double total_loss(double l_rec, double l_contr, const LossConfig& cfg) {
  cfg.validate();
  return l_rec + cfg.lambda_contr * l_contr;
}

double distillation_loss(const Matrix& z_teacher, const Matrix& z_student) {
  if (z_teacher.rows != z_student.rows || z_teacher.cols != z_student.cols)
    throw ConfigError("distillation_loss: shape mismatch");
  double acc = 0.0;
  for (size_t i = 0; i < z_teacher.size(); ++i) {
    const double d = static_cast<double>(z_teacher.data[i]) - z_student.data[i];
    acc += d * d;
  }
  return acc / static_cast<double>(z_teacher.size());
}

Var reconstruction_loss_node(Graph& g, Var pred, const Matrix& gt_tokens,
                             std::span<const int> patches, ErrorMode mode) {
  return g.masked_patch_mse(pred, gt_tokens.data.data(), patches,
                            mode == ErrorMode::Absolute);
}

namespace {
std::vector<int> sorted_union(std::span<const int> a, std::span<const int> b) {
  std::vector<int> out(a.begin(), a.end());
  out.insert(out.end(), b.begin(), b.end());
  std::sort(out.begin(), out.end());
  out.erase(std::unique(out.begin(), out.end()), out.end());
  return out;
}

std::vector<int> complement_of(std::span<const int> sorted_set, int n) {
  std::vector<int> out;
  out.reserve(static_cast<size_t>(n) - sorted_set.size());
  size_t k = 0;
  for (int i = 0; i < n; ++i) {
    if (k < sorted_set.size() && sorted_set[k] == i)
      ++k;
    else
      out.push_back(i);
  }
  return out;
}

Var decode_with_visible(Graph& g, const EmibModel& model, const Matrix& tokens,
                        const std::vector<int>& visible, Var inj, bool stopgrad_enc) {
  const Matrix vis_tokens = gather_rows(tokens, visible);
  Var in = g.constant(vis_tokens);
  Var latents = model.encode(g, in, visible);
  if (stopgrad_enc) latents = g.stop_grad(latents);
  const std::vector<int> masked = complement_of(visible, model.config().grid.n_patches());
  return model.decode(g, latents, visible, masked, inj);
}
}  // namespace

ContrastiveErrors contrastive_forward(Graph& g, const EmibModel& model,
                                      const Matrix& tokens, const MaskPlan& recon_plan,
                                      const EyeRegion& eyes, Var f0_inj_token,
                                      ErrorMode mode, Rng& rng, bool stopgrad_encoders) {
  const std::vector<int> eye_set = eyes.all();
  if (eye_set.empty()) throw ConfigError("contrastive_forward: empty eye region");

  // negative sample: currently masked non-eye patches, same cardinality as the
  // eye set, eyes stay masked
  std::vector<int> pool;
  pool.reserve(recon_plan.masked.size());
  for (int p : recon_plan.masked)
    if (!std::binary_search(eye_set.begin(), eye_set.end(), p)) pool.push_back(p);
  if (pool.size() < eye_set.size())
    throw ConfigError("contrastive_forward: not enough masked non-eye patches to sample");
  std::vector<int> neg;
  neg.reserve(eye_set.size());
  for (size_t k = 0; k < eye_set.size(); ++k) {
    const size_t j = k + static_cast<size_t>(rng.uniform_int(pool.size() - k));
    std::swap(pool[k], pool[j]);
    neg.push_back(pool[k]);
  }

  const std::vector<int> vis_pos = sorted_union(recon_plan.visible, eye_set);
  const std::vector<int> vis_neg = sorted_union(recon_plan.visible, neg);

  ContrastiveErrors out;
  Var pred_pos = decode_with_visible(g, model, tokens, vis_pos, f0_inj_token,
                                     stopgrad_encoders);
  out.err_pos = g.masked_patch_mse(pred_pos, tokens.data.data(), eye_set,
                                   mode == ErrorMode::Absolute);
  Var pred_neg = decode_with_visible(g, model, tokens, vis_neg, f0_inj_token,
                                     stopgrad_encoders);
  out.err_neg = g.masked_patch_mse(pred_neg, tokens.data.data(), eye_set,
                                   mode == ErrorMode::Absolute);
  return out;
}

std::pair<double, double> contrastive_forward_eval(const EmibModel& model,
                                                   const Matrix& tokens,
                                                   const MaskPlan& recon_plan,
                                                   const EyeRegion& eyes,
                                                   ErrorMode mode, Rng& rng) {
  Graph g(&model.params());
  const MaskPlan full = make_full_visible_plan(model.config().grid);
  const Matrix all_tokens = gather_rows(tokens, full.visible);
  Var in = g.constant(all_tokens);
  Var latents = model.encode(g, in, full.visible);
  auto [z_b, inj] = model.bottleneck_inject(g, latents);
  (void)z_b;
  ContrastiveErrors e = contrastive_forward(g, model, tokens, recon_plan, eyes, inj,
                                            mode, rng);
  return {g.scalar(e.err_pos), g.scalar(e.err_neg)};
}

}  // namespace emib
