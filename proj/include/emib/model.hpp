#pragma once

#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "emib/masking.hpp"
#include "emib/nn/graph.hpp"
#include "emib/nn/params.hpp"

namespace emib {

struct EncoderConfig {
  int depth = 12;
  int dim = 192;
  int heads = 3;
  bool operator==(const EncoderConfig&) const = default;
};

struct DecoderConfig {
  int depth = 4;
  int dim = 192;
  int heads = 3;
  bool operator==(const DecoderConfig&) const = default;
};

struct BottleneckConfig {
  int z_dim = 16;
  bool operator==(const BottleneckConfig&) const = default;
};

struct ModelConfig {
  PatchGrid grid;
  EncoderConfig encoder;
  DecoderConfig decoder;
  BottleneckConfig bottleneck;
  int eye_window_rows = 3;
  int eye_window_cols = 4;

  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

/// ViT-tiny at 224/16, the paper's default backbone.
ModelConfig vit_tiny_config();
/// ViT-base at 224/16.
ModelConfig vit_base_config();
/// CPU-scale config: 64 px images, 8 px patches (8x8 grid), encoder depth 4 /
/// dim 64 / heads 4, decoder depth 2, z_dim 16, 2x2 eye windows. Keeps the
/// 12.5% eye fraction of the full setup.
ModelConfig desk_config();

// Parameter handles for one transformer block.
struct BlockParams {
  int ln1_g, ln1_b, w_qkv, b_qkv, w_proj, b_proj;
  int ln2_g, ln2_b, w_fc1, b_fc1, w_fc2, b_fc2;
};

/// Dual-branch masked autoencoder with an injection bottleneck.
///
/// Both branches run the one encoder parameter set below (weight sharing);
/// the decoder consumes projected visible latents, a learnable mask token at
/// masked positions and, when injection is enabled, one extra position-free
/// token carrying the bottleneck output. Positional tables are fixed sin-cos.
class EmibModel {
 public:
  explicit EmibModel(const ModelConfig& cfg);

  /// Fresh random init (truncated normal, std 0.02 on weights).
  void init_params(uint64_t seed);

  const ModelConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }
  const Matrix& encoder_pos_table() const { return enc_pos_; }
  int bottleneck_down_param() const { return bn_down_; }
  int bottleneck_up_param() const { return bn_up_; }
  int mask_token_param() const { return mask_token_; }

  // ---- graph-building forward pieces ----
  /// tokens: |positions| x token_dim patch rows for the listed grid
  /// positions. Returns |positions| x dim latents.
  nn::Var encode(nn::Graph& g, nn::Var tokens, std::span<const int> positions) const;

  /// Mean-pools latents and applies the two bias-free linear maps.
  /// Returns (z_b: 1 x z_dim, inj_token: 1 x decoder_dim).
  std::pair<nn::Var, nn::Var> bottleneck_inject(nn::Graph& g, nn::Var latents) const;

  /// Full-grid pixel predictions (n_patches x token_dim). `visible` and
  /// `masked` must be ascending and partition the grid; `inj` may be invalid
  /// to run without injection.
  nn::Var decode(nn::Graph& g, nn::Var visible_latents,
                 std::span<const int> visible, std::span<const int> masked,
                 nn::Var inj) const;

 private:
  ModelConfig cfg_;
  nn::ParamStore params_;
  Matrix enc_pos_, dec_pos_;

  int embed_w_, embed_b_;
  std::vector<BlockParams> enc_blocks_;
  int enc_ln_g_, enc_ln_b_;
  int dec_in_w_, dec_in_b_;
  std::vector<BlockParams> dec_blocks_;
  int dec_ln_g_, dec_ln_b_;
  int mask_token_;
  int bn_down_, bn_up_;
  int head_w_, head_b_;

  nn::Var run_blocks(nn::Graph& g, nn::Var x, const std::vector<BlockParams>& blocks,
                     int heads, int ln_g, int ln_b) const;
};

/// Options controlling one dual-branch pass.
struct ForwardOptions {
  bool use_injection = true;
  bool stopgrad_injection_encoder = false;  // freeze grad at the FF-IB encoder output
  bool stopgrad_recon_encoder = false;      // freeze grad at the EM-AE encoder output(s)
};

struct ForwardOutput {
  nn::Var pred_pixels;  // n_patches x token_dim
  nn::Var z_b;          // 1 x z_dim (invalid when injection disabled)
  nn::Var inj_token;    // 1 x decoder_dim (invalid when injection disabled)
  nn::Var z_o;          // |visible| x dim, reconstruction-branch latents
};

/// The EM-IB pass: encode the reconstruction view and the injection view with
/// the same encoder, squeeze the injection view through the bottleneck, and
/// decode pixel predictions for the full grid. `tokens` must be the full
/// n_patches x token_dim patchification of the image and must outlive `g`.
ForwardOutput forward_emib(nn::Graph& g, const EmibModel& model, const Matrix& tokens,
                           const MaskPlan& recon_plan, const MaskPlan& inj_plan,
                           const ForwardOptions& opt = {});

// ---- plain-tensor convenience wrappers (tests, feature extraction) ----
Matrix encode_eval(const EmibModel& model, const Matrix& tokens,
                   std::span<const int> positions);
std::pair<std::vector<float>, std::vector<float>> bottleneck_inject_eval(
    const EmibModel& model, const Matrix& latents);
Matrix forward_pred_eval(const EmibModel& model, const Matrix& image_tokens,
                         const MaskPlan& recon_plan, const MaskPlan& inj_plan,
                         bool use_injection = true);

}  // namespace emib
