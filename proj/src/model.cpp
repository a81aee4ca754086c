#include "emib/model.hpp"

#include <cmath>

namespace emib {

using nn::Graph;
using nn::ParamGroup;
using nn::Var;

void ModelConfig::validate() const {
  grid.validate();
  if (encoder.dim <= 0 || encoder.dim % encoder.heads != 0)
    throw ConfigError("model: encoder dim must divide by heads");
  if (decoder.dim <= 0 || decoder.dim % decoder.heads != 0)
    throw ConfigError("model: decoder dim must divide by heads");
  if (encoder.dim % 4 != 0 || decoder.dim % 4 != 0)
    throw ConfigError("model: dims must be multiples of 4 for sin-cos tables");
  if (bottleneck.z_dim < 1 || bottleneck.z_dim > encoder.dim)
    throw ConfigError("model: z_dim must be in [1, encoder dim]");
  if (eye_window_rows <= 0 || eye_window_cols <= 0 ||
      eye_window_rows > grid.rows() || eye_window_cols > grid.cols())
    throw ConfigError("model: eye window exceeds grid");
}

ModelConfig vit_tiny_config() {
  ModelConfig c;
  c.grid = {224, 16};
  c.encoder = {12, 192, 3};
  c.decoder = {4, 192, 3};
  c.bottleneck = {16};
  c.eye_window_rows = 3;
  c.eye_window_cols = 4;
  return c;
}

ModelConfig vit_base_config() {
  ModelConfig c;
  c.grid = {224, 16};
  c.encoder = {12, 768, 12};
  c.decoder = {4, 768, 6};
  c.bottleneck = {16};
  c.eye_window_rows = 3;
  c.eye_window_cols = 4;
  return c;
}

ModelConfig desk_config() {
  ModelConfig c;
  c.grid = {64, 8};
  c.encoder = {4, 64, 4};
  c.decoder = {2, 64, 4};
  c.bottleneck = {16};
  c.eye_window_rows = 2;
  c.eye_window_cols = 2;
  return c;
}

namespace {
BlockParams add_block(nn::ParamStore& ps, const std::string& prefix, int dim,
                      ParamGroup group) {
  BlockParams b;
  b.ln1_g = ps.add(prefix + ".ln1.g", 1, dim, group);
  b.ln1_b = ps.add(prefix + ".ln1.b", 1, dim, group);
  b.w_qkv = ps.add(prefix + ".attn.w_qkv", dim, 3 * dim, group);
  b.b_qkv = ps.add(prefix + ".attn.b_qkv", 1, 3 * dim, group);
  b.w_proj = ps.add(prefix + ".attn.w_proj", dim, dim, group);
  b.b_proj = ps.add(prefix + ".attn.b_proj", 1, dim, group);
  b.ln2_g = ps.add(prefix + ".ln2.g", 1, dim, group);
  b.ln2_b = ps.add(prefix + ".ln2.b", 1, dim, group);
  b.w_fc1 = ps.add(prefix + ".mlp.w_fc1", dim, 4 * dim, group);
  b.b_fc1 = ps.add(prefix + ".mlp.b_fc1", 1, 4 * dim, group);
  b.w_fc2 = ps.add(prefix + ".mlp.w_fc2", 4 * dim, dim, group);
  b.b_fc2 = ps.add(prefix + ".mlp.b_fc2", 1, dim, group);
  return b;
}
}  // namespace

EmibModel::EmibModel(const ModelConfig& cfg) : cfg_(cfg) {
  cfg_.validate();
  const int ed = cfg.encoder.dim, dd = cfg.decoder.dim;

  embed_w_ = params_.add("enc.embed.w", cfg.grid.token_dim(), ed, ParamGroup::Encoder);
  embed_b_ = params_.add("enc.embed.b", 1, ed, ParamGroup::Encoder);
  for (int i = 0; i < cfg.encoder.depth; ++i)
    enc_blocks_.push_back(
        add_block(params_, "enc.block" + std::to_string(i), ed, ParamGroup::Encoder));
  enc_ln_g_ = params_.add("enc.ln.g", 1, ed, ParamGroup::Encoder);
  enc_ln_b_ = params_.add("enc.ln.b", 1, ed, ParamGroup::Encoder);

  dec_in_w_ = params_.add("dec.in.w", ed, dd, ParamGroup::Decoder);
  dec_in_b_ = params_.add("dec.in.b", 1, dd, ParamGroup::Decoder);
  for (int i = 0; i < cfg.decoder.depth; ++i)
    dec_blocks_.push_back(
        add_block(params_, "dec.block" + std::to_string(i), dd, ParamGroup::Decoder));
  dec_ln_g_ = params_.add("dec.ln.g", 1, dd, ParamGroup::Decoder);
  dec_ln_b_ = params_.add("dec.ln.b", 1, dd, ParamGroup::Decoder);
  mask_token_ = params_.add("dec.mask_token", 1, dd, ParamGroup::Decoder);

  // Bottleneck maps are bias-free so the injection path is exactly linear.
  bn_down_ = params_.add("bn.down.w", ed, cfg.bottleneck.z_dim, ParamGroup::Bottleneck);
  bn_up_ = params_.add("bn.up.w", cfg.bottleneck.z_dim, dd, ParamGroup::Bottleneck);

  head_w_ = params_.add("head.w", dd, cfg.grid.token_dim(), ParamGroup::PixelHead);
  head_b_ = params_.add("head.b", 1, cfg.grid.token_dim(), ParamGroup::PixelHead);

  enc_pos_ = sincos_pos_embed(cfg.grid, ed);
  // decoder table gets a trailing all-zero row for the position-free
  // injection token
  Matrix t = sincos_pos_embed(cfg.grid, dd);
  dec_pos_ = Matrix(t.rows + 1, t.cols);
  std::copy(t.data.begin(), t.data.end(), dec_pos_.data.begin());

  init_params(0);
}

void EmibModel::init_params(uint64_t seed) {
  const Rng base(seed);
  for (int id = 0; id < params_.count(); ++id) {
    const auto& info = params_.info(id);
    const bool is_norm_gain = info.name.ends_with("ln1.g") ||
                              info.name.ends_with("ln2.g") ||
                              info.name.ends_with("ln.g");
    if (is_norm_gain) {
      params_.fill(id, 1.0f);
    } else if (info.rows == 1 && !info.name.ends_with("mask_token")) {
      params_.fill(id, 0.0f);  // biases and norm shifts
    } else if (info.name.starts_with("bn.") || info.name == "enc.embed.w") {
      // fan-in scaling keeps the injection pathway and the patch-content
      // signal alive at the start; with the blanket 0.02 the squeeze path
      // carries no usable gradient and patch content starts an order of
      // magnitude below the positional tables
      params_.init_trunc_normal(id, base, 1.0 / std::sqrt(static_cast<double>(info.rows)));
    } else {
      params_.init_trunc_normal(id, base, 0.02);
    }
  }
}

Var EmibModel::run_blocks(Graph& g, Var x, const std::vector<BlockParams>& blocks,
                          int heads, int ln_g, int ln_b) const {
  const int dim = g.cols(x);
  const int hd = dim / heads;
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(hd));
  for (const BlockParams& blk : blocks) {
    Var h = g.layer_norm(x, g.param(blk.ln1_g), g.param(blk.ln1_b));
    Var qkv = g.bias_add_row(g.matmul(h, g.param(blk.w_qkv)), g.param(blk.b_qkv));
    std::vector<Var> heads_out;
    heads_out.reserve(static_cast<size_t>(heads));
    for (int i = 0; i < heads; ++i) {
      Var q = g.slice_cols(qkv, i * hd, hd);
      Var k = g.slice_cols(qkv, dim + i * hd, hd);
      Var v = g.slice_cols(qkv, 2 * dim + i * hd, hd);
      Var scores = g.scale(g.matmul_nt(q, k), att_scale);
      Var probs = g.softmax_rows(scores);
      heads_out.push_back(g.matmul(probs, v));
    }
    Var att = g.concat_cols(heads_out);
    x = g.add(x, g.bias_add_row(g.matmul(att, g.param(blk.w_proj)), g.param(blk.b_proj)));
    Var h2 = g.layer_norm(x, g.param(blk.ln2_g), g.param(blk.ln2_b));
    Var m = g.gelu(g.bias_add_row(g.matmul(h2, g.param(blk.w_fc1)), g.param(blk.b_fc1)));
    x = g.add(x, g.bias_add_row(g.matmul(m, g.param(blk.w_fc2)), g.param(blk.b_fc2)));
  }
  return g.layer_norm(x, g.param(ln_g), g.param(ln_b));
}

Var EmibModel::encode(Graph& g, Var tokens, std::span<const int> positions) const {
  if (g.rows(tokens) != static_cast<int>(positions.size()))
    throw ConfigError("encode: token rows must equal position count");
  if (g.cols(tokens) != cfg_.grid.token_dim())
    throw ConfigError("encode: token dim mismatch");
  Var x = g.bias_add_row(g.matmul(tokens, g.param(embed_w_)), g.param(embed_b_));
  x = g.add_gather_rows(x, enc_pos_, positions);
  return run_blocks(g, x, enc_blocks_, cfg_.encoder.heads, enc_ln_g_, enc_ln_b_);
}

std::pair<Var, Var> EmibModel::bottleneck_inject(Graph& g, Var latents) const {
  if (g.rows(latents) == 0)
    throw ConfigError("bottleneck_inject: empty latent set");
  Var pooled = g.mean_rows(latents);
  Var z_b = g.matmul(pooled, g.param(bn_down_));
  Var inj = g.matmul(z_b, g.param(bn_up_));
  return {z_b, inj};
}

Var EmibModel::decode(Graph& g, Var visible_latents, std::span<const int> visible,
                      std::span<const int> masked, Var inj) const {
  const int n = cfg_.grid.n_patches();
  // visible and masked must partition the grid
  {
    std::vector<char> seen(static_cast<size_t>(n), 0);
    for (int p : visible) {
      if (p < 0 || p >= n || seen[static_cast<size_t>(p)])
        throw ConfigError("decode: visible positions overlap or out of range");
      seen[static_cast<size_t>(p)] = 1;
    }
    for (int p : masked) {
      if (p < 0 || p >= n || seen[static_cast<size_t>(p)])
        throw ConfigError("decode: masked positions overlap visible");
      seen[static_cast<size_t>(p)] = 1;
    }
    for (char s : seen)
      if (!s) throw ConfigError("decode: positions do not cover the grid");
  }
  Var lat_proj{-1};
  if (!visible.empty()) {
    lat_proj = g.bias_add_row(g.matmul(visible_latents, g.param(dec_in_w_)),
                              g.param(dec_in_b_));
  } else {
    const Matrix empty(0, cfg_.decoder.dim);
    lat_proj = g.constant(empty);
  }
  Var seq = g.assemble_decoder(lat_proj, g.param(mask_token_), inj, visible, n);
  // positional rows in grid order; the injection token is global and gets the
  // trailing zero row of the padded table
  std::vector<int> pos_idx(static_cast<size_t>(g.rows(seq)));
  for (int i = 0; i < n; ++i) pos_idx[static_cast<size_t>(i)] = i;
  if (inj.valid()) pos_idx.back() = n;
  seq = g.add_gather_rows(seq, dec_pos_, pos_idx);
  Var y = run_blocks(g, seq, dec_blocks_, cfg_.decoder.heads, dec_ln_g_, dec_ln_b_);
  if (inj.valid()) y = g.slice_rows(y, 0, n);
  return g.bias_add_row(g.matmul(y, g.param(head_w_)), g.param(head_b_));
}

ForwardOutput forward_emib(Graph& g, const EmibModel& model, const Matrix& tokens,
                           const MaskPlan& recon_plan, const MaskPlan& inj_plan,
                           const ForwardOptions& opt) {
  const ModelConfig& cfg = model.config();
  if (tokens.rows != cfg.grid.n_patches() || tokens.cols != cfg.grid.token_dim())
    throw ConfigError("forward_emib: token matrix does not match the model grid");

  ForwardOutput out;

  const Matrix recon_tokens = gather_rows(tokens, recon_plan.visible);
  Var recon_in = g.constant(recon_tokens);
  out.z_o = model.encode(g, recon_in, recon_plan.visible);
  Var recon_latents = opt.stopgrad_recon_encoder ? g.stop_grad(out.z_o) : out.z_o;

  Var inj_token{-1};
  if (opt.use_injection) {
    const Matrix inj_tokens = gather_rows(tokens, inj_plan.visible);
    Var inj_in = g.constant(inj_tokens);
    Var full_latents = model.encode(g, inj_in, inj_plan.visible);
    if (opt.stopgrad_injection_encoder) full_latents = g.stop_grad(full_latents);
    auto [z_b, inj] = model.bottleneck_inject(g, full_latents);
    out.z_b = z_b;
    out.inj_token = inj;
    inj_token = inj;
  }

  out.pred_pixels = model.decode(g, recon_latents, recon_plan.visible,
                                 recon_plan.masked, inj_token);
  return out;
}

Matrix encode_eval(const EmibModel& model, const Matrix& tokens,
                   std::span<const int> positions) {
  nn::Graph g(&model.params());
  Var in = g.constant(tokens);
  return g.value_matrix(model.encode(g, in, positions));
}

std::pair<std::vector<float>, std::vector<float>> bottleneck_inject_eval(
    const EmibModel& model, const Matrix& latents) {
  nn::Graph g(&model.params());
  Var in = g.constant(latents);
  auto [z, inj] = model.bottleneck_inject(g, in);
  const Matrix zm = g.value_matrix(z);
  const Matrix im = g.value_matrix(inj);
  return {zm.data, im.data};
}

Matrix forward_pred_eval(const EmibModel& model, const Matrix& image_tokens,
                         const MaskPlan& recon_plan, const MaskPlan& inj_plan,
                         bool use_injection) {
  nn::Graph g(&model.params());
  ForwardOptions opt;
  opt.use_injection = use_injection;
  ForwardOutput out = forward_emib(g, model, image_tokens, recon_plan, inj_plan, opt);
  return g.value_matrix(out.pred_pixels);
}

}  // namespace emib
