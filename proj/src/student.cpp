#include "emib/student.hpp"

#include <cmath>

namespace emib {

using nn::Graph;
using nn::ParamGroup;
using nn::Var;

void StudentConfig::validate() const {
  if (stage_widths.empty() || stage_widths.size() != blocks_per_stage.size())
    throw ConfigError("student: stage_widths and blocks_per_stage must align");
  for (size_t i = 0; i < stage_widths.size(); ++i) {
    if (stage_widths[i] <= 0 || blocks_per_stage[i] < 0)
      throw ConfigError("student: bad stage spec");
    if (stage_widths[i] % groups != 0)
      throw ConfigError("student: widths must be divisible by the group count");
  }
  if (z_dim <= 0) throw ConfigError("student: z_dim must be positive");
}

StudentModel::StudentModel(const StudentConfig& cfg, int image_size)
    : cfg_(cfg), image_size_(image_size) {
  cfg_.validate();
  if (image_size % (1 << cfg.stage_widths.size()) != 0)
    throw ConfigError("student: image size must be divisible by the total stride");

  auto add_conv = [&](const std::string& name, int in_c, int out_c) {
    ConvIds ids;
    ids.w = params_.add(name + ".w", out_c, in_c * 9, ParamGroup::Student);
    ids.b = params_.add(name + ".b", 1, out_c, ParamGroup::Student);
    ids.gn_g = params_.add(name + ".gn.g", 1, out_c, ParamGroup::Student);
    ids.gn_b = params_.add(name + ".gn.b", 1, out_c, ParamGroup::Student);
    return ids;
  };

  stem_ = add_conv("student.stem", 3, cfg.stage_widths[0]);
  for (size_t s = 0; s < cfg.stage_widths.size(); ++s) {
    if (s > 0)
      transitions_.push_back(add_conv("student.trans" + std::to_string(s),
                                      cfg.stage_widths[s - 1], cfg.stage_widths[s]));
    std::vector<BlockIds> blocks;
    for (int b = 0; b < cfg.blocks_per_stage[s]; ++b) {
      const std::string prefix =
          "student.stage" + std::to_string(s) + ".block" + std::to_string(b);
      BlockIds ids;
      ids.c1 = add_conv(prefix + ".c1", cfg.stage_widths[s], cfg.stage_widths[s]);
      ids.c2 = add_conv(prefix + ".c2", cfg.stage_widths[s], cfg.stage_widths[s]);
      blocks.push_back(ids);
    }
    stages_.push_back(std::move(blocks));
  }
  head_w_ = params_.add("student.head.w", cfg.stage_widths.back(), cfg.z_dim,
                        ParamGroup::Student);
  head_b_ = params_.add("student.head.b", 1, cfg.z_dim, ParamGroup::Student);

  init_params(0);
}

void StudentModel::init_params(uint64_t seed) {
  const Rng base(seed);
  for (int id = 0; id < params_.count(); ++id) {
    const auto& info = params_.info(id);
    if (info.name.ends_with("gn.g")) {
      params_.fill(id, 1.0f);
    } else if (info.rows == 1) {
      params_.fill(id, 0.0f);
    } else {
      // he-style scale for the 3x3 convs, truncated
      params_.init_trunc_normal(id, base, std::sqrt(2.0 / info.cols));
    }
  }
}

Var StudentModel::conv_gn_relu(Graph& g, Var x, const ConvIds& ids, int in_c, int h,
                               int w, int out_c, int stride, bool relu_after) const {
  Var y = g.conv2d(x, g.param(ids.w), g.param(ids.b), in_c, h, w, out_c, 3, stride, 1);
  y = g.group_norm(y, g.param(ids.gn_g), g.param(ids.gn_b), cfg_.groups);
  return relu_after ? g.relu(y) : y;
}

Var StudentModel::forward(Graph& g, Var image_chw) const {
  int h = image_size_, w = image_size_;
  if (g.rows(image_chw) != 3 || g.cols(image_chw) != h * w)
    throw ConfigError("student: input must be (3, S*S)");
  Var x = conv_gn_relu(g, image_chw, stem_, 3, h, w, cfg_.stage_widths[0], 2, true);
  h /= 2;
  w /= 2;
  for (size_t s = 0; s < stages_.size(); ++s) {
    const int width = cfg_.stage_widths[s];
    if (s > 0) {
      x = conv_gn_relu(g, x, transitions_[s - 1], cfg_.stage_widths[s - 1], h, w,
                       width, 2, true);
      h /= 2;
      w /= 2;
    }
    for (const BlockIds& blk : stages_[s]) {
      Var r = conv_gn_relu(g, x, blk.c1, width, h, w, width, 1, true);
      r = conv_gn_relu(g, r, blk.c2, width, h, w, width, 1, false);
      x = g.relu(g.add(x, r));
    }
  }
  Var pooled = g.global_avg_pool(x);
  return g.bias_add_row(g.matmul(pooled, g.param(head_w_)), g.param(head_b_));
}

std::vector<float> StudentModel::embed(const Matrix& image_hwc) const {
  Graph g(&params_);
  const Matrix chw = hwc_to_chw(image_hwc);
  Var in = g.constant(chw);
  const Matrix out = g.value_matrix(forward(g, in));
  return out.data;
}

Matrix hwc_to_chw(const Matrix& image_hwc) {
  const int S = image_hwc.rows;
  if (image_hwc.cols != S * 3) throw ConfigError("hwc_to_chw: not an S x S*3 image");
  Matrix out(3, S * S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x)
      for (int c = 0; c < 3; ++c)
        out.at(c, y * S + x) = image_hwc.at(y, x * 3 + c);
  return out;
}

}  // namespace emib
