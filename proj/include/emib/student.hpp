#pragma once

#include <vector>

#include "emib/nn/graph.hpp"
#include "emib/nn/params.hpp"

namespace emib {

/// Residual convolutional student: stem conv (stride 2), one stage per width
/// with stride-2 transitions between them, group norm + relu, global average
/// pool, then a linear head onto the teacher's injection space.
struct StudentConfig {
  std::vector<int> stage_widths = {16, 32, 64};
  std::vector<int> blocks_per_stage = {1, 1, 1};
  int groups = 8;
  int z_dim = 16;

  void validate() const;
};

class StudentModel {
 public:
  StudentModel(const StudentConfig& cfg, int image_size);

  void init_params(uint64_t seed);

  const StudentConfig& config() const { return cfg_; }
  int image_size() const { return image_size_; }
  nn::ParamStore& params() { return params_; }
  const nn::ParamStore& params() const { return params_; }

  /// image_chw: (3, S*S) constant/view node. Returns 1 x z_dim.
  nn::Var forward(nn::Graph& g, nn::Var image_chw) const;

  /// Convenience eval on an HWC image matrix (S x S*3).
  std::vector<float> embed(const Matrix& image_hwc) const;

 private:
  struct ConvIds {
    int w, b, gn_g, gn_b;
  };
  struct BlockIds {
    ConvIds c1, c2;
  };

  StudentConfig cfg_;
  int image_size_;
  nn::ParamStore params_;
  ConvIds stem_;
  std::vector<ConvIds> transitions_;
  std::vector<std::vector<BlockIds>> stages_;
  int head_w_, head_b_;

  nn::Var conv_gn_relu(nn::Graph& g, nn::Var x, const ConvIds& ids, int in_c, int h,
                       int w, int out_c, int stride, bool relu_after) const;
};

/// HWC (S x S*3) -> CHW (3, S*S) layout change for the convnet.
Matrix hwc_to_chw(const Matrix& image_hwc);

}  // namespace emib
