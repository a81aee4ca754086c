#pragma once

#include <span>
#include <vector>

#include "emib/common.hpp"
#include "emib/nn/params.hpp"

namespace emib::nn {

struct Var {
  int id = -1;
  bool valid() const { return id >= 0; }
};

/// Define-by-run reverse-mode graph over row-major float matrices.
///
/// Values are computed eagerly when an op is built; backward() walks the tape
/// in reverse and accumulates parameter gradients into a caller-owned flat
/// buffer aligned with the ParamStore layout. One Graph holds one sample's
/// tape; reset() recycles the arenas so steady-state training does not
/// allocate.
class Graph {
 public:
  explicit Graph(const ParamStore* store) : store_(store) {}

  void reset();

  // ---- leaves ----
  Var constant(int rows, int cols, const float* data);  // copies
  Var constant(const Matrix& m) { return constant(m.rows, m.cols, m.data.data()); }
  /// No copy; caller keeps `data` alive for the graph's lifetime.
  Var const_view(int rows, int cols, const float* data);
  Var param(int param_id);

  // ---- elementwise / linear ----
  Var matmul(Var a, Var b);     // A[m,k] * B[k,n]
  Var matmul_nt(Var a, Var b);  // A[m,k] * B[n,k]^T
  Var add(Var a, Var b);
  Var sub(Var a, Var b);
  Var scale(Var a, float s);
  Var add_scaled(Var a, Var b, float s);  // A + s*B
  Var bias_add_row(Var a, Var bias);      // bias broadcast over rows
  /// A[r,:] + table.row(idx[r]) for each row; table is fixed (no gradient).
  Var add_gather_rows(Var a, const Matrix& table, std::span<const int> idx);
  Var layer_norm(Var x, Var gamma, Var beta, float eps = 1e-6f);
  Var gelu(Var a);
  Var relu(Var a);
  Var softmax_rows(Var a);
  Var slice_cols(Var a, int c0, int width);
  Var slice_rows(Var a, int r0, int height);
  Var concat_cols(std::span<const Var> parts);
  Var mean_rows(Var a);  // -> 1 x n
  Var stop_grad(Var a);  // identity value, blocks gradient

  // ---- sequence assembly for the decoder ----
  /// Builds the decoder input: one row per grid position (projected visible
  /// latent where visible, mask token elsewhere), plus an optional trailing
  /// injection row. `visible` lists the grid positions of `latents` rows,
  /// ascending.
  Var assemble_decoder(Var latents, Var mask_token, Var inj,
                       std::span<const int> visible, int n_positions);

  // ---- losses ----
  /// Mean over the listed patch rows (all token_dim entries each) of squared
  /// or absolute prediction error. `gt` must outlive the graph.
  Var masked_patch_mse(Var pred, const float* gt, std::span<const int> patches,
                       bool absolute);
  /// Full-matrix mean squared error against an external target (same shape).
  Var mse(Var a, const float* target);

  // ---- student convnet ----
  /// x: (in_c, h*w); w: (out_c, in_c*k*k); bias: (1, out_c).
  Var conv2d(Var x, Var w, Var bias, int in_c, int h, int wdt, int out_c,
             int k, int stride, int pad);
  Var group_norm(Var x, Var gamma, Var beta, int groups, float eps = 1e-5f);
  Var global_avg_pool(Var x);  // (c, hw) -> (1, c)

  // ---- access ----
  int rows(Var v) const;
  int cols(Var v) const;
  const float* value(Var v) const;
  float scalar(Var v) const;
  Matrix value_matrix(Var v) const;

  /// Reverse pass from a 1x1 loss node. Parameter gradients are *added* into
  /// `sink`, which must have ParamStore::total_size() entries.
  void backward(Var loss, std::span<float> sink);

  /// Reverse pass from any node with a caller-supplied output gradient.
  /// Lets two graphs over different stores be chained manually.
  void backward_seeded(Var out, std::span<const float> seed, std::span<float> sink);

  /// Gradient buffer of a node; valid after backward until the next reset.
  std::span<const float> grad(Var v) const;

 private:
  enum class Op : uint8_t {
    Const, ConstView, Param, MatMul, MatMulNT, AddScaled, Scale, BiasAddRow,
    AddGatherRows, LayerNorm, Gelu, Relu, SoftmaxRows, SliceCols, SliceRows,
    ConcatCols, MeanRows, StopGrad, Assemble, MaskedPatchMse, Mse, Conv2d,
    GroupNorm, GlobalAvgPool,
  };

  struct Node {
    Op op;
    int a = -1, b = -1, c = -1;
    int rows = 0, cols = 0;
    size_t val = 0, grd = 0;
    const float* ext = nullptr;  // external value storage (ConstView, Param)
    const float* tgt = nullptr;  // external loss target
    float f0 = 0.0f;
    int i0 = 0, i1 = 0, i2 = 0, i3 = 0, i4 = 0, i5 = 0;
    int aux = -1;
    int param_id = -1;
  };

  Var push(Node n);
  int new_aux(std::span<const int> idx);
  const float* val_ptr(const Node& n) const {
    return n.ext ? n.ext : vbuf_.data() + n.val;
  }
  float* val_ptr_mut(const Node& n) { return vbuf_.data() + n.val; }
  float* grd_ptr(const Node& n) { return gbuf_.data() + n.grd; }
  const Node& node(Var v) const;
  void check_shape(Var v, int r, int c, const char* who) const;
  void backward_node(Node& n);

  const ParamStore* store_;
  std::vector<Node> nodes_;
  std::vector<float> vbuf_, gbuf_;
  size_t vused_ = 0, gused_ = 0;
  std::vector<std::vector<int>> aux_;
  size_t aux_used_ = 0;
  std::span<float> sink_;
};

}  // namespace emib::nn
