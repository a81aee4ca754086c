#include "emib/nn/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace emib::nn {

namespace {

// GEMM kernels in accumulation form, register-blocked micro-kernels built on
// GCC vector extensions. Loop order and lane assignment are fixed, so results
// are bitwise deterministic. The generic fallbacks cover widths outside the
// transformer sizes.

#if defined(__AVX512F__)
using vf = float __attribute__((vector_size(64), aligned(4)));
#elif defined(__AVX2__) || defined(__SSE2__) || defined(__ARM_NEON)
using vf = float __attribute__((vector_size(32), aligned(4)));
#else
using vf = float __attribute__((vector_size(16), aligned(4)));
#endif
constexpr int kVL = sizeof(vf) / 4;

inline vf vload(const float* p) { return *reinterpret_cast<const vf*>(p); }
inline void vstore(float* p, vf v) { *reinterpret_cast<vf*>(p) = v; }
inline vf vbroadcast(float x) {
  vf v = {};
  return v + x;
}

// C[m, NV*kVL] += A[m,k] * B[k, NV*kVL], MR rows of C kept in registers
template <int NV, int MR>
void gemm_nn_kern(const float* __restrict__ a, const float* __restrict__ b,
                  float* __restrict__ c, int m, int k) {
  constexpr int n = NV * kVL;
  int i = 0;
  for (; i + MR <= m; i += MR) {
    vf acc[MR][NV];
    for (int r = 0; r < MR; ++r)
      for (int v = 0; v < NV; ++v) acc[r][v] = vload(c + static_cast<size_t>(i + r) * n + v * kVL);
    for (int l = 0; l < k; ++l) {
      const float* br = b + static_cast<size_t>(l) * n;
      vf bv[NV];
      for (int v = 0; v < NV; ++v) bv[v] = vload(br + v * kVL);
      for (int r = 0; r < MR; ++r) {
        const vf s = vbroadcast(a[static_cast<size_t>(i + r) * k + l]);
        for (int v = 0; v < NV; ++v) acc[r][v] += s * bv[v];
      }
    }
    for (int r = 0; r < MR; ++r)
      for (int v = 0; v < NV; ++v) vstore(c + static_cast<size_t>(i + r) * n + v * kVL, acc[r][v]);
  }
  for (; i < m; ++i) {
    vf acc[NV];
    for (int v = 0; v < NV; ++v) acc[v] = vload(c + static_cast<size_t>(i) * n + v * kVL);
    for (int l = 0; l < k; ++l) {
      const vf s = vbroadcast(a[static_cast<size_t>(i) * k + l]);
      const float* br = b + static_cast<size_t>(l) * n;
      for (int v = 0; v < NV; ++v) acc[v] += s * vload(br + v * kVL);
    }
    for (int v = 0; v < NV; ++v) vstore(c + static_cast<size_t>(i) * n + v * kVL, acc[v]);
  }
}

void gemm_nn_generic(const float* __restrict__ a, const float* __restrict__ b,
                     float* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* ar = a + static_cast<size_t>(i) * k;
    float* cr = c + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float s = ar[l];
      const float* br = b + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) cr[j] += s * br[j];
    }
  }
}

// C[m,n] += A[m,k] * B[k,n]
void gemm_nn(const float* __restrict__ a, const float* __restrict__ b,
             float* __restrict__ c, int m, int k, int n) {
  if (n % kVL == 0) {
    switch (n / kVL) {
      case 1: gemm_nn_kern<1, 6>(a, b, c, m, k); return;
      case 2: gemm_nn_kern<2, 6>(a, b, c, m, k); return;
      case 3: gemm_nn_kern<3, 4>(a, b, c, m, k); return;
      case 4: gemm_nn_kern<4, 4>(a, b, c, m, k); return;
      case 6: gemm_nn_kern<6, 3>(a, b, c, m, k); return;
      case 8: gemm_nn_kern<8, 2>(a, b, c, m, k); return;
      case 12: gemm_nn_kern<12, 2>(a, b, c, m, k); return;
      case 16: gemm_nn_kern<16, 1>(a, b, c, m, k); return;
      default: break;
    }
  }
  gemm_nn_generic(a, b, c, m, k, n);
}

// C[k,n] += A[m,k]^T * B[m,n]; same inner shape, C rows indexed by A columns
template <int NV, int MR>
void gemm_tn_kern(const float* __restrict__ a, const float* __restrict__ b,
                  float* __restrict__ c, int m, int k) {
  constexpr int n = NV * kVL;
  int l = 0;
  for (; l + MR <= k; l += MR) {
    vf acc[MR][NV];
    for (int r = 0; r < MR; ++r)
      for (int v = 0; v < NV; ++v) acc[r][v] = vload(c + static_cast<size_t>(l + r) * n + v * kVL);
    for (int i = 0; i < m; ++i) {
      const float* br = b + static_cast<size_t>(i) * n;
      vf bv[NV];
      for (int v = 0; v < NV; ++v) bv[v] = vload(br + v * kVL);
      const float* ar = a + static_cast<size_t>(i) * k + l;
      for (int r = 0; r < MR; ++r) {
        const vf s = vbroadcast(ar[r]);
        for (int v = 0; v < NV; ++v) acc[r][v] += s * bv[v];
      }
    }
    for (int r = 0; r < MR; ++r)
      for (int v = 0; v < NV; ++v) vstore(c + static_cast<size_t>(l + r) * n + v * kVL, acc[r][v]);
  }
  for (; l < k; ++l) {
    vf acc[NV];
    for (int v = 0; v < NV; ++v) acc[v] = vload(c + static_cast<size_t>(l) * n + v * kVL);
    for (int i = 0; i < m; ++i) {
      const vf s = vbroadcast(a[static_cast<size_t>(i) * k + l]);
      const float* br = b + static_cast<size_t>(i) * n;
      for (int v = 0; v < NV; ++v) acc[v] += s * vload(br + v * kVL);
    }
    for (int v = 0; v < NV; ++v) vstore(c + static_cast<size_t>(l) * n + v * kVL, acc[v]);
  }
}

void gemm_tn_generic(const float* __restrict__ a, const float* __restrict__ b,
                     float* __restrict__ c, int m, int k, int n) {
  for (int i = 0; i < m; ++i) {
    const float* ar = a + static_cast<size_t>(i) * k;
    const float* br = b + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float s = ar[l];
      float* cr = c + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) cr[j] += s * br[j];
    }
  }
}

// C[k,n] += A[m,k]^T * B[m,n]
void gemm_tn(const float* __restrict__ a, const float* __restrict__ b,
             float* __restrict__ c, int m, int k, int n) {
  if (n % kVL == 0) {
    switch (n / kVL) {
      case 1: gemm_tn_kern<1, 6>(a, b, c, m, k); return;
      case 2: gemm_tn_kern<2, 6>(a, b, c, m, k); return;
      case 3: gemm_tn_kern<3, 4>(a, b, c, m, k); return;
      case 4: gemm_tn_kern<4, 4>(a, b, c, m, k); return;
      case 6: gemm_tn_kern<6, 3>(a, b, c, m, k); return;
      case 8: gemm_tn_kern<8, 2>(a, b, c, m, k); return;
      case 12: gemm_tn_kern<12, 2>(a, b, c, m, k); return;
      case 16: gemm_tn_kern<16, 1>(a, b, c, m, k); return;
      default: break;
    }
  }
  gemm_tn_generic(a, b, c, m, k, n);
}

// one A row against four B rows, vector partial sums per dot
float hsum(vf v) {
  float s = 0;
  for (int t = 0; t < kVL; ++t) s += v[t];
  return s;
}

// C[m,n] += A[m,k] * B[n,k]^T
// Short inner dims (attention scores) go through a transpose + saxpy form;
// long ones use blocked dot products.
void gemm_nt(const float* __restrict__ a, const float* __restrict__ b,
             float* __restrict__ c, int m, int k, int n) {
  if (k <= 2 * kVL && n >= 16) {
    thread_local std::vector<float> bt;
    bt.resize(static_cast<size_t>(k) * n);
    for (int j = 0; j < n; ++j)
      for (int l = 0; l < k; ++l)
        bt[static_cast<size_t>(l) * n + j] = b[static_cast<size_t>(j) * k + l];
    gemm_nn(a, bt.data(), c, m, k, n);
    return;
  }
  const int kv = k - k % kVL;
  for (int i = 0; i < m; ++i) {
    const float* ar = a + static_cast<size_t>(i) * k;
    float* cr = c + static_cast<size_t>(i) * n;
    int j = 0;
    for (; j + 4 <= n; j += 4) {
      vf acc0 = {}, acc1 = {}, acc2 = {}, acc3 = {};
      const float* b0 = b + static_cast<size_t>(j) * k;
      const float* b1 = b + static_cast<size_t>(j + 1) * k;
      const float* b2 = b + static_cast<size_t>(j + 2) * k;
      const float* b3 = b + static_cast<size_t>(j + 3) * k;
      for (int l = 0; l < kv; l += kVL) {
        const vf av = vload(ar + l);
        acc0 += av * vload(b0 + l);
        acc1 += av * vload(b1 + l);
        acc2 += av * vload(b2 + l);
        acc3 += av * vload(b3 + l);
      }
      float s0 = hsum(acc0), s1 = hsum(acc1), s2 = hsum(acc2), s3 = hsum(acc3);
      for (int l = kv; l < k; ++l) {
        s0 += ar[l] * b0[l];
        s1 += ar[l] * b1[l];
        s2 += ar[l] * b2[l];
        s3 += ar[l] * b3[l];
      }
      cr[j] += s0;
      cr[j + 1] += s1;
      cr[j + 2] += s2;
      cr[j + 3] += s3;
    }
    for (; j < n; ++j) {
      const float* bj = b + static_cast<size_t>(j) * k;
      vf acc = {};
      for (int l = 0; l < kv; l += kVL) acc += vload(ar + l) * vload(bj + l);
      float s = hsum(acc);
      for (int l = kv; l < k; ++l) s += ar[l] * bj[l];
      cr[j] += s;
    }
  }
}

// branch-free exp approximation (~1e-7 relative); inlines into the activation
// and softmax loops so they vectorize without -ffast-math
inline float fast_exp(float x) {
  x = std::min(88.0f, std::max(-87.0f, x));
  const float t = x * 1.4426950408889634f;
  const float fi = std::floor(t + 0.5f);
  const float f = x - fi * 0.6931471805599453f;
  const float p =
      1.0f + f * (1.0f + f * (0.5f + f * (0.16666667f +
                                          f * (0.041666667f + f * 0.0083333333f))));
  union {
    uint32_t u;
    float fl;
  } s;
  s.u = static_cast<uint32_t>(static_cast<int>(fi) + 127) << 23;
  return p * s.fl;
}

// tanh-form gelu pieces
constexpr float kGeluC = 0.7978845608028654f;   // sqrt(2/pi)
constexpr float kGeluK = 0.044715f;

inline float fast_tanh(float x) {
  const float e = fast_exp(2.0f * x);
  return (e - 1.0f) / (e + 1.0f);
}

}  // namespace

const Graph::Node& Graph::node(Var v) const {
  if (!v.valid() || v.id >= static_cast<int>(nodes_.size()))
    throw ConfigError("graph: invalid node handle");
  return nodes_[static_cast<size_t>(v.id)];
}

void Graph::check_shape(Var v, int r, int c, const char* who) const {
  const Node& n = node(v);
  if ((r >= 0 && n.rows != r) || (c >= 0 && n.cols != c))
    throw ConfigError(std::string("graph: shape mismatch in ") + who);
}

void Graph::reset() {
  nodes_.clear();
  vused_ = 0;
  gused_ = 0;
  aux_used_ = 0;
}

Var Graph::push(Node n) {
  const size_t need = static_cast<size_t>(n.rows) * n.cols;
  n.grd = gused_;
  gused_ += need;
  if (gbuf_.size() < gused_) gbuf_.resize(std::max(gused_, gbuf_.size() * 2));
  if (n.op == Op::StopGrad) {
    const Node& p = nodes_[static_cast<size_t>(n.a)];
    n.ext = p.ext;
    n.val = p.val;
  } else if (n.ext == nullptr) {
    n.val = vused_;
    vused_ += need;
    if (vbuf_.size() < vused_) vbuf_.resize(std::max(vused_, vbuf_.size() * 2));
    // only the accumulating kernels read their output before writing it
    if (n.op == Op::MatMul || n.op == Op::MatMulNT || n.op == Op::MeanRows)
      std::fill(vbuf_.begin() + static_cast<ptrdiff_t>(n.val),
                vbuf_.begin() + static_cast<ptrdiff_t>(n.val + need), 0.0f);
  }
  nodes_.push_back(n);
  return Var{static_cast<int>(nodes_.size()) - 1};
}

int Graph::new_aux(std::span<const int> idx) {
  if (aux_used_ == aux_.size()) aux_.emplace_back();
  auto& slot = aux_[aux_used_];
  slot.assign(idx.begin(), idx.end());
  return static_cast<int>(aux_used_++);
}

Var Graph::constant(int rows, int cols, const float* data) {
  Node n;
  n.op = Op::Const;
  n.rows = rows;
  n.cols = cols;
  Var v = push(n);
  std::copy(data, data + static_cast<size_t>(rows) * cols, val_ptr_mut(nodes_.back()));
  return v;
}

Var Graph::const_view(int rows, int cols, const float* data) {
  Node n;
  n.op = Op::ConstView;
  n.rows = rows;
  n.cols = cols;
  n.ext = data;
  return push(n);
}

Var Graph::param(int param_id) {
  const ParamInfo& info = store_->info(param_id);
  Node n;
  n.op = Op::Param;
  n.rows = info.rows;
  n.cols = info.cols;
  n.ext = store_->values(param_id).data();
  n.param_id = param_id;
  return push(n);
}

Var Graph::matmul(Var a, Var b) {
  const int m = node(a).rows, k = node(a).cols, n2 = node(b).cols;
  if (k != node(b).rows) throw ConfigError("graph: matmul inner dims differ");
  Node n;
  n.op = Op::MatMul;
  n.a = a.id;
  n.b = b.id;
  n.rows = m;
  n.cols = n2;
  Var v = push(n);
  gemm_nn(val_ptr(node(a)), val_ptr(node(b)), val_ptr_mut(nodes_.back()), m, k, n2);
  return v;
}

Var Graph::matmul_nt(Var a, Var b) {
  const int m = node(a).rows, k = node(a).cols, n2 = node(b).rows;
  if (k != node(b).cols) throw ConfigError("graph: matmul_nt inner dims differ");
  Node n;
  n.op = Op::MatMulNT;
  n.a = a.id;
  n.b = b.id;
  n.rows = m;
  n.cols = n2;
  Var v = push(n);
  gemm_nt(val_ptr(node(a)), val_ptr(node(b)), val_ptr_mut(nodes_.back()), m, k, n2);
  return v;
}

Var Graph::add(Var a, Var b) { return add_scaled(a, b, 1.0f); }

Var Graph::sub(Var a, Var b) { return add_scaled(a, b, -1.0f); }

Var Graph::add_scaled(Var a, Var b, float s) {
  const int r = node(a).rows, c = node(a).cols;
  check_shape(b, r, c, "add");
  Node n;
  n.op = Op::AddScaled;
  n.a = a.id;
  n.b = b.id;
  n.rows = r;
  n.cols = c;
  n.f0 = s;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  const float* pb = val_ptr(node(b));
  float* out = val_ptr_mut(nodes_.back());
  const size_t sz = static_cast<size_t>(r) * c;
  for (size_t i = 0; i < sz; ++i) out[i] = pa[i] + s * pb[i];
  return v;
}

Var Graph::scale(Var a, float s) {
  const int r = node(a).rows, c = node(a).cols;
  Node n;
  n.op = Op::Scale;
  n.a = a.id;
  n.rows = r;
  n.cols = c;
  n.f0 = s;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  const size_t sz = static_cast<size_t>(r) * c;
  for (size_t i = 0; i < sz; ++i) out[i] = s * pa[i];
  return v;
}

Var Graph::bias_add_row(Var a, Var bias) {
  const int rr = node(a).rows, cc = node(a).cols;
  check_shape(bias, 1, cc, "bias_add_row");
  Node n;
  n.op = Op::BiasAddRow;
  n.a = a.id;
  n.b = bias.id;
  n.rows = rr;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  const float* pb = val_ptr(node(bias));
  float* out = val_ptr_mut(nodes_.back());
  for (int r = 0; r < rr; ++r) {
    const float* ar = pa + static_cast<size_t>(r) * cc;
    float* o = out + static_cast<size_t>(r) * cc;
    for (int j = 0; j < cc; ++j) o[j] = ar[j] + pb[j];
  }
  return v;
}

Var Graph::add_gather_rows(Var a, const Matrix& table, std::span<const int> idx) {
  const int rr = node(a).rows, cc = node(a).cols;
  if (static_cast<int>(idx.size()) != rr || table.cols != cc)
    throw ConfigError("graph: add_gather_rows shape mismatch");
  Node n;
  n.op = Op::AddGatherRows;
  n.a = a.id;
  n.rows = rr;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  for (int r = 0; r < rr; ++r) {
    const float* t = table.row(idx[static_cast<size_t>(r)]);
    const float* ar = pa + static_cast<size_t>(r) * cc;
    float* o = out + static_cast<size_t>(r) * cc;
    for (int j = 0; j < cc; ++j) o[j] = ar[j] + t[j];
  }
  return v;
}

Var Graph::layer_norm(Var x, Var gamma, Var beta, float eps) {
  const int rr = node(x).rows, cc = node(x).cols;
  check_shape(gamma, 1, cc, "layer_norm");
  check_shape(beta, 1, cc, "layer_norm");
  Node n;
  n.op = Op::LayerNorm;
  n.a = x.id;
  n.b = gamma.id;
  n.c = beta.id;
  n.rows = rr;
  n.cols = cc;
  n.f0 = eps;
  Var v = push(n);
  const float* px = val_ptr(node(x));
  const float* pg = val_ptr(node(gamma));
  const float* pb = val_ptr(node(beta));
  float* out = val_ptr_mut(nodes_.back());
  const int c = cc;
  for (int r = 0; r < rr; ++r) {
    const float* xr = px + static_cast<size_t>(r) * c;
    float* o = out + static_cast<size_t>(r) * c;
    float mu = 0;
    for (int j = 0; j < c; ++j) mu += xr[j];
    mu /= static_cast<float>(c);
    float var = 0;
    for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
    var /= static_cast<float>(c);
    const float inv = 1.0f / std::sqrt(var + eps);
    for (int j = 0; j < c; ++j) o[j] = (xr[j] - mu) * inv * pg[j] + pb[j];
  }
  return v;
}

Var Graph::gelu(Var a) {
  const int rr = node(a).rows, cc = node(a).cols;
  Node n;
  n.op = Op::Gelu;
  n.a = a.id;
  n.rows = rr;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  const size_t sz = static_cast<size_t>(rr) * cc;
  for (size_t i = 0; i < sz; ++i) {
    const float x = pa[i];
    out[i] = 0.5f * x * (1.0f + fast_tanh(kGeluC * (x + kGeluK * x * x * x)));
  }
  return v;
}

Var Graph::relu(Var a) {
  const int rr = node(a).rows, cc = node(a).cols;
  Node n;
  n.op = Op::Relu;
  n.a = a.id;
  n.rows = rr;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  const size_t sz = static_cast<size_t>(rr) * cc;
  for (size_t i = 0; i < sz; ++i) out[i] = pa[i] > 0 ? pa[i] : 0.0f;
  return v;
}

Var Graph::softmax_rows(Var a) {
  const int rr = node(a).rows, cc = node(a).cols;
  Node n;
  n.op = Op::SoftmaxRows;
  n.a = a.id;
  n.rows = rr;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  const int c = cc;
  for (int r = 0; r < rr; ++r) {
    const float* xr = pa + static_cast<size_t>(r) * c;
    float* o = out + static_cast<size_t>(r) * c;
    float mx = xr[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, xr[j]);
    float sum = 0;
    for (int j = 0; j < c; ++j) {
      o[j] = fast_exp(xr[j] - mx);
      sum += o[j];
    }
    const float inv = 1.0f / sum;
    for (int j = 0; j < c; ++j) o[j] *= inv;
  }
  return v;
}

Var Graph::slice_cols(Var a, int c0, int width) {
  const int rr = node(a).rows, cc = node(a).cols;
  if (c0 < 0 || width <= 0 || c0 + width > cc)
    throw ConfigError("graph: slice out of range");
  Node n;
  n.op = Op::SliceCols;
  n.a = a.id;
  n.rows = rr;
  n.cols = width;
  n.i0 = c0;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  for (int r = 0; r < rr; ++r)
    std::copy(pa + static_cast<size_t>(r) * cc + c0,
              pa + static_cast<size_t>(r) * cc + c0 + width,
              out + static_cast<size_t>(r) * width);
  return v;
}

Var Graph::slice_rows(Var a, int r0, int height) {
  const int rr = node(a).rows, cc = node(a).cols;
  if (r0 < 0 || height < 0 || r0 + height > rr)
    throw ConfigError("graph: row slice out of range");
  Node n;
  n.op = Op::SliceRows;
  n.a = a.id;
  n.rows = height;
  n.cols = cc;
  n.i0 = r0;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  std::copy(pa + static_cast<size_t>(r0) * cc,
            pa + static_cast<size_t>(r0 + height) * cc, out);
  return v;
}

Var Graph::concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ConfigError("graph: concat of nothing");
  int total = 0;
  const int rows0 = node(parts[0]).rows;
  std::vector<int> ids;
  ids.reserve(parts.size());
  for (Var p : parts) {
    check_shape(p, rows0, -1, "concat_cols");
    total += node(p).cols;
    ids.push_back(p.id);
  }
  Node n;
  n.op = Op::ConcatCols;
  n.rows = rows0;
  n.cols = total;
  n.aux = new_aux(ids);
  Var v = push(n);
  float* out = val_ptr_mut(nodes_.back());
  int c0 = 0;
  for (Var p : parts) {
    const Node& np = node(p);
    const float* pp = val_ptr(np);
    for (int r = 0; r < rows0; ++r)
      std::copy(pp + static_cast<size_t>(r) * np.cols,
                pp + static_cast<size_t>(r + 1) * np.cols,
                out + static_cast<size_t>(r) * total + c0);
    c0 += np.cols;
  }
  return v;
}

Var Graph::mean_rows(Var a) {
  const int rr = node(a).rows, cc = node(a).cols;
  if (rr == 0) throw ConfigError("graph: mean over zero rows");
  Node n;
  n.op = Op::MeanRows;
  n.a = a.id;
  n.rows = 1;
  n.cols = cc;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  float* out = val_ptr_mut(nodes_.back());
  for (int r = 0; r < rr; ++r)
    for (int j = 0; j < cc; ++j) out[j] += pa[static_cast<size_t>(r) * cc + j];
  const float inv = 1.0f / static_cast<float>(rr);
  for (int j = 0; j < cc; ++j) out[j] *= inv;
  return v;
}

Var Graph::stop_grad(Var a) {
  const Node& na = node(a);
  Node n;
  n.op = Op::StopGrad;
  n.a = a.id;
  n.rows = na.rows;
  n.cols = na.cols;
  return push(n);
}

Var Graph::assemble_decoder(Var latents, Var mask_token, Var inj,
                            std::span<const int> visible, int n_positions) {
  const Node& nl = node(latents);
  const Node& nm = node(mask_token);
  const int dd = nm.cols;
  if (nl.rows != static_cast<int>(visible.size()) || (nl.rows > 0 && nl.cols != dd))
    throw ConfigError("graph: assemble latents/visible mismatch");
  if (inj.valid()) check_shape(inj, 1, dd, "assemble_decoder");
  Node n;
  n.op = Op::Assemble;
  n.a = latents.id;
  n.b = mask_token.id;
  n.c = inj.valid() ? inj.id : -1;
  n.rows = n_positions + (inj.valid() ? 1 : 0);
  n.cols = dd;
  n.i0 = n_positions;
  n.aux = new_aux(visible);
  Var v = push(n);
  const float* pl = val_ptr(node(latents));
  const float* pm = val_ptr(node(mask_token));
  float* out = val_ptr_mut(nodes_.back());
  size_t vi = 0;
  for (int p = 0; p < n_positions; ++p) {
    float* o = out + static_cast<size_t>(p) * dd;
    if (vi < visible.size() && visible[vi] == p) {
      std::copy(pl + vi * dd, pl + (vi + 1) * dd, o);
      ++vi;
    } else {
      std::copy(pm, pm + dd, o);
    }
  }
  if (vi != visible.size())
    throw ConfigError("graph: assemble visible positions out of range");
  if (inj.valid()) {
    const float* pi = val_ptr(node(inj));
    std::copy(pi, pi + dd, out + static_cast<size_t>(n_positions) * dd);
  }
  return v;
}

Var Graph::masked_patch_mse(Var pred, const float* gt, std::span<const int> patches,
                            bool absolute) {
  if (patches.empty()) throw ConfigError("graph: loss over empty patch set");
  const int prows = node(pred).rows, pcols = node(pred).cols;
  Node n;
  n.op = Op::MaskedPatchMse;
  n.a = pred.id;
  n.rows = 1;
  n.cols = 1;
  n.tgt = gt;
  n.i0 = absolute ? 1 : 0;
  n.aux = new_aux(patches);
  Var v = push(n);
  const float* pp = val_ptr(node(pred));
  double acc = 0.0;
  for (int p : patches) {
    if (p < 0 || p >= prows) throw ConfigError("graph: loss patch out of range");
    const float* pr = pp + static_cast<size_t>(p) * pcols;
    const float* gr = gt + static_cast<size_t>(p) * pcols;
    float part = 0.0f;
    for (int j = 0; j < pcols; ++j) {
      const float d = pr[j] - gr[j];
      part += absolute ? std::fabs(d) : d * d;
    }
    acc += part;
  }
  const double denom = static_cast<double>(patches.size()) * pcols;
  *val_ptr_mut(nodes_.back()) = static_cast<float>(acc / denom);
  return v;
}

Var Graph::mse(Var a, const float* target) {
  const int rr = node(a).rows, cc = node(a).cols;
  Node n;
  n.op = Op::Mse;
  n.a = a.id;
  n.rows = 1;
  n.cols = 1;
  n.tgt = target;
  Var v = push(n);
  const float* pa = val_ptr(node(a));
  const size_t sz = static_cast<size_t>(rr) * cc;
  double acc = 0.0;
  for (size_t i = 0; i < sz; ++i) {
    const double d = static_cast<double>(pa[i]) - target[i];
    acc += d * d;
  }
  *val_ptr_mut(nodes_.back()) = static_cast<float>(acc / static_cast<double>(sz));
  return v;
}

Var Graph::conv2d(Var x, Var w, Var bias, int in_c, int h, int wdt, int out_c,
                  int k, int stride, int pad) {
  check_shape(x, in_c, h * wdt, "conv2d input");
  check_shape(w, out_c, in_c * k * k, "conv2d weight");
  check_shape(bias, 1, out_c, "conv2d bias");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (wdt + 2 * pad - k) / stride + 1;
  Node n;
  n.op = Op::Conv2d;
  n.a = x.id;
  n.b = w.id;
  n.c = bias.id;
  n.rows = out_c;
  n.cols = ho * wo;
  n.i0 = in_c;
  n.i1 = h;
  n.i2 = wdt;
  n.i3 = k;
  n.i4 = stride;
  n.i5 = pad;
  Var v = push(n);
  const float* px = val_ptr(node(x));
  const float* pw = val_ptr(node(w));
  const float* pb = val_ptr(node(bias));
  float* out = val_ptr_mut(nodes_.back());
  for (int co = 0; co < out_c; ++co) {
    float* plane = out + static_cast<size_t>(co) * ho * wo;
    for (int i = 0; i < ho * wo; ++i) plane[i] = pb[co];
    for (int ci = 0; ci < in_c; ++ci) {
      const float* xplane = px + static_cast<size_t>(ci) * h * wdt;
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const float wv =
              pw[(static_cast<size_t>(co) * in_c + ci) * k * k + ky * k + kx];
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            const float* xrow = xplane + static_cast<size_t>(iy) * wdt;
            float* orow = plane + static_cast<size_t>(oy) * wo;
            const int lo = std::max(0, (pad - kx + stride - 1) / stride);
            const int hi = std::min(wo, (wdt - 1 - kx + pad) / stride + 1);
            for (int ox = lo; ox < hi; ++ox)
              orow[ox] += wv * xrow[ox * stride + kx - pad];
          }
        }
      }
    }
  }
  return v;
}

Var Graph::group_norm(Var x, Var gamma, Var beta, int groups, float eps) {
  const int rr = node(x).rows, cc = node(x).cols;
  if (groups <= 0 || rr % groups != 0)
    throw ConfigError("graph: group_norm channels not divisible by groups");
  check_shape(gamma, 1, rr, "group_norm");
  check_shape(beta, 1, rr, "group_norm");
  Node n;
  n.op = Op::GroupNorm;
  n.a = x.id;
  n.b = gamma.id;
  n.c = beta.id;
  n.rows = rr;
  n.cols = cc;
  n.i0 = groups;
  n.f0 = eps;
  Var v = push(n);
  const float* px = val_ptr(node(x));
  const float* pg = val_ptr(node(gamma));
  const float* pb = val_ptr(node(beta));
  float* out = val_ptr_mut(nodes_.back());
  const int cs = rr / groups;
  const size_t hw = static_cast<size_t>(cc);
  for (int g = 0; g < groups; ++g) {
    const float* xg = px + static_cast<size_t>(g) * cs * hw;
    double mu = 0;
    for (size_t i = 0; i < cs * hw; ++i) mu += xg[i];
    mu /= static_cast<double>(cs * hw);
    double var = 0;
    for (size_t i = 0; i < cs * hw; ++i) {
      const double d = xg[i] - mu;
      var += d * d;
    }
    var /= static_cast<double>(cs * hw);
    const float inv = static_cast<float>(1.0 / std::sqrt(var + eps));
    const float muf = static_cast<float>(mu);
    for (int c = 0; c < cs; ++c) {
      const int ch = g * cs + c;
      const float* xr = px + static_cast<size_t>(ch) * hw;
      float* o = out + static_cast<size_t>(ch) * hw;
      for (size_t i = 0; i < hw; ++i) o[i] = (xr[i] - muf) * inv * pg[ch] + pb[ch];
    }
  }
  return v;
}

Var Graph::global_avg_pool(Var x) {
  const int rr = node(x).rows, cc = node(x).cols;
  Node n;
  n.op = Op::GlobalAvgPool;
  n.a = x.id;
  n.rows = 1;
  n.cols = rr;
  Var v = push(n);
  const float* px = val_ptr(node(x));
  float* out = val_ptr_mut(nodes_.back());
  const float inv = 1.0f / static_cast<float>(cc);
  for (int c = 0; c < rr; ++c) {
    float s = 0;
    for (int i = 0; i < cc; ++i) s += px[static_cast<size_t>(c) * cc + i];
    out[c] = s * inv;
  }
  return v;
}

int Graph::rows(Var v) const { return node(v).rows; }
int Graph::cols(Var v) const { return node(v).cols; }
const float* Graph::value(Var v) const { return val_ptr(node(v)); }

float Graph::scalar(Var v) const {
  const Node& n = node(v);
  if (n.rows != 1 || n.cols != 1) throw ConfigError("graph: scalar() on non-scalar");
  return *val_ptr(n);
}

Matrix Graph::value_matrix(Var v) const {
  const Node& n = node(v);
  Matrix m(n.rows, n.cols);
  std::copy(val_ptr(n), val_ptr(n) + m.size(), m.data.begin());
  return m;
}

void Graph::backward(Var loss, std::span<float> sink) {
  const Node& ln = node(loss);
  if (ln.rows != 1 || ln.cols != 1)
    throw ConfigError("graph: backward must start from a scalar");
  const float one = 1.0f;
  backward_seeded(loss, {&one, 1}, sink);
}

void Graph::backward_seeded(Var out, std::span<const float> seed,
                            std::span<float> sink) {
  const Node& on = node(out);
  if (seed.size() != static_cast<size_t>(on.rows) * on.cols)
    throw ConfigError("graph: backward seed size mismatch");
  if (sink.size() != store_->total_size())
    throw ConfigError("graph: gradient sink size mismatch");
  std::fill(gbuf_.begin(), gbuf_.begin() + static_cast<ptrdiff_t>(gused_), 0.0f);
  sink_ = sink;
  std::copy(seed.begin(), seed.end(), gbuf_.begin() + static_cast<ptrdiff_t>(on.grd));
  for (int id = out.id; id >= 0; --id) backward_node(nodes_[static_cast<size_t>(id)]);
  sink_ = {};
}

std::span<const float> Graph::grad(Var v) const {
  const Node& n = node(v);
  return {gbuf_.data() + n.grd, static_cast<size_t>(n.rows) * n.cols};
}

void Graph::backward_node(Node& n) {
  const size_t sz = static_cast<size_t>(n.rows) * n.cols;
  if (sz == 0) return;
  float* g = grd_ptr(n);
  bool any = false;
  for (size_t i = 0; i < sz; ++i)
    if (g[i] != 0.0f) {
      any = true;
      break;
    }
  if (!any) return;

  switch (n.op) {
    case Op::Const:
    case Op::ConstView:
      return;
    case Op::Param: {
      float* s = sink_.data() + store_->info(n.param_id).offset;
      for (size_t i = 0; i < sz; ++i) s[i] += g[i];
      return;
    }
    case Op::MatMul: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      Node& nb = nodes_[static_cast<size_t>(n.b)];
      // dA += dC * B^T ; dB += A^T * dC
      gemm_nt(g, val_ptr(nb), grd_ptr(na), n.rows, n.cols, na.cols);
      gemm_tn(val_ptr(na), g, grd_ptr(nb), na.rows, na.cols, n.cols);
      return;
    }
    case Op::MatMulNT: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      Node& nb = nodes_[static_cast<size_t>(n.b)];
      // C = A * B^T: dA += dC * B ; dB += dC^T * A
      gemm_nn(g, val_ptr(nb), grd_ptr(na), n.rows, n.cols, na.cols);
      gemm_tn(g, val_ptr(na), grd_ptr(nb), n.rows, n.cols, na.cols);
      return;
    }
    case Op::AddScaled: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      Node& nb = nodes_[static_cast<size_t>(n.b)];
      float* ga = grd_ptr(na);
      float* gb = grd_ptr(nb);
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i];
      for (size_t i = 0; i < sz; ++i) gb[i] += n.f0 * g[i];
      return;
    }
    case Op::Scale: {
      float* ga = grd_ptr(nodes_[static_cast<size_t>(n.a)]);
      for (size_t i = 0; i < sz; ++i) ga[i] += n.f0 * g[i];
      return;
    }
    case Op::BiasAddRow: {
      float* ga = grd_ptr(nodes_[static_cast<size_t>(n.a)]);
      float* gb = grd_ptr(nodes_[static_cast<size_t>(n.b)]);
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i];
      for (int r = 0; r < n.rows; ++r)
        for (int j = 0; j < n.cols; ++j) gb[j] += g[static_cast<size_t>(r) * n.cols + j];
      return;
    }
    case Op::AddGatherRows: {
      float* ga = grd_ptr(nodes_[static_cast<size_t>(n.a)]);
      for (size_t i = 0; i < sz; ++i) ga[i] += g[i];
      return;
    }
    case Op::LayerNorm: {
      Node& nx = nodes_[static_cast<size_t>(n.a)];
      Node& ng = nodes_[static_cast<size_t>(n.b)];
      Node& nbt = nodes_[static_cast<size_t>(n.c)];
      const float* px = val_ptr(nx);
      const float* pg = val_ptr(ng);
      float* gx = grd_ptr(nx);
      float* gg = grd_ptr(ng);
      float* gb = grd_ptr(nbt);
      const int c = n.cols;
      for (int r = 0; r < n.rows; ++r) {
        const float* xr = px + static_cast<size_t>(r) * c;
        const float* gr = g + static_cast<size_t>(r) * c;
        float* gxr = gx + static_cast<size_t>(r) * c;
        float mu = 0;
        for (int j = 0; j < c; ++j) mu += xr[j];
        mu /= static_cast<float>(c);
        float var = 0;
        for (int j = 0; j < c; ++j) var += (xr[j] - mu) * (xr[j] - mu);
        var /= static_cast<float>(c);
        const float inv = 1.0f / std::sqrt(var + n.f0);
        float m1 = 0, m2 = 0;
        for (int j = 0; j < c; ++j) {
          const float xh = (xr[j] - mu) * inv;
          const float h = gr[j] * pg[j];
          m1 += h;
          m2 += h * xh;
          gg[j] += gr[j] * xh;
          gb[j] += gr[j];
        }
        m1 /= static_cast<float>(c);
        m2 /= static_cast<float>(c);
        for (int j = 0; j < c; ++j) {
          const float xh = (xr[j] - mu) * inv;
          gxr[j] += inv * (gr[j] * pg[j] - m1 - xh * m2);
        }
      }
      return;
    }
    case Op::Gelu: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      const float* px = val_ptr(na);
      float* ga = grd_ptr(na);
      for (size_t i = 0; i < sz; ++i) {
        const float x = px[i];
        const float u = kGeluC * (x + kGeluK * x * x * x);
        const float th = fast_tanh(u);
        const float du = kGeluC * (1.0f + 3.0f * kGeluK * x * x);
        ga[i] += g[i] * (0.5f * (1.0f + th) + 0.5f * x * (1.0f - th * th) * du);
      }
      return;
    }
    case Op::Relu: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      const float* px = val_ptr(na);
      float* ga = grd_ptr(na);
      for (size_t i = 0; i < sz; ++i)
        if (px[i] > 0) ga[i] += g[i];
      return;
    }
    case Op::SoftmaxRows: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      const float* py = val_ptr(n);
      float* ga = grd_ptr(na);
      const int c = n.cols;
      for (int r = 0; r < n.rows; ++r) {
        const float* yr = py + static_cast<size_t>(r) * c;
        const float* gr = g + static_cast<size_t>(r) * c;
        float* gar = ga + static_cast<size_t>(r) * c;
        float dot = 0;
        for (int j = 0; j < c; ++j) dot += gr[j] * yr[j];
        for (int j = 0; j < c; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
      return;
    }
    case Op::SliceCols: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      float* ga = grd_ptr(na);
      for (int r = 0; r < n.rows; ++r) {
        const float* gr = g + static_cast<size_t>(r) * n.cols;
        float* gar = ga + static_cast<size_t>(r) * na.cols + n.i0;
        for (int j = 0; j < n.cols; ++j) gar[j] += gr[j];
      }
      return;
    }
    case Op::SliceRows: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      float* ga = grd_ptr(na) + static_cast<size_t>(n.i0) * n.cols;
      const size_t cnt = static_cast<size_t>(n.rows) * n.cols;
      for (size_t i = 0; i < cnt; ++i) ga[i] += g[i];
      return;
    }
    case Op::ConcatCols: {
      const auto& ids = aux_[static_cast<size_t>(n.aux)];
      int c0 = 0;
      for (int pid : ids) {
        Node& np = nodes_[static_cast<size_t>(pid)];
        float* gp = grd_ptr(np);
        for (int r = 0; r < n.rows; ++r) {
          const float* gr = g + static_cast<size_t>(r) * n.cols + c0;
          float* gpr = gp + static_cast<size_t>(r) * np.cols;
          for (int j = 0; j < np.cols; ++j) gpr[j] += gr[j];
        }
        c0 += np.cols;
      }
      return;
    }
    case Op::MeanRows: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      float* ga = grd_ptr(na);
      const float inv = 1.0f / static_cast<float>(na.rows);
      for (int r = 0; r < na.rows; ++r)
        for (int j = 0; j < n.cols; ++j)
          ga[static_cast<size_t>(r) * n.cols + j] += g[j] * inv;
      return;
    }
    case Op::StopGrad:
      return;
    case Op::Assemble: {
      Node& nl = nodes_[static_cast<size_t>(n.a)];
      Node& nm = nodes_[static_cast<size_t>(n.b)];
      const auto& visible = aux_[static_cast<size_t>(n.aux)];
      float* gl = grd_ptr(nl);
      float* gm = grd_ptr(nm);
      const int dd = n.cols;
      size_t vi = 0;
      for (int p = 0; p < n.i0; ++p) {
        const float* gr = g + static_cast<size_t>(p) * dd;
        if (vi < visible.size() && visible[vi] == p) {
          float* glr = gl + vi * dd;
          for (int j = 0; j < dd; ++j) glr[j] += gr[j];
          ++vi;
        } else {
          for (int j = 0; j < dd; ++j) gm[j] += gr[j];
        }
      }
      if (n.c >= 0) {
        Node& ni = nodes_[static_cast<size_t>(n.c)];
        float* gi = grd_ptr(ni);
        const float* gr = g + static_cast<size_t>(n.i0) * dd;
        for (int j = 0; j < dd; ++j) gi[j] += gr[j];
      }
      return;
    }
    case Op::MaskedPatchMse: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      const auto& patches = aux_[static_cast<size_t>(n.aux)];
      const float* pp = val_ptr(na);
      float* ga = grd_ptr(na);
      const float gl = g[0];
      const float scale_f =
          gl / (static_cast<float>(patches.size()) * static_cast<float>(na.cols));
      for (int p : patches) {
        const float* pr = pp + static_cast<size_t>(p) * na.cols;
        const float* gr = n.tgt + static_cast<size_t>(p) * na.cols;
        float* gar = ga + static_cast<size_t>(p) * na.cols;
        if (n.i0) {
          for (int j = 0; j < na.cols; ++j) {
            const float d = pr[j] - gr[j];
            gar[j] += scale_f * (d > 0 ? 1.0f : (d < 0 ? -1.0f : 0.0f));
          }
        } else {
          for (int j = 0; j < na.cols; ++j) gar[j] += scale_f * 2.0f * (pr[j] - gr[j]);
        }
      }
      return;
    }
    case Op::Mse: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      const float* pa = val_ptr(na);
      float* ga = grd_ptr(na);
      const size_t asz = static_cast<size_t>(na.rows) * na.cols;
      const float scale_f = g[0] * 2.0f / static_cast<float>(asz);
      for (size_t i = 0; i < asz; ++i) ga[i] += scale_f * (pa[i] - n.tgt[i]);
      return;
    }
    case Op::Conv2d: {
      Node& nx = nodes_[static_cast<size_t>(n.a)];
      Node& nw = nodes_[static_cast<size_t>(n.b)];
      Node& nb = nodes_[static_cast<size_t>(n.c)];
      const int in_c = n.i0, h = n.i1, wdt = n.i2, k = n.i3, stride = n.i4, pad = n.i5;
      const int out_c = n.rows;
      const int ho = (h + 2 * pad - k) / stride + 1;
      const int wo = (wdt + 2 * pad - k) / stride + 1;
      const float* px = val_ptr(nx);
      const float* pw = val_ptr(nw);
      float* gx = grd_ptr(nx);
      float* gw = grd_ptr(nw);
      float* gb = grd_ptr(nb);
      for (int co = 0; co < out_c; ++co) {
        const float* gplane = g + static_cast<size_t>(co) * ho * wo;
        float bsum = 0;
        for (int i = 0; i < ho * wo; ++i) bsum += gplane[i];
        gb[co] += bsum;
        for (int ci = 0; ci < in_c; ++ci) {
          const float* xplane = px + static_cast<size_t>(ci) * h * wdt;
          float* gxplane = gx + static_cast<size_t>(ci) * h * wdt;
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const size_t widx =
                  (static_cast<size_t>(co) * in_c + ci) * k * k + ky * k + kx;
              const float wv = pw[widx];
              float wacc = 0;
              const int lo = std::max(0, (pad - kx + stride - 1) / stride);
              const int hi = std::min(wo, (wdt - 1 - kx + pad) / stride + 1);
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride + ky - pad;
                if (iy < 0 || iy >= h) continue;
                const float* xrow = xplane + static_cast<size_t>(iy) * wdt;
                float* gxrow = gxplane + static_cast<size_t>(iy) * wdt;
                const float* grow = gplane + static_cast<size_t>(oy) * wo;
                for (int ox = lo; ox < hi; ++ox) {
                  const int ix = ox * stride + kx - pad;
                  wacc += grow[ox] * xrow[ix];
                  gxrow[ix] += grow[ox] * wv;
                }
              }
              gw[widx] += wacc;
            }
          }
        }
      }
      return;
    }
    case Op::GroupNorm: {
      Node& nx = nodes_[static_cast<size_t>(n.a)];
      Node& ng = nodes_[static_cast<size_t>(n.b)];
      Node& nbt = nodes_[static_cast<size_t>(n.c)];
      const float* px = val_ptr(nx);
      const float* pg = val_ptr(ng);
      float* gx = grd_ptr(nx);
      float* gg = grd_ptr(ng);
      float* gb = grd_ptr(nbt);
      const int groups = n.i0;
      const int cs = n.rows / groups;
      const size_t hw = static_cast<size_t>(n.cols);
      for (int grp = 0; grp < groups; ++grp) {
        const float* xg = px + static_cast<size_t>(grp) * cs * hw;
        double mu = 0;
        for (size_t i = 0; i < cs * hw; ++i) mu += xg[i];
        mu /= static_cast<double>(cs * hw);
        double var = 0;
        for (size_t i = 0; i < cs * hw; ++i) {
          const double d = xg[i] - mu;
          var += d * d;
        }
        var /= static_cast<double>(cs * hw);
        const float inv = static_cast<float>(1.0 / std::sqrt(var + n.f0));
        const float muf = static_cast<float>(mu);
        double m1 = 0, m2 = 0;
        for (int c = 0; c < cs; ++c) {
          const int ch = grp * cs + c;
          const float* xr = px + static_cast<size_t>(ch) * hw;
          const float* gr = g + static_cast<size_t>(ch) * hw;
          float dg = 0, db = 0;
          for (size_t i = 0; i < hw; ++i) {
            const float xh = (xr[i] - muf) * inv;
            const float hh = gr[i] * pg[ch];
            m1 += hh;
            m2 += static_cast<double>(hh) * xh;
            dg += gr[i] * xh;
            db += gr[i];
          }
          gg[ch] += dg;
          gb[ch] += db;
        }
        const float m1f = static_cast<float>(m1 / static_cast<double>(cs * hw));
        const float m2f = static_cast<float>(m2 / static_cast<double>(cs * hw));
        for (int c = 0; c < cs; ++c) {
          const int ch = grp * cs + c;
          const float* xr = px + static_cast<size_t>(ch) * hw;
          const float* gr = g + static_cast<size_t>(ch) * hw;
          float* gxr = gx + static_cast<size_t>(ch) * hw;
          for (size_t i = 0; i < hw; ++i) {
            const float xh = (xr[i] - muf) * inv;
            gxr[i] += inv * (gr[i] * pg[ch] - m1f - xh * m2f);
          }
        }
      }
      return;
    }
    case Op::GlobalAvgPool: {
      Node& na = nodes_[static_cast<size_t>(n.a)];
      float* ga = grd_ptr(na);
      const float inv = 1.0f / static_cast<float>(na.cols);
      for (int c = 0; c < na.rows; ++c) {
        const float gv = g[c] * inv;
        float* gar = ga + static_cast<size_t>(c) * na.cols;
        for (int i = 0; i < na.cols; ++i) gar[i] += gv;
      }
      return;
    }
  }
}

}  // namespace emib::nn
