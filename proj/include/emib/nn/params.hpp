#pragma once

#include <span>
#include <string>
#include <vector>

#include "emib/common.hpp"
#include "emib/rng.hpp"

namespace emib::nn {

// Parameter groups matter in two places: the gradient-sharing audit (the
// branch-sum identity holds for the shared encoder trunk only) and the
// per-group report breakdown.
enum class ParamGroup { Encoder, Decoder, Bottleneck, PixelHead, Student };

const char* param_group_name(ParamGroup g);

struct ParamInfo {
  std::string name;
  int rows = 0;
  int cols = 0;
  size_t offset = 0;
  ParamGroup group = ParamGroup::Encoder;
  bool decay = false;
};

/// All trainable tensors of one model, stored in a single flat float32 buffer.
/// Gradient buffers, optimizer state and checkpoints share this layout.
class ParamStore {
 public:
  int add(const std::string& name, int rows, int cols, ParamGroup group) {
    ParamInfo info;
    info.name = name;
    info.rows = rows;
    info.cols = cols;
    info.offset = data_.size();
    info.group = group;
    info.decay = rows > 1 && cols > 1;  // matrices decay, biases/norms/tokens do not
    infos_.push_back(info);
    data_.resize(data_.size() + static_cast<size_t>(rows) * cols, 0.0f);
    return static_cast<int>(infos_.size()) - 1;
  }

  int count() const { return static_cast<int>(infos_.size()); }
  size_t total_size() const { return data_.size(); }
  const ParamInfo& info(int id) const { return infos_[static_cast<size_t>(id)]; }
  int find(const std::string& name) const;

  std::span<float> values(int id) {
    const auto& i = infos_[static_cast<size_t>(id)];
    return {data_.data() + i.offset, static_cast<size_t>(i.rows) * i.cols};
  }
  std::span<const float> values(int id) const {
    const auto& i = infos_[static_cast<size_t>(id)];
    return {data_.data() + i.offset, static_cast<size_t>(i.rows) * i.cols};
  }
  std::span<float> flat() { return {data_.data(), data_.size()}; }
  std::span<const float> flat() const { return {data_.data(), data_.size()}; }

  void fill(int id, float v) {
    for (float& x : values(id)) x = v;
  }

  /// Deterministic init: each tensor draws from its own stream keyed by its
  /// registration index, so adding unrelated tensors later does not reshuffle
  /// earlier draws.
  void init_trunc_normal(int id, const Rng& base, double std_dev) {
    Rng r = base.stream(rng_stream::kInit, static_cast<uint64_t>(id));
    for (float& x : values(id)) x = static_cast<float>(r.trunc_normal(std_dev));
  }

 private:
  std::vector<ParamInfo> infos_;
  std::vector<float> data_;
};

struct AdamWConfig {
  float beta1 = 0.9f;
  float beta2 = 0.999f;
  float eps = 1e-8f;
  float weight_decay = 0.05f;
};

/// Decoupled weight decay Adam over a ParamStore.
class AdamW {
 public:
  AdamW(const ParamStore& store, AdamWConfig cfg)
      : cfg_(cfg), m_(store.total_size(), 0.0f), v_(store.total_size(), 0.0f) {}

  void step(ParamStore& store, std::span<const float> grads, float lr);

  int64_t steps_taken() const { return t_; }
  std::span<float> moment1() { return m_; }
  std::span<float> moment2() { return v_; }
  void restore(std::span<const float> m, std::span<const float> v, int64_t t);

 private:
  AdamWConfig cfg_;
  std::vector<float> m_, v_;
  int64_t t_ = 0;
};

/// Linear warmup to `base`, then cosine decay to zero at `total` (or constant
/// after warmup when `cosine` is false).
float lr_schedule(int step, int total, float base, float warmup_frac,
                  bool cosine = true);

}  // namespace emib::nn
