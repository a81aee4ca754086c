#include "emib/nn/params.hpp"

#include <cmath>

namespace emib::nn {

const char* param_group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::Decoder: return "decoder";
    case ParamGroup::Bottleneck: return "bottleneck";
    case ParamGroup::PixelHead: return "pixel_head";
    case ParamGroup::Student: return "student";
  }
  return "?";
}

int ParamStore::find(const std::string& name) const {
  for (int i = 0; i < count(); ++i)
    if (infos_[static_cast<size_t>(i)].name == name) return i;
  return -1;
}

void AdamW::step(ParamStore& store, std::span<const float> grads, float lr) {
  if (grads.size() != store.total_size())
    throw ConfigError("adamw: gradient buffer size mismatch");
  ++t_;
  const float b1 = cfg_.beta1, b2 = cfg_.beta2;
  const float bias1 = 1.0f - std::pow(b1, static_cast<float>(t_));
  const float bias2 = 1.0f - std::pow(b2, static_cast<float>(t_));
  for (int id = 0; id < store.count(); ++id) {
    const ParamInfo& info = store.info(id);
    auto p = store.values(id);
    const float* g = grads.data() + info.offset;
    float* m = m_.data() + info.offset;
    float* v = v_.data() + info.offset;
    const float wd = info.decay ? cfg_.weight_decay : 0.0f;
    for (size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0f - b1) * g[i];
      v[i] = b2 * v[i] + (1.0f - b2) * g[i] * g[i];
      const float mhat = m[i] / bias1;
      const float vhat = v[i] / bias2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * p[i]);
    }
  }
}

void AdamW::restore(std::span<const float> m, std::span<const float> v, int64_t t) {
  if (m.size() != m_.size() || v.size() != v_.size())
    throw ConfigError("adamw: restored state size mismatch");
  std::copy(m.begin(), m.end(), m_.begin());
  std::copy(v.begin(), v.end(), v_.begin());
  t_ = t;
}

float lr_schedule(int step, int total, float base, float warmup_frac, bool cosine) {
  const int warmup = std::max(1, static_cast<int>(warmup_frac * total));
  if (step < warmup) return base * static_cast<float>(step + 1) / warmup;
  if (!cosine) return base;
  const double t = static_cast<double>(step - warmup) / std::max(1, total - warmup);
  return static_cast<float>(base * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t)));
}

}  // namespace emib::nn
