#pragma once

#include <cmath>
#include <cstdint>

namespace emib {

// Counter-based generator (splitmix-style output function over a keyed
// counter). Every consumer derives its own stream from (seed, tags...), so
// draws are independent of thread scheduling and the full generator state is
// two integers — which is what makes bitwise checkpoint resume trivial.
class Rng {
 public:
  Rng() = default;
  explicit Rng(uint64_t seed) : key_(mix(seed ^ 0x9e3779b97f4a7c15ull)) {}

  /// Derive an independent stream. Same (seed, tags) -> same stream, always.
  Rng stream(uint64_t a, uint64_t b = 0, uint64_t c = 0) const {
    Rng r;
    r.key_ = mix(key_ ^ mix(a ^ mix(b ^ mix(c + 0x165667b19e3779f9ull))));
    return r;
  }

  uint64_t next_u64() { return mix(key_ + 0x9e3779b97f4a7c15ull * ++ctr_); }

  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Uniform in [lo, hi).
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  /// Uniform integer in [0, n). n must be > 0.
  uint64_t uniform_int(uint64_t n) {
    // 128-bit multiply avoids modulo bias for any practical n.
    return static_cast<uint64_t>(
        (static_cast<unsigned __int128>(next_u64()) * n) >> 64);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Standard normal via Box-Muller (the second value is discarded so the
  /// stream position does not depend on call history).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 < 1e-300) u1 = 1e-300;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
  }

  /// Normal(0, std) truncated to +-2 std by rejection.
  double trunc_normal(double std_dev) {
    for (;;) {
      const double x = normal();
      if (x >= -2.0 && x <= 2.0) return x * std_dev;
    }
  }

  uint64_t key() const { return key_; }
  uint64_t counter() const { return ctr_; }
  void set_state(uint64_t key, uint64_t ctr) { key_ = key; ctr_ = ctr; }

 private:
  static uint64_t mix(uint64_t x) {
    x ^= x >> 30;
    x *= 0xbf58476d1ce4e5b9ull;
    x ^= x >> 27;
    x *= 0x94d049bb133111ebull;
    x ^= x >> 31;
    return x;
  }

  uint64_t key_ = 0;
  uint64_t ctr_ = 0;
};

// Stream tags, so call sites never collide by accident.
namespace rng_stream {
constexpr uint64_t kInit = 1;        // parameter initialization
constexpr uint64_t kBatch = 2;       // batch index sampling
constexpr uint64_t kReconMask = 3;   // reconstruction-branch masks
constexpr uint64_t kInjMask = 4;     // injection-branch masks
constexpr uint64_t kNegSample = 5;   // contrastive negative patch sets
constexpr uint64_t kLabels = 6;      // synthetic label sampling
constexpr uint64_t kStyle = 7;       // per-subject style
constexpr uint64_t kFewShot = 8;     // few-shot calibration draws
constexpr uint64_t kShuffle = 9;     // dataset iteration order
constexpr uint64_t kLighting = 10;   // per-sample illumination nuisance
}  // namespace rng_stream

}  // namespace emib
