#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>

namespace rlcore {

// splitmix64 finalizer; the workhorse behind all randomness in the library.
inline uint64_t mix64(uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t a, uint64_t b) { return mix64(mix64(a) ^ b); }

// Stream tags keep independent consumers (env resets, action noise, weight
// init, shuffling, ...) from colliding on the same underlying sequence.
enum class StreamTag : uint64_t {
  kEnvReset = 0x01,
  kEnvDynamics = 0x02,
  kEnvPreage = 0x03,
  kParamInit = 0x10,
  kActionNoise = 0x20,
  kShuffle = 0x30,
  kDistillMix = 0x40,
  kEval = 0x50,
  kTest = 0xF0,
};

// Counter-based random stream. The key is derived from a seed plus an
// arbitrary list of ids (stream tag, env index, episode number, ...), so any
// worker can reproduce any other worker's draws given the same ids. Draws are
// generated in double precision for portability of the float32 cast.
class RngStream {
 public:
  RngStream(uint64_t seed, std::initializer_list<uint64_t> ids) : key_(mix64(seed)) {
    for (uint64_t id : ids) key_ = mix64(key_, id);
  }
  RngStream(uint64_t seed, StreamTag tag, std::initializer_list<uint64_t> ids)
      : RngStream(seed, {static_cast<uint64_t>(tag)}) {
    for (uint64_t id : ids) key_ = mix64(key_, id);
  }

  uint64_t next_u64() { return mix64(key_, ++counter_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller (one value per pair of uniforms).
  double normal() {
    double u1 = uniform();
    double u2 = uniform();
    if (u1 <= 0.0) u1 = 0x1.0p-53;
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }

  // Uniform integer in [0, n).
  uint64_t below(uint64_t n) { return next_u64() % n; }

 private:
  uint64_t key_;
  uint64_t counter_ = 0;
};

}  // namespace rlcore
