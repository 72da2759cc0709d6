#pragma once

// Brute-force per-episode advantage computation, independent of the
// vectorized recursion in the library:
//   A_t = sum_l (gamma*lam)^l * delta_{t+l} * prod_{j<l} (1 - done_{t+j})
// evaluated by direct summation in double precision.

#include <vector>

#include "rlcore/ppo.hpp"
#include "rlcore/rng.hpp"

namespace gae_oracle {

inline std::vector<std::vector<double>> brute_force(const rlcore::RolloutBuffer& buf,
                                                    double gamma, double lam) {
  std::vector<std::vector<double>> adv(buf.T, std::vector<double>(buf.B, 0.0));
  for (int b = 0; b < buf.B; ++b) {
    for (int t = 0; t < buf.T; ++t) {
      double acc = 0.0;
      double weight = 1.0;
      for (int l = 0; t + l < buf.T; ++l) {
        const int k = t + l;
        const bool done = buf.terminated[k][b] || buf.timeout[k][b];
        const double v_next = k + 1 < buf.T ? buf.values[k + 1][b] : buf.bootstrap_value[b];
        const double delta =
            buf.rewards[k][b] + gamma * v_next * (done ? 0.0 : 1.0) - buf.values[k][b];
        acc += weight * delta;
        if (done) break;
        weight *= gamma * lam;
      }
      adv[t][b] = acc;
    }
  }
  return adv;
}

// Random small buffer with arbitrary done patterns, for oracle equivalence.
inline rlcore::RolloutBuffer random_buffer(uint64_t seed) {
  rlcore::RngStream rng(seed, rlcore::StreamTag::kTest, {77});
  rlcore::RolloutBuffer buf;
  buf.T = 1 + static_cast<int>(rng.below(8));
  buf.B = 1 + static_cast<int>(rng.below(4));
  buf.A = 1;
  for (int t = 0; t < buf.T; ++t) {
    buf.rewards.emplace_back();
    buf.values.emplace_back();
    buf.log_probs.emplace_back();
    buf.terminated.emplace_back();
    buf.timeout.emplace_back();
    buf.reset_mask.emplace_back(buf.B, 0.0f);
    for (int b = 0; b < buf.B; ++b) {
      buf.rewards[t].push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
      buf.values[t].push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
      buf.log_probs[t].push_back(0.0f);
      const int done_kind = static_cast<int>(rng.below(5));  // 0: term, 1: timeout, else none
      buf.terminated[t].push_back(done_kind == 0 ? 1 : 0);
      buf.timeout[t].push_back(done_kind == 1 ? 1 : 0);
    }
  }
  for (int b = 0; b < buf.B; ++b) {
    buf.bootstrap_value.push_back(static_cast<float>(rng.uniform(-1.0, 1.0)));
  }
  return buf;
}

}  // namespace gae_oracle
