#pragma once

// Synthetic environments used by unit and acceptance tests.

#include <algorithm>

#include "rlcore/env.hpp"
#include "rlcore/rng.hpp"

namespace test_envs {

// Constant observation, constant reward 1, never terminates; every episode
// ends in a timeout after max_len steps. The fixed point of the bootstrapped
// value recursion is r/(1-gamma).
class ConstRewardEnv : public rlcore::VecEnv {
 public:
  ConstRewardEnv(int num_envs, int64_t max_len, bool preage = true) : preage_(preage) {
    spec_.num_envs = num_envs;
    spec_.action_dim = 1;
    spec_.action_lo = {-1.0f};
    spec_.action_hi = {1.0f};
    spec_.max_episode_length = max_len;
    spec_.schema = {{"policy", 1}, {"critic", 1}};
    elapsed_.assign(num_envs, 0);
  }

  rlcore::ObservationSet reset_all(uint64_t seed) override {
    for (int b = 0; b < spec_.num_envs; ++b) {
      elapsed_[b] = 0;
      if (preage_) {
        rlcore::RngStream rng(seed, rlcore::StreamTag::kEnvPreage, {static_cast<uint64_t>(b)});
        elapsed_[b] =
            static_cast<int64_t>(rng.uniform() * static_cast<double>(spec_.max_episode_length));
      }
    }
    return make_obs();
  }

  rlcore::StepResult step(const rlcore::Tensor& actions) override {
    (void)actions;
    const int B = spec_.num_envs;
    rlcore::StepResult r;
    r.reward = rlcore::Tensor::full({B}, 1.0f);
    r.terminated.assign(B, 0);
    r.timeout.assign(B, 0);
    int finished = 0;
    for (int b = 0; b < B; ++b) {
      elapsed_[b] += 1;
      if (elapsed_[b] >= spec_.max_episode_length) {
        r.timeout[b] = 1;
        r.finished.push_back(b);
        elapsed_[b] = 0;
        ++finished;
      }
    }
    r.obs = make_obs();
    r.terminal_obs.groups.emplace("policy", rlcore::Tensor::full({finished, 1}, 1.0f));
    r.terminal_obs.groups.emplace("critic", rlcore::Tensor::full({finished, 1}, 1.0f));
    return r;
  }

 private:
  rlcore::ObservationSet make_obs() const {
    rlcore::ObservationSet obs;
    obs.groups.emplace("policy", rlcore::Tensor::full({spec_.num_envs, 1}, 1.0f));
    obs.groups.emplace("critic", rlcore::Tensor::full({spec_.num_envs, 1}, 1.0f));
    return obs;
  }

  bool preage_;
  std::vector<int64_t> elapsed_;
};

// Counts the observation value up by a fixed increment each step and
// terminates (not times out) every `period` steps. Used to pin down the
// bookkeeping around task terminations.
class PeriodicTerminationEnv : public rlcore::VecEnv {
 public:
  PeriodicTerminationEnv(int num_envs, int64_t period, float reward = 0.5f)
      : period_(period), reward_(reward) {
    spec_.num_envs = num_envs;
    spec_.action_dim = 1;
    spec_.action_lo = {-1.0f};
    spec_.action_hi = {1.0f};
    spec_.max_episode_length = 1000000;
    spec_.schema = {{"policy", 1}, {"critic", 1}};
    elapsed_.assign(num_envs, 0);
  }

  rlcore::ObservationSet reset_all(uint64_t) override {
    std::fill(elapsed_.begin(), elapsed_.end(), 0);
    return make_obs();
  }

  rlcore::StepResult step(const rlcore::Tensor&) override {
    const int B = spec_.num_envs;
    rlcore::StepResult r;
    r.reward = rlcore::Tensor::full({B}, reward_);
    r.terminated.assign(B, 0);
    r.timeout.assign(B, 0);
    std::vector<float> term_rows;
    for (int b = 0; b < B; ++b) {
      elapsed_[b] += 1;
      if (elapsed_[b] >= period_) {
        r.terminated[b] = 1;
        r.finished.push_back(b);
        term_rows.push_back(static_cast<float>(elapsed_[b]));
        elapsed_[b] = 0;
      }
    }
    const int fin = static_cast<int>(r.finished.size());
    r.obs = make_obs();
    r.terminal_obs.groups.emplace("policy",
                                  rlcore::Tensor::from({fin, 1}, std::vector<float>(term_rows)));
    r.terminal_obs.groups.emplace("critic",
                                  rlcore::Tensor::from({fin, 1}, std::move(term_rows)));
    return r;
  }

 private:
  rlcore::ObservationSet make_obs() const {
    std::vector<float> data(spec_.num_envs);
    for (int b = 0; b < spec_.num_envs; ++b) data[b] = static_cast<float>(elapsed_[b]);
    rlcore::ObservationSet obs;
    obs.groups.emplace("policy", rlcore::Tensor::from({spec_.num_envs, 1},
                                                      std::vector<float>(data)));
    obs.groups.emplace("critic", rlcore::Tensor::from({spec_.num_envs, 1}, std::move(data)));
    return obs;
  }

  int64_t period_;
  float reward_;
  std::vector<int64_t> elapsed_;
};

}  // namespace test_envs
