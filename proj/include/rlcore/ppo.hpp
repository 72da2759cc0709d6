#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "rlcore/env.hpp"
#include "rlcore/networks.hpp"
#include "rlcore/obs.hpp"
#include "rlcore/optim.hpp"

namespace rlcore {

struct PpoConfig {
  float gamma = 0.99f;
  float lam = 0.95f;
  float clip_eps = 0.2f;
  int epochs = 5;
  int num_minibatches = 4;
  float learning_rate = 1e-3f;
  float kl_target = 0.01f;
  float value_coef = 1.0f;
  float entropy_coef = 0.01f;
  float max_grad_norm = 1.0f;
  bool normalize_advantages = true;
  bool clip_value_loss = true;
  int rollout_horizon = 24;
  // Fold gamma*V(terminal_obs) into the reward of timed-out steps. Off only
  // for ablation runs.
  bool bootstrap_timeouts = true;

  void validate() const;
};

// Fixed-horizon on-policy storage, T steps by B envs. reset_mask[t][b] marks
// an episode boundary before step t (done flags of step t-1; row 0 carries
// the boundary flags left over from the previous rollout).
struct RolloutBuffer {
  int T = 0;
  int B = 0;
  int A = 0;
  std::vector<ObservationSet> obs;              // T entries, groups [B,d]
  std::vector<Tensor> actions;                  // T x [B,A]
  std::vector<std::vector<float>> rewards;      // post-bootstrap
  std::vector<std::vector<float>> values;
  std::vector<std::vector<float>> log_probs;
  std::vector<std::vector<uint8_t>> terminated;
  std::vector<std::vector<uint8_t>> timeout;
  std::vector<std::vector<float>> reset_mask;
  std::vector<float> bootstrap_value;           // V_T per env
  std::vector<std::vector<float>> advantages;   // filled by compute_gae
  std::vector<std::vector<float>> returns;
  Tensor h_start;                               // [B,H], detached (recurrent only)
  bool gae_done = false;
};

// Episode statistics harvested from finished envs since the last drain.
struct EpisodeStats {
  std::vector<double> returns;
  std::vector<double> lengths;
  std::vector<uint8_t> successes;

  void clear() {
    returns.clear();
    lengths.clear();
    successes.clear();
  }
};

// Steps the environment with the sampled policy and records transitions.
// Action noise is keyed by (seed, global env index, global step), so a worker
// that owns a slice of a larger batch reproduces exactly its slice.
class RolloutCollector {
 public:
  RolloutCollector(VecEnv& env, uint64_t seed, int64_t env_index_offset = 0);

  RolloutBuffer collect(const GaussianActorCritic& policy, int horizon, const PpoConfig& cfg);

  // Deterministic expert/student rollouts reuse the same stepping machinery.
  VecEnv& env() { return *env_; }
  const ObservationSet& current_obs() const { return obs_; }
  EpisodeStats& stats() { return stats_; }
  int64_t total_env_steps() const { return step_counter_ * env_->spec().num_envs; }

  Tensor sample_noise(int64_t step, int dims) const;  // [B, dims]
  uint64_t seed() const { return seed_; }
  int64_t env_offset() const { return offset_; }

  // Exposed for the distillation loop, which shares the stepping state.
  StepResult step_env(const Tensor& actions);
  Tensor& hidden() { return hidden_; }
  std::vector<float>& prev_done() { return prev_done_; }
  int64_t step_counter() const { return step_counter_; }

 private:
  VecEnv* env_;
  uint64_t seed_;
  int64_t offset_;
  ObservationSet obs_;
  Tensor hidden_;
  std::vector<float> prev_done_;
  std::vector<double> ep_return_;
  std::vector<int64_t> ep_length_;
  int64_t step_counter_ = 0;
  EpisodeStats stats_;
};

// delta_t = r_t + gamma*V_{t+1}*(1-done_t) - V_t, A_t = delta_t +
// gamma*lam*(1-done_t)*A_{t+1}, R_t = A_t + V_t. Timed-out steps carry done=1
// and the pre-added bootstrap reward, so no value leaks across resets.
void compute_gae(RolloutBuffer& buffer, float gamma, float lam);

struct PpoStats {
  double surrogate_loss = 0.0;
  double value_loss = 0.0;
  double entropy = 0.0;
  double approx_kl = 0.0;
  double clip_fraction = 0.0;
  double extra_loss = 0.0;  // symmetry term when enabled
};

// One training minibatch, either flattened (feedforward) or a time-intact
// slice of envs (recurrent).
struct Minibatch {
  ObservationSet obs;    // [N, d] per group
  Tensor actions;        // [N, A]
  Tensor old_log_prob;   // [N]
  Tensor old_value;      // [N]
  Tensor advantages;     // [N]
  Tensor returns;        // [N]

  bool recurrent = false;
  std::vector<ObservationSet> obs_seq;  // T x [E, d]
  std::vector<Tensor> action_seq;       // T x [E, A]
  Tensor h0;                            // [E, H]
  std::vector<Tensor> reset_masks;      // T x [E, 1]
};

// Clipped-surrogate PPO loss. Returns the scalar loss (to backprop) plus
// detached statistics.
std::pair<Tensor, PpoStats> ppo_loss(const GaussianActorCritic& policy, const Minibatch& mb,
                                     const PpoConfig& cfg);

// if mean_kl > 2*target: lr/1.5; if mean_kl < target/2: lr*1.5; clamped to
// [1e-5, 1e-2].
float adapt_lr(float mean_kl, float lr, const PpoConfig& cfg);

// Flattened feedforward training arrays (t-major sample order).
struct FlatBatch {
  int64_t N = 0;
  int A = 0;
  std::map<std::string, std::vector<float>> obs;  // group -> N*d
  std::map<std::string, int64_t> widths;
  std::vector<float> actions;
  std::vector<float> old_log_prob;
  std::vector<float> old_value;
  std::vector<float> advantages;
  std::vector<float> returns;
};

FlatBatch flatten_rollout(const RolloutBuffer& buffer);

// Extension points consumed by ppo_update; implemented by the symmetry
// machinery (and by anything else that wants to shape the batch or the loss).
class UpdateHooks {
 public:
  virtual ~UpdateHooks() = default;
  // May grow the batch in place (feedforward path only).
  virtual void augment(FlatBatch& batch, const GaussianActorCritic& policy) { (void)batch, (void)policy; }
  // Additional loss added to every minibatch; return an undefined tensor for
  // "none". stats.extra_loss accumulates the reported value.
  virtual Tensor extra_loss(const GaussianActorCritic& policy, const ObservationSet& mb_obs,
                            PpoStats& stats) {
    (void)policy, (void)mb_obs, (void)stats;
    return Tensor();
  }
};

// Gradient averaging seam for data-parallel training.
class GradientReducer {
 public:
  virtual ~GradientReducer() = default;
  virtual void allreduce_mean(std::vector<float>& grads) = 0;
};

struct UpdateResult {
  PpoStats stats;       // averaged over all minibatches
  float lr = 0.0f;      // learning rate after adaptation
  float max_grad_norm_seen = 0.0f;  // post-clip, max over minibatches
};

// Full PPO update: feedforward nets flatten+shuffle+split; recurrent nets
// minibatch over env indices and replay the GRU over the whole horizon from
// the stored detached h_start (truncated BPTT window = rollout horizon).
UpdateResult ppo_update(const RolloutBuffer& buffer, GaussianActorCritic& policy,
                        ParamStore& store, Adam& opt, const PpoConfig& cfg, uint64_t seed,
                        uint64_t update_ordinal, int rank = 0, UpdateHooks* hooks = nullptr,
                        GradientReducer* reducer = nullptr);

}  // namespace rlcore
