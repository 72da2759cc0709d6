#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "rlcore/networks.hpp"
#include "rlcore/obs.hpp"
#include "rlcore/ppo.hpp"

namespace rlcore {

// Signed permutation: out[i] = sign[i] * in[source[i]]. Must be an involution.
struct SignedPermutation {
  std::vector<int> source;
  std::vector<float> sign;

  size_t size() const { return source.size(); }
  void validate(const std::string& what) const;
  void apply(std::span<const float> in, std::span<float> out) const;
};

// Mirror maps for every observation group plus the action space.
struct SymmetrySpec {
  std::map<std::string, SignedPermutation> obs_maps;
  SignedPermutation action_map;
  bool use_augmentation = true;
  bool use_loss = true;
  float weight = 0.5f;  // w_sym

  void validate() const;
};

// Applies the group maps; batch order is preserved.
ObservationSet mirror_obs(const SymmetrySpec& spec, const ObservationSet& obs);

// Appends mirrored copies of every sample: obs' = S(obs), a' = S_a(a),
// advantages/returns/values copied, and the old log-prob of each mirrored
// sample recomputed as log pi_old(a'|obs') under the snapshot policy.
void augment_batch(FlatBatch& batch, const SymmetrySpec& spec,
                   const GaussianActorCritic& policy_snapshot);

// L_sym = mean over the batch of ||mu(S(s)) - S_a(mu(s))||^2 (mean only;
// sigma is state-independent and shared across mirrored pairs).
Tensor symmetry_loss(const GaussianActorCritic& policy, const ObservationSet& obs,
                     const SymmetrySpec& spec);

// PPO hook wiring augmentation and the weighted symmetry loss into updates.
class SymmetryHooks : public UpdateHooks {
 public:
  explicit SymmetryHooks(const SymmetrySpec& spec) : spec_(&spec) {}
  void augment(FlatBatch& batch, const GaussianActorCritic& policy) override;
  Tensor extra_loss(const GaussianActorCritic& policy, const ObservationSet& mb_obs,
                    PpoStats& stats) override;

 private:
  const SymmetrySpec* spec_;
};

// Welford running mean/variance accumulator (per dimension).
struct RunningMoments {
  int64_t count = 0;
  std::vector<double> mean;
  std::vector<double> m2;

  explicit RunningMoments(int64_t dims = 1) : mean(dims, 0.0), m2(dims, 0.0) {}
  double variance(int64_t d = 0) const {
    return count > 1 ? m2[d] / static_cast<double>(count - 1) : 0.0;
  }
  double stddev(int64_t d = 0) const { return std::sqrt(variance(d)); }
};

// Merges a batch of rows ([N, dims] flattened) into the accumulator; empty
// batches are a no-op.
void running_update(RunningMoments& moments, std::span<const float> batch, int64_t dims);

struct RndConfig {
  std::string group = "rnd";
  int embed_dim = 32;
  std::vector<int> hidden_sizes = {64, 64};
  float reward_scale = 1.0f;  // eta
  float predictor_lr = 1e-3f;
  bool normalize_reward = true;
  bool normalize_obs = true;

  void validate() const;
};

// Curiosity module: holds the frozen target / trainable predictor pair plus
// the running normalizers for the observation subset and the intrinsic
// reward. Sees only the configured observation group.
class RndModule {
 public:
  RndModule(ParamStore& store, const ObsSchema& schema, const RndConfig& cfg, uint64_t seed);

  // Per-sample intrinsic rewards for a [N, d] slice of the configured group.
  // Updates no state; call observe()/update_reward_moments() around it.
  std::vector<float> intrinsic_reward(const Tensor& group_obs) const;

  // Folds a batch of observations into the obs normalizer.
  void observe(const Tensor& group_obs);
  void update_reward_moments(std::span<const float> raw_errors);

  // One predictor regression step on the (normalized) batch; returns the loss.
  // Zero-row batches are a no-op reported as loss 0.
  float update_predictor(const Tensor& group_obs, ParamStore& store, Adam& opt,
                         GradientReducer* reducer = nullptr);

  // Raw per-sample squared embedding errors (before eta and normalization).
  std::vector<float> raw_errors(const Tensor& group_obs) const;

  const RndConfig& config() const { return cfg_; }
  const RndPair& pair() const { return pair_; }
  const RunningMoments& obs_moments() const { return obs_moments_; }
  const RunningMoments& reward_moments() const { return reward_moments_; }

 private:
  Tensor normalized(const Tensor& group_obs) const;

  RndConfig cfg_;
  RndPair pair_;
  RunningMoments obs_moments_;
  RunningMoments reward_moments_{1};
};

}  // namespace rlcore
