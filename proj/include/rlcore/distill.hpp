#pragma once

#include <array>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "rlcore/networks.hpp"
#include "rlcore/ppo.hpp"

namespace rlcore {

// Deterministic action oracle: same observation, same action. May read the
// privileged "expert" group. Recurrent experts keep internal state and are
// told about episode boundaries via the reset mask.
class Expert {
 public:
  virtual ~Expert() = default;
  virtual Tensor act(const ObservationSet& obs, std::span<const float> reset_mask) = 0;
};

// Analytic linear-gain controller, u = clip(-K x). Reads the "expert" group
// when present, otherwise the policy group.
class LqrExpert : public Expert {
 public:
  LqrExpert(std::array<double, 2> gain, float action_lo, float action_hi,
            std::string group = "expert");
  Tensor act(const ObservationSet& obs, std::span<const float> reset_mask) override;

 private:
  std::array<double, 2> gain_;
  float lo_, hi_;
  std::string group_;
};

// Frozen policy queried in mean mode; owns its parameters.
class PolicyExpert : public Expert {
 public:
  PolicyExpert(std::unique_ptr<ParamStore> store, GaussianActorCritic net);
  Tensor act(const ObservationSet& obs, std::span<const float> reset_mask) override;

 private:
  std::unique_ptr<ParamStore> store_;
  GaussianActorCritic net_;
  Tensor hidden_;
};

enum class DistillLoss { kMseOnMean, kNll };

struct DistillConfig {
  int iterations = 50;
  int rollout_horizon = 24;
  float learning_rate = 1e-3f;
  int epochs_per_iteration = 4;
  int minibatches = 4;
  float max_grad_norm = 1.0f;
  DistillLoss loss_kind = DistillLoss::kMseOnMean;
  // Probability that the executed action is the expert's; linear schedule
  // over iterations (constant 0 by default: pure student rollouts).
  float beta_start = 0.0f;
  float beta_end = 0.0f;

  void validate() const;
  float beta_at(int iteration) const;
};

// Visited states labeled with expert actions (the executed action is not
// stored; relabeling never depends on it).
struct DistillDataset {
  int T = 0;
  int B = 0;
  int A = 0;
  std::vector<ObservationSet> obs;         // T entries
  std::vector<Tensor> expert_actions;      // T x [B, A]
  std::vector<std::vector<float>> reset_mask;
  Tensor h_start;  // recurrent students
};

// Rolls the student out for one horizon. Each executed action is the expert's
// with probability beta, else the student's sample; the stored target is
// always the expert action at the visited observation.
DistillDataset collect_and_relabel(RolloutCollector& collector,
                                   const GaussianActorCritic& student, Expert& expert,
                                   int horizon, float beta);

struct DistillStats {
  double loss = 0.0;
};

// Supervised minibatch regression of the student onto the expert targets,
// with the same optimizer contract as the PPO update (shuffled minibatches,
// Adam, gradient-norm clipping; recurrent path intact over time).
DistillStats distill_update(const DistillDataset& dataset, GaussianActorCritic& student,
                            ParamStore& store, Adam& opt, const DistillConfig& cfg, uint64_t seed,
                            uint64_t update_ordinal, int rank = 0,
                            GradientReducer* reducer = nullptr);

// collect -> relabel -> update for cfg.iterations; invokes the callback after
// every iteration (logging, checkpointing, evaluation).
void run_distillation(RolloutCollector& collector, GaussianActorCritic& student,
                      ParamStore& store, Adam& opt, Expert& expert, const DistillConfig& cfg,
                      uint64_t seed,
                      const std::function<void(int, const DistillStats&)>& on_iteration = {},
                      GradientReducer* reducer = nullptr);

}  // namespace rlcore
