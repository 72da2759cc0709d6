#pragma once

#include <memory>
#include <optional>
#include <string>

#include <json.hpp>

#include "rlcore/distill.hpp"
#include "rlcore/distributed.hpp"
#include "rlcore/env.hpp"
#include "rlcore/extensions.hpp"
#include "rlcore/networks.hpp"
#include "rlcore/ppo.hpp"

namespace rlcore {

enum class AlgoKind { kPpo, kDistill };
enum class ExpertKind { kLqr, kCheckpoint };

// Full run description, parsed from the JSON config file. to_json() emits the
// normalized echo that is embedded into checkpoints.
struct RunConfig {
  std::string env_name = "point_mass";
  int num_envs = 64;
  EnvOverrides overrides;

  AlgoKind algo = AlgoKind::kPpo;
  PpoConfig ppo;
  DistillConfig distill;
  ExpertKind expert_kind = ExpertKind::kLqr;
  std::string teacher_path;

  std::vector<int> hidden_sizes = {64, 64};
  std::string activation = "tanh";
  bool recurrent = false;
  int hidden_dim = 64;

  std::optional<SymmetrySpec> symmetry;
  std::optional<RndConfig> rnd;

  uint64_t seed = 1;
  int64_t max_iterations = 100;
  int64_t log_interval = 1;
  int64_t checkpoint_interval = 50;
  std::string out_dir = "runs/out";

  static RunConfig from_json(const nlohmann::json& j);
  static RunConfig from_file(const std::string& path);
  nlohmann::json to_json() const;
  void validate() const;
};

struct TrainResult {
  std::string checkpoint_path;  // empty on ranks > 0
  std::string metrics_path;
  int64_t total_env_steps = 0;
};

// Runs the full training loop (PPO or distillation per the config). In
// distributed mode every rank calls this with the same config; rank 0 owns
// all files.
TrainResult run_training(const RunConfig& cfg, const WorkerIdentity& identity = {});

struct EvalReport {
  double mean_return = 0.0;
  double std_return = 0.0;
  double mean_length = 0.0;
  std::optional<double> success_rate;
  int episodes = 0;
};

// Reloads a checkpoint, rebuilds its environment from the embedded config and
// plays N full episodes without learning.
EvalReport evaluate_checkpoint(const std::string& checkpoint_path, int episodes,
                               bool deterministic);

// Writes the reduced inference-only file (actor mean + recurrent cell +
// observation schema).
void export_policy_file(const std::string& checkpoint_path, const std::string& out_path);

// Loads an exported policy file and runs it as a deterministic
// observation -> action function.
class ExportedPolicy {
 public:
  explicit ExportedPolicy(const std::string& path);

  int action_dim() const { return action_dim_; }
  int64_t obs_dim() const { return obs_dim_; }
  bool recurrent() const { return gru_.has_value(); }
  const ObsSchema& obs_schema() const { return schema_; }

  // obs is the policy group, [B, obs_dim]. reset_mask (optional, length B)
  // zeroes the memory of envs that just finished an episode.
  Tensor act(const Tensor& obs, std::span<const float> reset_mask = {});
  void reset_memory() { hidden_ = Tensor(); }

 private:
  std::unique_ptr<ParamStore> store_;
  Mlp actor_;
  std::optional<GruCell> gru_;
  ObsSchema schema_;
  int action_dim_ = 0;
  int64_t obs_dim_ = 0;
  int hidden_dim_ = 0;
  Tensor hidden_;
};

// Loads a checkpoint into a freshly rebuilt policy (expert teachers, tests).
struct LoadedPolicy {
  RunConfig config;
  std::unique_ptr<ParamStore> store;
  GaussianActorCritic net;
  nlohmann::json header;
};

LoadedPolicy load_policy(const std::string& checkpoint_path);

}  // namespace rlcore
