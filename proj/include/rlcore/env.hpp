#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "rlcore/obs.hpp"
#include "rlcore/tensor.hpp"

namespace rlcore {

struct EnvSpec {
  int num_envs = 0;
  int action_dim = 0;
  std::vector<float> action_lo;
  std::vector<float> action_hi;
  int64_t max_episode_length = 0;
  ObsSchema schema;
};

// Result of one vectorized step under the same-step reset convention:
// finished sub-environments are reset inside the call, obs already holds their
// fresh initial observation, and the final pre-reset observation travels in
// terminal_obs (rows aligned with `finished`, ascending env indices).
struct StepResult {
  ObservationSet obs;
  Tensor reward;  // [B]
  std::vector<uint8_t> terminated;
  std::vector<uint8_t> timeout;
  std::vector<int> finished;
  ObservationSet terminal_obs;
};

struct EnvOverrides {
  std::optional<int64_t> max_episode_length;
  // Pre-age episode counters uniformly in [0, T_max) at reset_all so that
  // early timeouts are desynchronized across the batch.
  bool randomize_initial_step = true;
  // point_mass only: std of Gaussian noise on the policy group; when > 0 an
  // exact privileged "expert" group is also exposed.
  double obs_noise_std = 0.0;
};

class VecEnv {
 public:
  virtual ~VecEnv() = default;
  const EnvSpec& spec() const { return spec_; }

  // Samples every sub-environment's initial state; deterministic given seed.
  virtual ObservationSet reset_all(uint64_t seed) = 0;
  virtual StepResult step(const Tensor& actions) = 0;

  // True when episodes have a task-defined success notion (terminal reward).
  virtual bool defines_success() const { return false; }

 protected:
  EnvSpec spec_;
};

// name: point_mass | pendulum | sparse_chain | memory_recall.
// env_index_offset shifts the per-env RNG streams so that a worker holding a
// slice of a larger batch reproduces exactly the slice it owns.
std::unique_ptr<VecEnv> make_env(const std::string& name, int num_envs,
                                 const EnvOverrides& overrides = {},
                                 int64_t env_index_offset = 0);

// Scalar single-env transitions behind the built-in environments. Rewards are
// evaluated at the pre-transition state; actions are assumed already clipped.
struct ScalarStep {
  double reward = 0.0;
  bool terminated = false;
};

// v' = v + dt*u, p' = p + dt*v', dt = 0.05; never terminates.
ScalarStep point_mass_step(double& p, double& v, double u);
// Semi-implicit Euler swing-up dynamics; theta = 0 is upright.
ScalarStep pendulum_step(double& theta, double& omega, double u);
// p' = clip(p + 0.1*a, 0, 10); terminates with reward 1 once p' >= 9.5.
ScalarStep sparse_chain_step(double& p, double a);
// Terminates at the query step with reward 1 iff sign(a) matches the cue.
ScalarStep memory_recall_step(double cue, int64_t elapsed, double a);

// Query step of memory_recall (observation shows the cue only at t=0 and the
// query flag only at this step).
inline constexpr int64_t kMemoryRecallQueryStep = 12;

// Discrete-time LQR solution for the point-mass plant, used as an acceptance
// oracle. Iterates the Riccati recursion to a fixed point and estimates the
// closed-loop return of u = -Kx over the initial distribution by simulation.
struct LqrSolution {
  std::array<double, 2> gain;     // K (row)
  std::array<double, 4> riccati;  // P, row-major
  double expected_return = 0.0;   // mean episode return, gamma-weighted
};

LqrSolution lqr_oracle(double dt = 0.05, double q_pos = 1.0, double q_vel = 0.1,
                       double r_cost = 0.01, double gamma = 1.0, int episodes = 10000,
                       uint64_t seed = 12345);

}  // namespace rlcore
