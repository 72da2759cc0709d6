#include "rlcore/env.hpp"

#include <cmath>
#include <cstring>
#include <map>

#include "rlcore/rng.hpp"

namespace rlcore {

namespace {

float fclip(float v, float lo, float hi) { return std::min(std::max(v, lo), hi); }

// Per-env observation row views, one span per group.
using GroupRows = std::map<std::string, std::span<float>>;

// Vectorized wrapper around scalar per-env dynamics. Each sub-environment owns
// counter-based RNG streams keyed by (seed, global env index, per-env
// counters), which makes batched stepping bitwise equal to B independent
// scalar simulations.
class ScalarDynamicsEnv : public VecEnv {
 public:
  ObservationSet reset_all(uint64_t seed) override {
    seed_ = seed;
    for (int b = 0; b < spec_.num_envs; ++b) {
      auto& slot = slots_[b];
      slot.episode = 0;
      slot.obs_draws = 0;
      RngStream rng(seed_, StreamTag::kEnvReset, {global_index(b), 0});
      sample_initial(rng, slot.state);
      slot.elapsed = 0;
      if (randomize_initial_step_) {
        RngStream age(seed_, StreamTag::kEnvPreage, {global_index(b)});
        slot.elapsed = static_cast<int64_t>(age.uniform() *
                                            static_cast<double>(spec_.max_episode_length));
      }
    }
    std::map<std::string, std::vector<float>> buffers = group_buffers(spec_.num_envs);
    for (int b = 0; b < spec_.num_envs; ++b) observe_into(b, buffers, b);
    return to_obs_set(buffers, spec_.num_envs);
  }

  StepResult step(const Tensor& actions) override {
    const int B = spec_.num_envs;
    const int A = spec_.action_dim;
    if (actions.rank() != 2 || actions.dim(0) != B || actions.dim(1) != A) {
      throw ShapeError("actions shape " + shape_str(actions.shape()) + ", expected [" +
                       std::to_string(B) + "," + std::to_string(A) + "]");
    }
    const auto act = actions.data();

    StepResult result;
    result.reward = Tensor::zeros({B});
    result.terminated.assign(B, 0);
    result.timeout.assign(B, 0);
    auto reward = result.reward.mutable_data();

    auto obs_buffers = group_buffers(B);
    std::vector<int> finished;
    std::map<std::string, std::vector<float>> term_rows;  // appended per finished env

    for (int b = 0; b < B; ++b) {
      auto& slot = slots_[b];
      std::vector<float> a(A);
      for (int i = 0; i < A; ++i) {
        const float v = act[static_cast<size_t>(b) * A + i];
        if (std::isnan(v)) throw EnvFault("NaN action for env " + std::to_string(b));
        a[i] = fclip(v, spec_.action_lo[i], spec_.action_hi[i]);
      }

      bool terminated = false;
      reward[b] = static_cast<float>(advance(slot.state, a, slot.elapsed, &terminated));
      slot.elapsed += 1;
      const bool timeout = !terminated && slot.elapsed >= spec_.max_episode_length;
      result.terminated[b] = terminated ? 1 : 0;
      result.timeout[b] = timeout ? 1 : 0;

      if (terminated || timeout) {
        finished.push_back(b);
        // pre-reset observation, delivered for bootstrapping
        append_terminal_row(b, term_rows);
        // same-step reset
        slot.episode += 1;
        RngStream rng(seed_, StreamTag::kEnvReset,
                      {global_index(b), static_cast<uint64_t>(slot.episode)});
        sample_initial(rng, slot.state);
        slot.elapsed = 0;
      }
      observe_into(b, obs_buffers, b);
    }

    result.obs = to_obs_set(obs_buffers, B);
    result.finished = std::move(finished);
    result.terminal_obs = to_obs_set(term_rows, static_cast<int>(result.finished.size()));
    return result;
  }

 protected:
  ScalarDynamicsEnv(int num_envs, int state_dim, int64_t env_index_offset, bool randomize_start)
      : state_dim_(state_dim),
        offset_(env_index_offset),
        randomize_initial_step_(randomize_start) {
    spec_.num_envs = num_envs;
    slots_.resize(num_envs);
    for (auto& s : slots_) s.state.assign(state_dim, 0.0);
  }

  struct Slot {
    std::vector<double> state;
    int64_t elapsed = 0;
    int64_t episode = 0;
    uint64_t obs_draws = 0;
  };

  virtual void sample_initial(RngStream& rng, std::vector<double>& state) const = 0;
  // Advances state in place; returns the reward of the transition.
  virtual double advance(std::vector<double>& state, std::span<const float> action,
                         int64_t elapsed, bool* terminated) const = 0;
  virtual void observe(const std::vector<double>& state, int64_t elapsed, RngStream& noise,
                       GroupRows& rows) const = 0;

  uint64_t global_index(int b) const { return static_cast<uint64_t>(offset_ + b); }

  uint64_t seed_ = 0;
  int state_dim_;
  int64_t offset_;
  bool randomize_initial_step_;
  std::vector<Slot> slots_;

 private:
  std::map<std::string, std::vector<float>> group_buffers(int rows) const {
    std::map<std::string, std::vector<float>> buffers;
    for (const auto& [name, width] : spec_.schema) {
      buffers[name].assign(static_cast<size_t>(rows) * width, 0.0f);
    }
    return buffers;
  }

  void observe_env(int b, GroupRows& rows) {
    auto& slot = slots_[b];
    RngStream noise(seed_, StreamTag::kEnvDynamics, {global_index(b), slot.obs_draws++});
    observe(slot.state, slot.elapsed, noise, rows);
  }

  void observe_into(int b, std::map<std::string, std::vector<float>>& buffers, int row) {
    GroupRows rows;
    for (const auto& [name, width] : spec_.schema) {
      rows[name] = std::span<float>(buffers[name].data() + static_cast<size_t>(row) * width,
                                    static_cast<size_t>(width));
    }
    observe_env(b, rows);
  }

  void append_terminal_row(int b, std::map<std::string, std::vector<float>>& term_rows) {
    GroupRows rows;
    for (const auto& [name, width] : spec_.schema) {
      auto& buf = term_rows[name];
      buf.resize(buf.size() + width, 0.0f);
      rows[name] = std::span<float>(buf.data() + buf.size() - width, static_cast<size_t>(width));
    }
    observe_env(b, rows);
  }

  ObservationSet to_obs_set(const std::map<std::string, std::vector<float>>& buffers,
                            int rows) const {
    ObservationSet out;
    for (const auto& [name, width] : spec_.schema) {
      auto it = buffers.find(name);
      std::vector<float> data = it == buffers.end() ? std::vector<float>() : it->second;
      data.resize(static_cast<size_t>(rows) * width, 0.0f);
      out.groups.emplace(name, Tensor::from({rows, width}, std::move(data)));
    }
    return out;
  }
};

// ---- point_mass -------------------------------------------------------------
// Double integrator: v' = v + dt*u, p' = p + dt*v', cost p^2 + 0.1 v^2 +
// 0.01 u^2 at the pre-transition state. Never terminates; timeout only.
class PointMassEnv : public ScalarDynamicsEnv {
 public:
  PointMassEnv(int num_envs, const EnvOverrides& o, int64_t offset)
      : ScalarDynamicsEnv(num_envs, 2, offset, o.randomize_initial_step),
        noise_std_(o.obs_noise_std) {
    spec_.action_dim = 1;
    spec_.action_lo = {-10.0f};
    spec_.action_hi = {10.0f};
    spec_.max_episode_length = o.max_episode_length.value_or(200);
    spec_.schema = {{"policy", 2}, {"critic", 2}};
    if (noise_std_ > 0.0) spec_.schema["expert"] = 2;
  }

 private:
  void sample_initial(RngStream& rng, std::vector<double>& state) const override {
    state[0] = rng.uniform(-1.0, 1.0);
    state[1] = rng.uniform(-1.0, 1.0);
  }

  double advance(std::vector<double>& state, std::span<const float> action, int64_t,
                 bool* terminated) const override {
    auto step = point_mass_step(state[0], state[1], action[0]);
    *terminated = step.terminated;
    return step.reward;
  }

  void observe(const std::vector<double>& state, int64_t, RngStream& noise,
               GroupRows& rows) const override {
    const float p = static_cast<float>(state[0]);
    const float v = static_cast<float>(state[1]);
    float pp = p, pv = v;
    if (noise_std_ > 0.0) {
      pp += static_cast<float>(noise_std_ * noise.normal());
      pv += static_cast<float>(noise_std_ * noise.normal());
      rows.at("expert")[0] = p;
      rows.at("expert")[1] = v;
    }
    rows.at("policy")[0] = pp;
    rows.at("policy")[1] = pv;
    rows.at("critic")[0] = p;
    rows.at("critic")[1] = v;
  }

  double noise_std_;
};

// ---- pendulum ---------------------------------------------------------------
// Torque-limited swing-up; theta = 0 is upright. Semi-implicit Euler.
class PendulumEnv : public ScalarDynamicsEnv {
 public:
  PendulumEnv(int num_envs, const EnvOverrides& o, int64_t offset)
      : ScalarDynamicsEnv(num_envs, 2, offset, o.randomize_initial_step) {
    spec_.action_dim = 1;
    spec_.action_lo = {-2.0f};
    spec_.action_hi = {2.0f};
    spec_.max_episode_length = o.max_episode_length.value_or(200);
    spec_.schema = {{"policy", 3}, {"critic", 3}};
  }

 private:
  void sample_initial(RngStream& rng, std::vector<double>& state) const override {
    state[0] = M_PI - 2.0 * M_PI * rng.uniform();  // (-pi, pi]
    state[1] = rng.uniform(-1.0, 1.0);
  }

  double advance(std::vector<double>& state, std::span<const float> action, int64_t,
                 bool* terminated) const override {
    auto step = pendulum_step(state[0], state[1], action[0]);
    *terminated = step.terminated;
    return step.reward;
  }

  void observe(const std::vector<double>& state, int64_t, RngStream&,
               GroupRows& rows) const override {
    const float c = static_cast<float>(std::cos(state[0]));
    const float s = static_cast<float>(std::sin(state[0]));
    const float w = static_cast<float>(state[1]);
    for (const char* g : {"policy", "critic"}) {
      rows.at(g)[0] = c;
      rows.at(g)[1] = s;
      rows.at(g)[2] = w;
    }
  }
};

// ---- sparse_chain -----------------------------------------------------------
// 1-d chain with a single terminal reward at the far end; the curiosity
// testbed. Observation is p/10 routed to both the policy and the rnd group.
class SparseChainEnv : public ScalarDynamicsEnv {
 public:
  SparseChainEnv(int num_envs, const EnvOverrides& o, int64_t offset)
      : ScalarDynamicsEnv(num_envs, 1, offset, o.randomize_initial_step) {
    spec_.action_dim = 1;
    spec_.action_lo = {-1.0f};
    spec_.action_hi = {1.0f};
    spec_.max_episode_length = o.max_episode_length.value_or(256);
    spec_.schema = {{"policy", 1}, {"rnd", 1}};
  }

  bool defines_success() const override { return true; }

 private:
  void sample_initial(RngStream&, std::vector<double>& state) const override { state[0] = 0.0; }

  double advance(std::vector<double>& state, std::span<const float> action, int64_t,
                 bool* terminated) const override {
    auto step = sparse_chain_step(state[0], action[0]);
    *terminated = step.terminated;
    return step.reward;
  }

  void observe(const std::vector<double>& state, int64_t, RngStream&,
               GroupRows& rows) const override {
    rows.at("policy")[0] = static_cast<float>(state[0] / 10.0);
    rows.at("rnd")[0] = static_cast<float>(state[0] / 10.0);
  }
};

// ---- memory_recall ----------------------------------------------------------
// A cue (+-1) is shown only at t=0; at the query step t=12 the episode ends
// with reward 1 iff the action sign matches the cue. Solvable only with
// memory; a feedforward policy is stuck at chance level.
class MemoryRecallEnv : public ScalarDynamicsEnv {
 public:
  MemoryRecallEnv(int num_envs, const EnvOverrides& o, int64_t offset)
      : ScalarDynamicsEnv(num_envs, 1, offset, o.randomize_initial_step) {
    spec_.action_dim = 1;
    spec_.action_lo = {-1.0f};
    spec_.action_hi = {1.0f};
    spec_.max_episode_length = o.max_episode_length.value_or(kMemoryRecallQueryStep + 1);
    spec_.schema = {{"policy", 3}};
  }

  bool defines_success() const override { return true; }

 private:
  void sample_initial(RngStream& rng, std::vector<double>& state) const override {
    state[0] = rng.uniform() < 0.5 ? -1.0 : 1.0;  // cue
  }

  double advance(std::vector<double>& state, std::span<const float> action, int64_t elapsed,
                 bool* terminated) const override {
    auto step = memory_recall_step(state[0], elapsed, action[0]);
    *terminated = step.terminated;
    return step.reward;
  }

  void observe(const std::vector<double>& state, int64_t elapsed, RngStream&,
               GroupRows& rows) const override {
    rows.at("policy")[0] = elapsed == 0 ? static_cast<float>(state[0]) : 0.0f;
    rows.at("policy")[1] = elapsed == kMemoryRecallQueryStep ? 1.0f : 0.0f;
    rows.at("policy")[2] = static_cast<float>(elapsed) / static_cast<float>(kMemoryRecallQueryStep);
  }
};

}  // namespace

ScalarStep point_mass_step(double& p, double& v, double u) {
  constexpr double dt = 0.05;
  const double reward = -(p * p + 0.1 * v * v + 0.01 * u * u);
  v = v + dt * u;
  p = p + dt * v;
  return {reward, false};
}

ScalarStep pendulum_step(double& theta, double& omega, double u) {
  constexpr double dt = 0.05, g = 10.0, m = 1.0, l = 1.0, max_speed = 8.0;
  const double wrapped = std::remainder(theta, 2.0 * M_PI);
  const double reward = -(wrapped * wrapped + 0.1 * omega * omega + 0.001 * u * u);
  const double acc = 3.0 * g / (2.0 * l) * std::sin(theta) + 3.0 / (m * l * l) * u;
  omega = std::min(std::max(omega + dt * acc, -max_speed), max_speed);
  theta = theta + dt * omega;
  return {reward, false};
}

ScalarStep sparse_chain_step(double& p, double a) {
  p = std::min(std::max(p + 0.1 * a, 0.0), 10.0);
  const bool done = p >= 9.5;
  return {done ? 1.0 : 0.0, done};
}

ScalarStep memory_recall_step(double cue, int64_t elapsed, double a) {
  if (elapsed == kMemoryRecallQueryStep) {
    return {a * cue > 0.0 ? 1.0 : 0.0, true};
  }
  return {0.0, false};
}

std::unique_ptr<VecEnv> make_env(const std::string& name, int num_envs,
                                 const EnvOverrides& overrides, int64_t env_index_offset) {
  if (num_envs < 1) throw ConfigError("num_envs must be >= 1");
  if (overrides.max_episode_length && *overrides.max_episode_length < 1) {
    throw ConfigError("max_episode_length must be >= 1");
  }
  if (name == "point_mass") {
    return std::make_unique<PointMassEnv>(num_envs, overrides, env_index_offset);
  }
  if (name == "pendulum") {
    return std::make_unique<PendulumEnv>(num_envs, overrides, env_index_offset);
  }
  if (name == "sparse_chain") {
    return std::make_unique<SparseChainEnv>(num_envs, overrides, env_index_offset);
  }
  if (name == "memory_recall") {
    return std::make_unique<MemoryRecallEnv>(num_envs, overrides, env_index_offset);
  }
  throw ConfigError("unknown environment \"" + name + "\"");
}

LqrSolution lqr_oracle(double dt, double q_pos, double q_vel, double r_cost, double gamma,
                       int episodes, uint64_t seed) {
  // x = (p, v), A = [[1, dt], [0, 1]], B = [dt^2, dt]^T
  const double A[4] = {1.0, dt, 0.0, 1.0};
  const double B[2] = {dt * dt, dt};
  const double Q[4] = {q_pos, 0.0, 0.0, q_vel};

  double P[4] = {Q[0], Q[1], Q[2], Q[3]};
  double K[2] = {0.0, 0.0};
  bool converged = false;
  for (int it = 0; it < 100000; ++it) {
    // S = R + B^T P B;  K = S^-1 B^T P A;  P' = Q + A^T P A - (B^T P A)^T K
    const double PB[2] = {P[0] * B[0] + P[1] * B[1], P[2] * B[0] + P[3] * B[1]};
    const double S = r_cost + B[0] * PB[0] + B[1] * PB[1];
    const double PA[4] = {P[0] * A[0] + P[1] * A[2], P[0] * A[1] + P[1] * A[3],
                          P[2] * A[0] + P[3] * A[2], P[2] * A[1] + P[3] * A[3]};
    const double BtPA[2] = {B[0] * PA[0] + B[1] * PA[2], B[0] * PA[1] + B[1] * PA[3]};
    K[0] = BtPA[0] / S;
    K[1] = BtPA[1] / S;
    double next[4];
    // A^T (P A)
    next[0] = Q[0] + A[0] * PA[0] + A[2] * PA[2] - BtPA[0] * K[0];
    next[1] = Q[1] + A[0] * PA[1] + A[2] * PA[3] - BtPA[0] * K[1];
    next[2] = Q[2] + A[1] * PA[0] + A[3] * PA[2] - BtPA[1] * K[0];
    next[3] = Q[3] + A[1] * PA[1] + A[3] * PA[3] - BtPA[1] * K[1];
    double delta = 0.0;
    for (int i = 0; i < 4; ++i) {
      delta = std::max(delta, std::abs(next[i] - P[i]));
      P[i] = next[i];
    }
    if (delta < 1e-10) {
      converged = true;
      break;
    }
  }
  if (!converged) throw NumericError("Riccati iteration did not converge");

  // Closed-loop return of u = clip(-Kx) over the env's initial distribution.
  RngStream rng(seed, StreamTag::kEval, {0});
  double total = 0.0;
  for (int ep = 0; ep < episodes; ++ep) {
    double p = rng.uniform(-1.0, 1.0);
    double v = rng.uniform(-1.0, 1.0);
    double ret = 0.0;
    double disc = 1.0;
    for (int t = 0; t < 200; ++t) {
      double u = -(K[0] * p + K[1] * v);
      u = std::min(std::max(u, -10.0), 10.0);
      ret += disc * -(q_pos * p * p + q_vel * v * v + r_cost * u * u);
      disc *= gamma;
      v = v + dt * u;
      p = p + dt * v;
    }
    total += ret;
  }

  LqrSolution out;
  out.gain = {K[0], K[1]};
  out.riccati = {P[0], P[1], P[2], P[3]};
  out.expected_return = total / episodes;
  return out;
}

}  // namespace rlcore
