#pragma once

#include <optional>
#include <string>
#include <vector>

#include "rlcore/obs.hpp"
#include "rlcore/tensor.hpp"

namespace rlcore {

enum class Activation { kTanh, kElu, kRelu };

Activation activation_from_string(const std::string& name);
std::string activation_to_string(Activation act);

struct MlpSpec {
  int input_dim = 0;
  std::vector<int> hidden_sizes = {64, 64};
  Activation activation = Activation::kTanh;
  int output_dim = 0;
};

// Named parameter registry. Insertion order is the canonical order used by
// checkpoints and by the distributed gradient payload.
struct Param {
  std::string name;
  Tensor value;
  bool trainable = true;
};

class ParamStore {
 public:
  Tensor add(const std::string& name, Tensor value, bool trainable = true);
  const std::vector<Param>& entries() const { return params_; }
  int64_t total_size() const;
  void zero_grad();

  std::vector<float> flat_values() const;
  void set_flat_values(std::span<const float> values);
  // Grads in canonical order; zeros where a parameter has no grad.
  std::vector<float> flat_grads() const;
  void set_flat_grads(std::span<const float> grads);

  // FNV-1a over the value bytes in canonical order.
  uint64_t checksum() const;

 private:
  std::vector<Param> params_;
};

// Feedforward multilayer perceptron; weights are [in, out], inputs [B, in].
struct Mlp {
  MlpSpec spec;
  std::vector<Tensor> weights;
  std::vector<Tensor> biases;

  Tensor forward(const Tensor& x) const;
};

// Weights uniform in +-sqrt(1/fan_in), biases zero, output layer scaled by
// output_scale. Deterministic given (spec, seed).
Mlp make_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec, uint64_t seed,
             float output_scale = 1.0f, bool trainable = true);

// Gated recurrent cell:
//   z = sigmoid(x Wz + h Uz + bz)
//   r = sigmoid(x Wr + h Ur + br)
//   n = tanh(x Wn + (r*h) Un + bn)
//   h' = (1-z)*n + z*h
struct GruCell {
  int input_dim = 0;
  int hidden_dim = 0;
  Tensor w_z, u_z, b_z;
  Tensor w_r, u_r, b_r;
  Tensor w_n, u_n, b_n;

  Tensor step(const Tensor& x, const Tensor& h) const;
};

GruCell make_gru(ParamStore& store, const std::string& prefix, int input_dim, int hidden_dim,
                 uint64_t seed);

// Unrolls the cell over a sequence. reset_mask[t] is [B,1] with 1 marking an
// episode boundary before step t; the hidden state is zeroed there before the
// cell is applied. Returns the post-step hidden state for every step.
std::vector<Tensor> gru_rollforward(const GruCell& cell, const Tensor& h0,
                                    const std::vector<Tensor>& xs,
                                    const std::vector<Tensor>& reset_mask);

struct ActorCriticConfig {
  int action_dim = 0;
  std::vector<int> hidden_sizes = {64, 64};
  Activation activation = Activation::kTanh;
  bool recurrent = false;
  int hidden_dim = 64;
  std::string actor_group = "policy";
  std::string critic_group = "critic";  // used when the env provides it
};

// Diagonal-Gaussian actor plus value head. The action distribution is
// N(mu(s), diag(sigma^2)) with a state-independent trainable log std. With
// recurrent=true a shared GRU precedes both heads.
struct GaussianActorCritic {
  ActorCriticConfig cfg;
  Mlp actor;
  Mlp critic;
  Tensor log_std;
  std::optional<GruCell> gru;
  std::string critic_group;  // resolved against the env schema

  int action_dim() const { return cfg.action_dim; }
  bool recurrent() const { return gru.has_value(); }
};

GaussianActorCritic make_actor_critic(ParamStore& store, const ObsSchema& schema,
                                      const ActorCriticConfig& cfg, uint64_t seed);

enum class ActMode { kSample, kMean };

struct ActResult {
  Tensor action;    // [B, A]
  Tensor log_prob;  // [B]
  Tensor value;     // [B]
  Tensor next_hidden;  // defined only for recurrent nets
};

// One policy step. noise must be [B, A] standard normal draws when sampling;
// hidden must be the current [B, H] state for recurrent nets.
ActResult policy_act(const GaussianActorCritic& net, const ObservationSet& obs, ActMode mode,
                     const Tensor* noise = nullptr, const Tensor* hidden = nullptr);

struct EvalResult {
  Tensor log_prob;  // [N]
  Tensor entropy;   // [N]
  Tensor value;     // [N]
};

// Log-density, entropy and value of given (obs, action) pairs under the
// current parameters. Feedforward nets only.
EvalResult policy_evaluate(const GaussianActorCritic& net, const ObservationSet& obs,
                           const Tensor& actions);

// Recurrent counterpart: replays the GRU over the full horizon from h0 with
// reset masks, then evaluates every step. Outputs are flattened t-major.
EvalResult policy_evaluate_sequence(const GaussianActorCritic& net,
                                    const std::vector<ObservationSet>& obs_seq,
                                    const std::vector<Tensor>& actions_seq, const Tensor& h0,
                                    const std::vector<Tensor>& reset_mask);

// Critic-only query (used for bootstrap values).
Tensor policy_value(const GaussianActorCritic& net, const ObservationSet& obs,
                    const Tensor* hidden = nullptr);

// Actor-mean |B| pass (used by exports and experts).
Tensor policy_mean(const GaussianActorCritic& net, const ObservationSet& obs,
                   const Tensor* hidden = nullptr, Tensor* next_hidden = nullptr);

// Recurrent actor-mean over a horizon, flattened t-major to [T*E, A].
Tensor policy_mean_sequence(const GaussianActorCritic& net,
                            const std::vector<ObservationSet>& obs_seq, const Tensor& h0,
                            const std::vector<Tensor>& reset_mask);

Tensor gaussian_log_prob(const Tensor& mean, const Tensor& log_std, const Tensor& actions);
Tensor gaussian_entropy(const Tensor& log_std, int64_t batch);

// Random-network-distillation pair: a frozen, randomly initialized target and
// a trainable predictor, both mapping the curiosity group to R^k.
struct RndPair {
  Mlp target;
  Mlp predictor;
  int embed_dim = 32;
};

RndPair make_rnd_pair(ParamStore& store, int input_dim, int embed_dim,
                      const std::vector<int>& hidden_sizes, uint64_t seed);

// (target_out, predictor_out); the target pass never records gradients.
std::pair<Tensor, Tensor> rnd_embed(const RndPair& pair, const Tensor& x);

}  // namespace rlcore
