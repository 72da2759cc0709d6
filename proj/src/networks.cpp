#include "rlcore/networks.hpp"

#include <cmath>
#include <cstring>

#include "rlcore/rng.hpp"

namespace rlcore {

namespace {

constexpr float kHalfLog2Pi = 0.9189385332046727f;  // 0.5*log(2*pi)
constexpr float kLn2 = 0.6931471805599453f;

uint64_t component_seed(uint64_t seed, uint64_t tag) { return mix64(seed, tag); }

}  // namespace

Activation activation_from_string(const std::string& name) {
  if (name == "tanh") return Activation::kTanh;
  if (name == "elu") return Activation::kElu;
  if (name == "relu") return Activation::kRelu;
  throw ConfigError("unknown activation \"" + name + "\" (expected tanh, elu or relu)");
}

std::string activation_to_string(Activation act) {
  switch (act) {
    case Activation::kTanh: return "tanh";
    case Activation::kElu: return "elu";
    case Activation::kRelu: return "relu";
  }
  return "tanh";
}

Tensor ParamStore::add(const std::string& name, Tensor value, bool trainable) {
  for (const auto& p : params_) {
    if (p.name == name) throw StateError("duplicate parameter name: " + name);
  }
  value.set_requires_grad(trainable);
  params_.push_back({name, value, trainable});
  return value;
}

int64_t ParamStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& p : params_) p.value.zero_grad();
}

std::vector<float> ParamStore::flat_values() const {
  std::vector<float> out;
  out.reserve(total_size());
  for (const auto& p : params_) out.insert(out.end(), p.value.data().begin(), p.value.data().end());
  return out;
}

void ParamStore::set_flat_values(std::span<const float> values) {
  if (static_cast<int64_t>(values.size()) != total_size()) {
    throw ShapeError("flat parameter size mismatch: got " + std::to_string(values.size()) +
                     ", expected " + std::to_string(total_size()));
  }
  size_t offset = 0;
  for (auto& p : params_) {
    auto dst = p.value.mutable_data();
    std::memcpy(dst.data(), values.data() + offset, dst.size() * sizeof(float));
    offset += dst.size();
  }
}

std::vector<float> ParamStore::flat_grads() const {
  std::vector<float> out;
  out.reserve(total_size());
  for (const auto& p : params_) {
    auto g = p.value.grad();
    if (g.empty()) {
      out.insert(out.end(), p.value.numel(), 0.0f);
    } else {
      out.insert(out.end(), g.begin(), g.end());
    }
  }
  return out;
}

void ParamStore::set_flat_grads(std::span<const float> grads) {
  if (static_cast<int64_t>(grads.size()) != total_size()) {
    throw ShapeError("flat gradient size mismatch");
  }
  size_t offset = 0;
  for (auto& p : params_) {
    p.value.impl()->ensure_grad();
    auto& g = p.value.impl()->grad;
    std::memcpy(g.data(), grads.data() + offset, g.size() * sizeof(float));
    offset += g.size();
  }
}

uint64_t ParamStore::checksum() const {
  uint64_t h = 1469598103934665603ull;  // FNV-1a offset basis
  for (const auto& p : params_) {
    const auto data = p.value.data();
    const auto* bytes = reinterpret_cast<const unsigned char*>(data.data());
    for (size_t i = 0; i < data.size() * sizeof(float); ++i) {
      h ^= bytes[i];
      h *= 1099511628211ull;
    }
  }
  return h;
}

Tensor Mlp::forward(const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != spec.input_dim) {
    throw ShapeError("mlp input " + shape_str(x.shape()) + " does not match input_dim " +
                     std::to_string(spec.input_dim));
  }
  Tensor h = x;
  const size_t layers = weights.size();
  for (size_t i = 0; i < layers; ++i) {
    h = add(matmul(h, weights[i]), biases[i]);
    if (i + 1 == layers) break;  // affine output layer
    switch (spec.activation) {
      case Activation::kTanh: h = tanh(h); break;
      case Activation::kElu: h = sub(softplus(h), Tensor::scalar(kLn2)); break;
      case Activation::kRelu: h = maximum(h, Tensor::scalar(0.0f)); break;
    }
  }
  return h;
}

Mlp make_mlp(ParamStore& store, const std::string& prefix, const MlpSpec& spec, uint64_t seed,
             float output_scale, bool trainable) {
  if (spec.input_dim < 1 || spec.output_dim < 1) {
    throw ConfigError("mlp dims must be >= 1");
  }
  for (int h : spec.hidden_sizes) {
    if (h < 1) throw ConfigError("mlp hidden sizes must be >= 1");
  }
  Mlp mlp;
  mlp.spec = spec;
  std::vector<int> dims;
  dims.push_back(spec.input_dim);
  dims.insert(dims.end(), spec.hidden_sizes.begin(), spec.hidden_sizes.end());
  dims.push_back(spec.output_dim);
  for (size_t i = 0; i + 1 < dims.size(); ++i) {
    RngStream rng(seed, StreamTag::kParamInit, {static_cast<uint64_t>(i)});
    const float bound = std::sqrt(1.0f / static_cast<float>(dims[i]));
    Tensor w = Tensor::uniform({dims[i], dims[i + 1]}, rng, -bound, bound);
    if (i + 2 == dims.size() && output_scale != 1.0f) {
      for (auto& v : w.mutable_data()) v *= output_scale;
    }
    const std::string layer = prefix + ".l" + std::to_string(i);
    mlp.weights.push_back(store.add(layer + ".w", w, trainable));
    mlp.biases.push_back(store.add(layer + ".b", Tensor::zeros({dims[i + 1]}), trainable));
  }
  return mlp;
}

Tensor GruCell::step(const Tensor& x, const Tensor& h) const {
  auto z = sigmoid(add(add(matmul(x, w_z), matmul(h, u_z)), b_z));
  auto r = sigmoid(add(add(matmul(x, w_r), matmul(h, u_r)), b_r));
  auto n = tanh(add(add(matmul(x, w_n), matmul(mul(r, h), u_n)), b_n));
  return add(mul(sub(Tensor::scalar(1.0f), z), n), mul(z, h));
}

GruCell make_gru(ParamStore& store, const std::string& prefix, int input_dim, int hidden_dim,
                 uint64_t seed) {
  GruCell cell;
  cell.input_dim = input_dim;
  cell.hidden_dim = hidden_dim;
  const float wb = std::sqrt(1.0f / static_cast<float>(input_dim));
  const float ub = std::sqrt(1.0f / static_cast<float>(hidden_dim));
  const char* gates[] = {"z", "r", "n"};
  Tensor* ws[] = {&cell.w_z, &cell.w_r, &cell.w_n};
  Tensor* us[] = {&cell.u_z, &cell.u_r, &cell.u_n};
  Tensor* bs[] = {&cell.b_z, &cell.b_r, &cell.b_n};
  for (int g = 0; g < 3; ++g) {
    RngStream rng(seed, StreamTag::kParamInit, {100 + static_cast<uint64_t>(g)});
    const std::string base = prefix + "." + gates[g];
    *ws[g] = store.add(base + ".w", Tensor::uniform({input_dim, hidden_dim}, rng, -wb, wb));
    *us[g] = store.add(base + ".u", Tensor::uniform({hidden_dim, hidden_dim}, rng, -ub, ub));
    *bs[g] = store.add(base + ".b", Tensor::zeros({hidden_dim}));
  }
  return cell;
}

std::vector<Tensor> gru_rollforward(const GruCell& cell, const Tensor& h0,
                                    const std::vector<Tensor>& xs,
                                    const std::vector<Tensor>& reset_mask) {
  if (xs.size() != reset_mask.size()) {
    throw ShapeError("gru_rollforward: sequence length mismatch between inputs and reset masks");
  }
  std::vector<Tensor> hidden;
  hidden.reserve(xs.size());
  Tensor h = h0;
  for (size_t t = 0; t < xs.size(); ++t) {
    h = mul(h, sub(Tensor::scalar(1.0f), reset_mask[t]));
    h = cell.step(xs[t], h);
    hidden.push_back(h);
  }
  return hidden;
}

GaussianActorCritic make_actor_critic(ParamStore& store, const ObsSchema& schema,
                                      const ActorCriticConfig& cfg, uint64_t seed) {
  if (cfg.action_dim < 1) throw ConfigError("action_dim must be >= 1");
  auto it = schema.find(cfg.actor_group);
  if (it == schema.end()) {
    throw RoutingError("observation group \"" + cfg.actor_group + "\" is missing");
  }
  const int obs_dim = static_cast<int>(it->second);

  GaussianActorCritic net;
  net.cfg = cfg;
  net.critic_group = schema.count(cfg.critic_group) ? cfg.critic_group : cfg.actor_group;

  int head_in = obs_dim;
  int critic_in = static_cast<int>(schema.at(net.critic_group));
  if (cfg.recurrent) {
    net.gru = make_gru(store, "memory", obs_dim, cfg.hidden_dim, component_seed(seed, 3));
    head_in = cfg.hidden_dim;
    critic_in = cfg.hidden_dim;
    net.critic_group = cfg.actor_group;  // both heads read the memory state
  }

  MlpSpec actor_spec{head_in, cfg.hidden_sizes, cfg.activation, cfg.action_dim};
  net.actor = make_mlp(store, "actor", actor_spec, component_seed(seed, 1), 0.01f);
  net.log_std = store.add("log_std", Tensor::zeros({cfg.action_dim}));
  MlpSpec critic_spec{critic_in, cfg.hidden_sizes, cfg.activation, 1};
  net.critic = make_mlp(store, "critic", critic_spec, component_seed(seed, 2));
  return net;
}

Tensor gaussian_log_prob(const Tensor& mean, const Tensor& log_std, const Tensor& actions) {
  auto diff = sub(actions, mean);
  auto inv_var = exp(mul(log_std, Tensor::scalar(-2.0f)));
  auto quad = mul(mul(square(diff), inv_var), Tensor::scalar(0.5f));
  auto per_dim = add(add(log_std, Tensor::scalar(kHalfLog2Pi)), quad);
  return neg(sum(per_dim, {1}));
}

Tensor gaussian_entropy(const Tensor& log_std, int64_t batch) {
  const float a = static_cast<float>(log_std.numel());
  auto ent = add(sum(log_std), Tensor::scalar(a * (0.5f + kHalfLog2Pi)));
  return add(ent, Tensor::zeros({batch}));  // broadcast to [B]
}

namespace {

// Shared forward trunk: (optional GRU) -> head features. The critic's input
// is resolved lazily so actor-only passes never touch the critic group.
struct Trunk {
  Tensor actor_in;
  Tensor next_hidden;
};

Trunk run_trunk(const GaussianActorCritic& net, const ObservationSet& obs, const Tensor* hidden) {
  Trunk t;
  const Tensor& x = obs.at(net.cfg.actor_group);
  if (net.recurrent()) {
    Tensor h = hidden != nullptr && hidden->defined()
                   ? *hidden
                   : Tensor::zeros({x.dim(0), net.cfg.hidden_dim});
    t.next_hidden = net.gru->step(x, h);
    t.actor_in = t.next_hidden;
  } else {
    t.actor_in = x;
  }
  return t;
}

Tensor critic_input(const GaussianActorCritic& net, const ObservationSet& obs, const Trunk& t) {
  return net.recurrent() ? t.next_hidden : obs.at(net.critic_group);
}

}  // namespace

ActResult policy_act(const GaussianActorCritic& net, const ObservationSet& obs, ActMode mode,
                     const Tensor* noise, const Tensor* hidden) {
  Trunk trunk = run_trunk(net, obs, hidden);
  Tensor mu = net.actor.forward(trunk.actor_in);

  ActResult out;
  if (mode == ActMode::kSample) {
    if (noise == nullptr) throw ArgumentError("sampling requires a noise tensor");
    auto sigma = exp(net.log_std);
    out.action = add(mu, mul(sigma, *noise));
  } else {
    out.action = mu;
  }
  out.log_prob = gaussian_log_prob(mu, net.log_std, out.action);
  out.value = reshape(net.critic.forward(critic_input(net, obs, trunk)), {mu.dim(0)});
  out.next_hidden = trunk.next_hidden;
  return out;
}

EvalResult policy_evaluate(const GaussianActorCritic& net, const ObservationSet& obs,
                           const Tensor& actions) {
  if (net.recurrent()) {
    throw StateError("policy_evaluate on a recurrent network; use policy_evaluate_sequence");
  }
  Tensor mu = net.actor.forward(obs.at(net.cfg.actor_group));
  EvalResult out;
  out.log_prob = gaussian_log_prob(mu, net.log_std, actions);
  out.entropy = gaussian_entropy(net.log_std, mu.dim(0));
  out.value = reshape(net.critic.forward(obs.at(net.critic_group)), {mu.dim(0)});
  return out;
}

EvalResult policy_evaluate_sequence(const GaussianActorCritic& net,
                                    const std::vector<ObservationSet>& obs_seq,
                                    const std::vector<Tensor>& actions_seq, const Tensor& h0,
                                    const std::vector<Tensor>& reset_mask) {
  if (!net.recurrent()) throw StateError("policy_evaluate_sequence requires a recurrent network");
  std::vector<Tensor> xs;
  xs.reserve(obs_seq.size());
  for (const auto& o : obs_seq) xs.push_back(o.at(net.cfg.actor_group));
  auto hidden = gru_rollforward(*net.gru, h0, xs, reset_mask);

  Tensor feats = concat_rows(hidden);         // [T*E, H]
  Tensor actions = concat_rows(actions_seq);  // [T*E, A]
  Tensor mu = net.actor.forward(feats);
  EvalResult out;
  out.log_prob = gaussian_log_prob(mu, net.log_std, actions);
  out.entropy = gaussian_entropy(net.log_std, mu.dim(0));
  out.value = reshape(net.critic.forward(feats), {mu.dim(0)});
  return out;
}

Tensor policy_value(const GaussianActorCritic& net, const ObservationSet& obs,
                    const Tensor* hidden) {
  Trunk trunk = run_trunk(net, obs, hidden);
  Tensor x = critic_input(net, obs, trunk);
  return reshape(net.critic.forward(x), {x.dim(0)});
}

Tensor policy_mean(const GaussianActorCritic& net, const ObservationSet& obs,
                   const Tensor* hidden, Tensor* next_hidden) {
  Trunk trunk = run_trunk(net, obs, hidden);
  if (next_hidden != nullptr) *next_hidden = trunk.next_hidden;
  return net.actor.forward(trunk.actor_in);
}

Tensor policy_mean_sequence(const GaussianActorCritic& net,
                            const std::vector<ObservationSet>& obs_seq, const Tensor& h0,
                            const std::vector<Tensor>& reset_mask) {
  if (!net.recurrent()) throw StateError("policy_mean_sequence requires a recurrent network");
  std::vector<Tensor> xs;
  xs.reserve(obs_seq.size());
  for (const auto& o : obs_seq) xs.push_back(o.at(net.cfg.actor_group));
  auto hidden = gru_rollforward(*net.gru, h0, xs, reset_mask);
  return net.actor.forward(concat_rows(hidden));
}

RndPair make_rnd_pair(ParamStore& store, int input_dim, int embed_dim,
                      const std::vector<int>& hidden_sizes, uint64_t seed) {
  if (embed_dim < 1) throw ConfigError("rnd embedding dim must be >= 1");
  RndPair pair;
  pair.embed_dim = embed_dim;
  MlpSpec spec{input_dim, hidden_sizes, Activation::kElu, embed_dim};
  pair.target = make_mlp(store, "rnd.target", spec, component_seed(seed, 10), 1.0f,
                         /*trainable=*/false);
  pair.predictor = make_mlp(store, "rnd.predictor", spec, component_seed(seed, 11));
  return pair;
}

std::pair<Tensor, Tensor> rnd_embed(const RndPair& pair, const Tensor& x) {
  return {pair.target.forward(x), pair.predictor.forward(x)};
}

}  // namespace rlcore
