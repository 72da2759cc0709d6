#include "rlcore/extensions.hpp"

#include <algorithm>
#include <cmath>

namespace rlcore {

void SignedPermutation::validate(const std::string& what) const {
  std::vector<int> seen(source.size(), 0);
  if (sign.size() != source.size()) {
    throw ConfigError("symmetry map for " + what + ": source/sign length mismatch");
  }
  for (size_t i = 0; i < source.size(); ++i) {
    if (source[i] < 0 || source[i] >= static_cast<int>(source.size())) {
      throw ConfigError("symmetry map for " + what + ": index out of range");
    }
    seen[source[i]] += 1;
    if (sign[i] != 1.0f && sign[i] != -1.0f) {
      throw ConfigError("symmetry map for " + what + ": signs must be +-1");
    }
  }
  for (int c : seen) {
    if (c != 1) throw ConfigError("symmetry map for " + what + " is not a bijection");
  }
  // involution: applying twice must be the identity
  for (size_t i = 0; i < source.size(); ++i) {
    const int j = source[i];
    if (source[j] != static_cast<int>(i) || sign[i] * sign[j] != 1.0f) {
      throw ConfigError("symmetry map for " + what + " is not an involution");
    }
  }
}

void SignedPermutation::apply(std::span<const float> in, std::span<float> out) const {
  for (size_t i = 0; i < source.size(); ++i) out[i] = sign[i] * in[source[i]];
}

void SymmetrySpec::validate() const {
  for (const auto& [name, map] : obs_maps) map.validate("group \"" + name + "\"");
  action_map.validate("actions");
  if (weight < 0.0f) throw ConfigError("symmetry weight must be >= 0");
}

namespace {

const SignedPermutation& map_for(const SymmetrySpec& spec, const std::string& group) {
  auto it = spec.obs_maps.find(group);
  if (it == spec.obs_maps.end()) {
    throw ConfigError("no symmetry map for observation group \"" + group + "\"");
  }
  return it->second;
}

// Mirrors a flat [N, w] table in place-copy form.
std::vector<float> mirror_table(const SignedPermutation& map, std::span<const float> flat,
                                int64_t width) {
  if (static_cast<int64_t>(map.size()) != width) {
    throw ConfigError("symmetry map width " + std::to_string(map.size()) +
                      " does not match group width " + std::to_string(width));
  }
  std::vector<float> out(flat.size());
  const int64_t rows = static_cast<int64_t>(flat.size()) / width;
  for (int64_t r = 0; r < rows; ++r) {
    map.apply(flat.subspan(r * width, width),
              std::span<float>(out.data() + r * width, width));
  }
  return out;
}

// Signed permutation as an [A, A] matrix for in-graph application on the
// right of a row-major batch: out = mu * M with M[source[i], i] = sign[i].
Tensor action_matrix(const SignedPermutation& map) {
  const int64_t a = static_cast<int64_t>(map.size());
  std::vector<float> m(a * a, 0.0f);
  for (int64_t i = 0; i < a; ++i) m[map.source[i] * a + i] = map.sign[i];
  return Tensor::from({a, a}, std::move(m));
}

}  // namespace

ObservationSet mirror_obs(const SymmetrySpec& spec, const ObservationSet& obs) {
  ObservationSet out;
  for (const auto& [name, tensor] : obs.groups) {
    const auto& map = map_for(spec, name);
    out.groups.emplace(
        name, Tensor::from(tensor.shape(), mirror_table(map, tensor.data(), tensor.dim(1))));
  }
  return out;
}

void augment_batch(FlatBatch& batch, const SymmetrySpec& spec,
                   const GaussianActorCritic& policy_snapshot) {
  const int64_t n = batch.N;

  // mirrored observations, appended after the originals
  ObservationSet mirrored;
  for (auto& [name, flat] : batch.obs) {
    const int64_t w = batch.widths.at(name);
    auto mirror = mirror_table(map_for(spec, name), flat, w);
    mirrored.groups.emplace(name, Tensor::from({n, w}, std::vector<float>(mirror)));
    flat.insert(flat.end(), mirror.begin(), mirror.end());
  }

  auto mirrored_actions = mirror_table(spec.action_map, batch.actions, batch.A);
  Tensor mirrored_actions_t = Tensor::from({n, batch.A}, std::vector<float>(mirrored_actions));
  batch.actions.insert(batch.actions.end(), mirrored_actions.begin(), mirrored_actions.end());

  // old log-probs for mirrored samples are recomputed under the snapshot
  Tensor mu = policy_mean(policy_snapshot, mirrored);
  Tensor logp = gaussian_log_prob(mu, policy_snapshot.log_std, mirrored_actions_t);
  batch.old_log_prob.insert(batch.old_log_prob.end(), logp.data().begin(), logp.data().end());

  auto dup = [n](std::vector<float>& v) {
    v.reserve(2 * n);
    v.insert(v.end(), v.begin(), v.begin() + n);
  };
  dup(batch.old_value);
  dup(batch.advantages);
  dup(batch.returns);
  batch.N = 2 * n;
}

Tensor symmetry_loss(const GaussianActorCritic& policy, const ObservationSet& obs,
                     const SymmetrySpec& spec) {
  const std::string& group = policy.cfg.actor_group;
  const Tensor& x = obs.at(group);
  Tensor mirrored =
      Tensor::from(x.shape(), mirror_table(map_for(spec, group), x.data(), x.dim(1)));

  Tensor mu = policy.actor.forward(x);
  Tensor mu_mirrored = policy.actor.forward(mirrored);
  Tensor target = matmul(mu, action_matrix(spec.action_map));
  return mean(sum(square(sub(mu_mirrored, target)), {1}));
}

void SymmetryHooks::augment(FlatBatch& batch, const GaussianActorCritic& policy) {
  if (spec_->use_augmentation) augment_batch(batch, *spec_, policy);
}

Tensor SymmetryHooks::extra_loss(const GaussianActorCritic& policy, const ObservationSet& mb_obs,
                                 PpoStats& stats) {
  if (!spec_->use_loss) return Tensor();
  Tensor l_sym = symmetry_loss(policy, mb_obs, *spec_);
  stats.extra_loss = l_sym.item();
  return mul(Tensor::scalar(spec_->weight), l_sym);
}

void running_update(RunningMoments& moments, std::span<const float> batch, int64_t dims) {
  if (batch.empty()) return;
  const int64_t n = static_cast<int64_t>(batch.size()) / dims;
  if (n * dims != static_cast<int64_t>(batch.size())) {
    throw ShapeError("running_update: batch size not divisible by dims");
  }
  for (int64_t d = 0; d < dims; ++d) {
    // batch statistics for this dimension
    double bmean = 0.0;
    for (int64_t i = 0; i < n; ++i) bmean += batch[i * dims + d];
    bmean /= static_cast<double>(n);
    double bm2 = 0.0;
    for (int64_t i = 0; i < n; ++i) {
      const double diff = batch[i * dims + d] - bmean;
      bm2 += diff * diff;
    }
    // Chan et al. parallel merge
    const double delta = bmean - moments.mean[d];
    const double total = static_cast<double>(moments.count + n);
    moments.mean[d] += delta * static_cast<double>(n) / total;
    moments.m2[d] += bm2 + delta * delta * static_cast<double>(moments.count) *
                               static_cast<double>(n) / total;
  }
  moments.count += n;
}

void RndConfig::validate() const {
  if (reward_scale < 0.0f) throw ConfigError("rnd reward scale must be >= 0");
  if (embed_dim < 1) throw ConfigError("rnd embedding dim must be >= 1");
  if (predictor_lr <= 0.0f) throw ConfigError("rnd predictor lr must be > 0");
}

RndModule::RndModule(ParamStore& store, const ObsSchema& schema, const RndConfig& cfg,
                     uint64_t seed)
    : cfg_(cfg) {
  cfg_.validate();
  auto it = schema.find(cfg.group);
  if (it == schema.end()) {
    throw RoutingError("observation group \"" + cfg.group + "\" is missing");
  }
  const int dim = static_cast<int>(it->second);
  pair_ = make_rnd_pair(store, dim, cfg.embed_dim, cfg.hidden_sizes, seed);
  obs_moments_ = RunningMoments(dim);
}

Tensor RndModule::normalized(const Tensor& group_obs) const {
  if (!cfg_.normalize_obs) return group_obs;
  const int64_t w = group_obs.dim(1);
  std::vector<float> data(group_obs.data().begin(), group_obs.data().end());
  for (int64_t d = 0; d < w; ++d) {
    const double mean = obs_moments_.mean[d];
    const double denom = std::max(obs_moments_.stddev(d), 1e-6);
    for (int64_t r = 0; r < group_obs.dim(0); ++r) {
      double v = (data[r * w + d] - mean) / denom;
      data[r * w + d] = static_cast<float>(std::min(std::max(v, -5.0), 5.0));
    }
  }
  return Tensor::from(group_obs.shape(), std::move(data));
}

std::vector<float> RndModule::raw_errors(const Tensor& group_obs) const {
  const int64_t n = group_obs.dim(0);
  if (n == 0) return {};
  auto [target, pred] = rnd_embed(pair_, normalized(group_obs));
  std::vector<float> errors(n, 0.0f);
  const int64_t k = pair_.embed_dim;
  for (int64_t i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int64_t j = 0; j < k; ++j) {
      const double d = target.data()[i * k + j] - pred.data()[i * k + j];
      acc += d * d;
    }
    errors[i] = static_cast<float>(acc);
  }
  return errors;
}

std::vector<float> RndModule::intrinsic_reward(const Tensor& group_obs) const {
  auto errors = raw_errors(group_obs);
  double denom = 1.0;
  if (cfg_.normalize_reward) denom = std::max(reward_moments_.stddev(0), 1e-8);
  for (auto& e : errors) e = static_cast<float>(cfg_.reward_scale * e / denom);
  return errors;
}

void RndModule::observe(const Tensor& group_obs) {
  running_update(obs_moments_, group_obs.data(), group_obs.dim(1));
}

void RndModule::update_reward_moments(std::span<const float> raw) {
  running_update(reward_moments_, raw, 1);
}

float RndModule::update_predictor(const Tensor& group_obs, ParamStore& store, Adam& opt,
                                  GradientReducer* reducer) {
  if (group_obs.dim(0) == 0) return 0.0f;
  store.zero_grad();
  float loss_value = 0.0f;
  {
    Tape tape;
    auto [target, pred] = rnd_embed(pair_, normalized(group_obs));
    Tensor loss = mean(square(sub(pred, target)));
    loss_value = loss.item();
    tape.backward(loss);
  }
  if (reducer != nullptr) {
    std::vector<float> grads = store.flat_grads();
    reducer->allreduce_mean(grads);
    store.set_flat_grads(grads);
  }
  opt.step();
  return loss_value;
}

}  // namespace rlcore
