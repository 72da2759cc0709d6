#include "rlcore/ppo.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "rlcore/rng.hpp"

namespace rlcore {

namespace {

constexpr uint64_t kEnvSeedTag = 0xE45EEDull;

std::vector<float> tensor_vec(const Tensor& t) {
  return std::vector<float>(t.data().begin(), t.data().end());
}

// Gather rows of a flat [N x w] array at the given sample indices.
std::vector<float> gather_flat(const std::vector<float>& flat, int64_t width,
                               const std::vector<int64_t>& idx) {
  std::vector<float> out(idx.size() * width);
  for (size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(flat.begin() + idx[i] * width, width, out.begin() + i * width);
  }
  return out;
}

void shuffle_indices(std::vector<int64_t>& idx, RngStream& rng) {
  for (size_t i = idx.size(); i > 1; --i) {
    std::swap(idx[i - 1], idx[rng.below(i)]);
  }
}

}  // namespace

void PpoConfig::validate() const {
  if (!(gamma > 0.0f && gamma <= 1.0f)) throw ConfigError("gamma must be in (0, 1]");
  if (!(lam >= 0.0f && lam <= 1.0f)) throw ConfigError("lambda must be in [0, 1]");
  if (!(clip_eps > 0.0f)) throw ConfigError("clip epsilon must be > 0");
  if (epochs * num_minibatches < 1) throw ConfigError("epochs*minibatches must be >= 1");
  if (rollout_horizon < 1) throw ConfigError("rollout horizon must be >= 1");
  if (learning_rate <= 0.0f) throw ConfigError("learning rate must be > 0");
}

RolloutCollector::RolloutCollector(VecEnv& env, uint64_t seed, int64_t env_index_offset)
    : env_(&env), seed_(seed), offset_(env_index_offset) {
  obs_ = env_->reset_all(mix64(seed, kEnvSeedTag));
  const int B = env_->spec().num_envs;
  prev_done_.assign(B, 0.0f);
  ep_return_.assign(B, 0.0);
  ep_length_.assign(B, 0);
}

Tensor RolloutCollector::sample_noise(int64_t step, int dims) const {
  const int B = env_->spec().num_envs;
  std::vector<float> data(static_cast<size_t>(B) * dims);
  for (int b = 0; b < B; ++b) {
    RngStream rng(seed_, StreamTag::kActionNoise,
                  {static_cast<uint64_t>(offset_ + b), static_cast<uint64_t>(step)});
    for (int d = 0; d < dims; ++d) {
      data[static_cast<size_t>(b) * dims + d] = static_cast<float>(rng.normal());
    }
  }
  return Tensor::from({B, dims}, std::move(data));
}

StepResult RolloutCollector::step_env(const Tensor& actions) {
  auto sr = env_->step(actions);
  const int B = env_->spec().num_envs;
  const auto reward = sr.reward.data();
  for (int b = 0; b < B; ++b) {
    ep_return_[b] += reward[b];
    ep_length_[b] += 1;
    const bool done = sr.terminated[b] || sr.timeout[b];
    if (done) {
      stats_.returns.push_back(ep_return_[b]);
      stats_.lengths.push_back(static_cast<double>(ep_length_[b]));
      stats_.successes.push_back(sr.terminated[b] && reward[b] > 0.5f ? 1 : 0);
      ep_return_[b] = 0.0;
      ep_length_[b] = 0;
    }
    prev_done_[b] = done ? 1.0f : 0.0f;
  }
  obs_ = sr.obs;
  ++step_counter_;
  return sr;
}

RolloutBuffer RolloutCollector::collect(const GaussianActorCritic& policy, int horizon,
                                        const PpoConfig& cfg) {
  const int B = env_->spec().num_envs;
  const int A = env_->spec().action_dim;
  RolloutBuffer buf;
  buf.T = horizon;
  buf.B = B;
  buf.A = A;

  if (policy.recurrent()) {
    if (!hidden_.defined()) hidden_ = Tensor::zeros({B, policy.cfg.hidden_dim});
    buf.h_start = hidden_.detach();
  }

  for (int t = 0; t < horizon; ++t) {
    buf.reset_mask.push_back(prev_done_);
    if (policy.recurrent()) {
      auto h = hidden_.mutable_data();
      for (int b = 0; b < B; ++b) {
        if (prev_done_[b] > 0.5f) {
          std::fill_n(h.begin() + static_cast<size_t>(b) * policy.cfg.hidden_dim,
                      policy.cfg.hidden_dim, 0.0f);
        }
      }
    }

    ObservationSet cur_obs = obs_;
    Tensor noise = sample_noise(step_counter_, A);
    auto act = policy_act(policy, cur_obs, ActMode::kSample, &noise,
                          policy.recurrent() ? &hidden_ : nullptr);
    auto sr = step_env(act.action);

    buf.obs.push_back(std::move(cur_obs));
    buf.actions.push_back(act.action);
    buf.values.push_back(tensor_vec(act.value));
    buf.log_probs.push_back(tensor_vec(act.log_prob));
    buf.rewards.push_back(tensor_vec(sr.reward));
    buf.terminated.push_back(sr.terminated);
    buf.timeout.push_back(sr.timeout);

    if (cfg.bootstrap_timeouts) {
      // rows of terminal_obs belonging to timed-out (not terminated) envs
      std::vector<int> rows;
      std::vector<int> envs;
      for (size_t i = 0; i < sr.finished.size(); ++i) {
        const int b = sr.finished[i];
        if (sr.timeout[b]) {
          rows.push_back(static_cast<int>(i));
          envs.push_back(b);
        }
      }
      if (!rows.empty()) {
        ObservationSet term;
        for (const auto& [name, tensor] : sr.terminal_obs.groups) {
          term.groups.emplace(name, gather_rows(tensor, rows));
        }
        Tensor value;
        if (policy.recurrent()) {
          Tensor h_rows = gather_rows(act.next_hidden, envs);
          value = policy_value(policy, term, &h_rows);
        } else {
          value = policy_value(policy, term);
        }
        for (size_t i = 0; i < envs.size(); ++i) {
          buf.rewards[t][envs[i]] += cfg.gamma * value.data()[i];
        }
      }
    }

    if (policy.recurrent()) hidden_ = act.next_hidden;
  }

  // bootstrap V_T from the post-rollout observations, zeroed where the final
  // step terminated
  Tensor v_last;
  if (policy.recurrent()) {
    Tensor h_boot = hidden_.detach();
    auto h = h_boot.mutable_data();
    for (int b = 0; b < B; ++b) {
      if (prev_done_[b] > 0.5f) {
        std::fill_n(h.begin() + static_cast<size_t>(b) * policy.cfg.hidden_dim,
                    policy.cfg.hidden_dim, 0.0f);
      }
    }
    v_last = policy_value(policy, obs_, &h_boot);
  } else {
    v_last = policy_value(policy, obs_);
  }
  buf.bootstrap_value = tensor_vec(v_last);
  for (int b = 0; b < B; ++b) {
    if (buf.terminated[horizon - 1][b]) buf.bootstrap_value[b] = 0.0f;
  }
  return buf;
}

void compute_gae(RolloutBuffer& buf, float gamma, float lam) {
  if (buf.T == 0 || static_cast<int>(buf.rewards.size()) != buf.T) {
    throw StateError("compute_gae on an incomplete rollout");
  }
  buf.advantages.assign(buf.T, std::vector<float>(buf.B, 0.0f));
  buf.returns.assign(buf.T, std::vector<float>(buf.B, 0.0f));
  for (int b = 0; b < buf.B; ++b) {
    double adv = 0.0;
    for (int t = buf.T - 1; t >= 0; --t) {
      const bool done = buf.terminated[t][b] || buf.timeout[t][b];
      const double not_done = done ? 0.0 : 1.0;
      const double v_next = t + 1 < buf.T ? buf.values[t + 1][b] : buf.bootstrap_value[b];
      const double delta = buf.rewards[t][b] + gamma * v_next * not_done - buf.values[t][b];
      adv = delta + gamma * lam * not_done * adv;
      buf.advantages[t][b] = static_cast<float>(adv);
      buf.returns[t][b] = static_cast<float>(adv + buf.values[t][b]);
    }
  }
  buf.gae_done = true;
}

std::pair<Tensor, PpoStats> ppo_loss(const GaussianActorCritic& policy, const Minibatch& mb,
                                     const PpoConfig& cfg) {
  EvalResult ev = mb.recurrent
                      ? policy_evaluate_sequence(policy, mb.obs_seq, mb.action_seq, mb.h0,
                                                 mb.reset_masks)
                      : policy_evaluate(policy, mb.obs, mb.actions);

  Tensor ratio = exp(sub(ev.log_prob, mb.old_log_prob));
  Tensor surr1 = mul(ratio, mb.advantages);
  Tensor surr2 = mul(clamp(ratio, 1.0f - cfg.clip_eps, 1.0f + cfg.clip_eps), mb.advantages);
  Tensor l_surr = neg(mean(minimum(surr1, surr2)));

  Tensor l_value;
  if (cfg.clip_value_loss) {
    Tensor v_clipped =
        add(mb.old_value, clamp(sub(ev.value, mb.old_value), -cfg.clip_eps, cfg.clip_eps));
    l_value = mean(maximum(square(sub(ev.value, mb.returns)), square(sub(v_clipped, mb.returns))));
  } else {
    l_value = mean(square(sub(ev.value, mb.returns)));
  }
  Tensor entropy = mean(ev.entropy);
  Tensor loss = sub(add(l_surr, mul(Tensor::scalar(cfg.value_coef), l_value)),
                    mul(Tensor::scalar(cfg.entropy_coef), entropy));

  PpoStats stats;
  stats.surrogate_loss = l_surr.item();
  stats.value_loss = l_value.item();
  stats.entropy = entropy.item();
  const int64_t n = ratio.numel();
  double kl = 0.0;
  int64_t clipped = 0;
  for (int64_t i = 0; i < n; ++i) {
    const double r = ratio.data()[i];
    kl += mb.old_log_prob.data()[i] - ev.log_prob.data()[i] + r - 1.0;
    if (std::abs(r - 1.0) > cfg.clip_eps) ++clipped;
  }
  stats.approx_kl = kl / static_cast<double>(n);
  stats.clip_fraction = static_cast<double>(clipped) / static_cast<double>(n);

  if (!std::isfinite(loss.item())) {
    std::ostringstream os;
    os << "NaN/Inf PPO loss (surrogate=" << stats.surrogate_loss << ", value=" << stats.value_loss
       << ", entropy=" << stats.entropy << ", approx_kl=" << stats.approx_kl << ")";
    throw TrainFault(os.str());
  }
  return {loss, stats};
}

float adapt_lr(float mean_kl, float lr, const PpoConfig& cfg) {
  if (lr <= 0.0f) throw ArgumentError("adapt_lr requires lr > 0");
  float next = lr;
  if (mean_kl > 2.0f * cfg.kl_target) {
    next = lr / 1.5f;
  } else if (mean_kl < cfg.kl_target / 2.0f) {
    next = lr * 1.5f;
  }
  return std::min(std::max(next, 1e-5f), 1e-2f);
}

FlatBatch flatten_rollout(const RolloutBuffer& buf) {
  FlatBatch fb;
  fb.N = static_cast<int64_t>(buf.T) * buf.B;
  fb.A = buf.A;
  for (const auto& [name, tensor] : buf.obs[0].groups) fb.widths[name] = tensor.dim(1);
  for (const auto& [name, width] : fb.widths) fb.obs[name].reserve(fb.N * width);
  fb.actions.reserve(fb.N * buf.A);
  fb.old_log_prob.reserve(fb.N);
  fb.old_value.reserve(fb.N);
  fb.advantages.reserve(fb.N);
  fb.returns.reserve(fb.N);
  for (int t = 0; t < buf.T; ++t) {
    for (const auto& [name, tensor] : buf.obs[t].groups) {
      auto& dst = fb.obs[name];
      dst.insert(dst.end(), tensor.data().begin(), tensor.data().end());
    }
    const auto act = buf.actions[t].data();
    fb.actions.insert(fb.actions.end(), act.begin(), act.end());
    fb.old_log_prob.insert(fb.old_log_prob.end(), buf.log_probs[t].begin(),
                           buf.log_probs[t].end());
    fb.old_value.insert(fb.old_value.end(), buf.values[t].begin(), buf.values[t].end());
    fb.advantages.insert(fb.advantages.end(), buf.advantages[t].begin(), buf.advantages[t].end());
    fb.returns.insert(fb.returns.end(), buf.returns[t].begin(), buf.returns[t].end());
  }
  return fb;
}

namespace {

void normalize_in_place(std::vector<float>& a) {
  double mean = 0.0;
  for (float v : a) mean += v;
  mean /= static_cast<double>(a.size());
  double var = 0.0;
  for (float v : a) var += (v - mean) * (v - mean);
  var /= static_cast<double>(a.size());
  const double denom = std::sqrt(var) + 1e-8;
  for (auto& v : a) v = static_cast<float>((v - mean) / denom);
}

struct MinibatchStep {
  PpoStats stats;
  float post_clip_norm = 0.0f;
};

MinibatchStep run_minibatch(const Minibatch& mb, GaussianActorCritic& policy, ParamStore& store,
                            Adam& opt, const PpoConfig& cfg, UpdateHooks* hooks,
                            GradientReducer* reducer) {
  store.zero_grad();
  MinibatchStep out;
  {
    Tape tape;
    auto [loss, stats] = ppo_loss(policy, mb, cfg);
    if (hooks != nullptr && !mb.recurrent) {
      Tensor extra = hooks->extra_loss(policy, mb.obs, stats);
      if (extra.defined()) {
        loss = add(loss, extra);
        if (!std::isfinite(loss.item())) throw TrainFault("NaN/Inf loss after extension terms");
      }
    }
    out.stats = stats;
    tape.backward(loss);
  }
  if (reducer != nullptr) {
    std::vector<float> grads = store.flat_grads();
    reducer->allreduce_mean(grads);
    store.set_flat_grads(grads);
  }
  const float norm = clip_grad_norm(store, cfg.max_grad_norm);
  out.post_clip_norm = std::min(norm, cfg.max_grad_norm);
  opt.step();
  return out;
}

void accumulate(PpoStats& into, const PpoStats& s) {
  into.surrogate_loss += s.surrogate_loss;
  into.value_loss += s.value_loss;
  into.entropy += s.entropy;
  into.approx_kl += s.approx_kl;
  into.clip_fraction += s.clip_fraction;
  into.extra_loss += s.extra_loss;
}

}  // namespace

UpdateResult ppo_update(const RolloutBuffer& buffer, GaussianActorCritic& policy,
                        ParamStore& store, Adam& opt, const PpoConfig& cfg, uint64_t seed,
                        uint64_t update_ordinal, int rank, UpdateHooks* hooks,
                        GradientReducer* reducer) {
  cfg.validate();
  if (!buffer.gae_done) throw StateError("ppo_update requires compute_gae first");

  UpdateResult result;
  PpoStats total;
  int steps = 0;

  if (!policy.recurrent()) {
    FlatBatch fb = flatten_rollout(buffer);
    if (hooks != nullptr) hooks->augment(fb, policy);
    if (cfg.normalize_advantages) normalize_in_place(fb.advantages);
    const int64_t n = fb.N;

    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      if (cfg.num_minibatches > 1) {
        RngStream rng(seed, StreamTag::kShuffle,
                      {update_ordinal, static_cast<uint64_t>(epoch), static_cast<uint64_t>(rank)});
        shuffle_indices(order, rng);
      }
      double epoch_kl = 0.0;
      int epoch_steps = 0;
      for (int m = 0; m < cfg.num_minibatches; ++m) {
        const int64_t lo = m * n / cfg.num_minibatches;
        const int64_t hi = (m + 1) * n / cfg.num_minibatches;
        if (hi <= lo) continue;
        std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
        const int64_t sz = static_cast<int64_t>(idx.size());

        Minibatch mb;
        for (const auto& [name, flat] : fb.obs) {
          mb.obs.groups.emplace(
              name, Tensor::from({sz, fb.widths[name]}, gather_flat(flat, fb.widths[name], idx)));
        }
        mb.actions = Tensor::from({sz, fb.A}, gather_flat(fb.actions, fb.A, idx));
        mb.old_log_prob = Tensor::from({sz}, gather_flat(fb.old_log_prob, 1, idx));
        mb.old_value = Tensor::from({sz}, gather_flat(fb.old_value, 1, idx));
        mb.advantages = Tensor::from({sz}, gather_flat(fb.advantages, 1, idx));
        mb.returns = Tensor::from({sz}, gather_flat(fb.returns, 1, idx));

        auto step = run_minibatch(mb, policy, store, opt, cfg, hooks, reducer);
        accumulate(total, step.stats);
        result.max_grad_norm_seen = std::max(result.max_grad_norm_seen, step.post_clip_norm);
        epoch_kl += step.stats.approx_kl;
        ++epoch_steps;
        ++steps;
      }
      if (epoch_steps > 0 && opt.lr() > 0.0f) {
        opt.set_lr(adapt_lr(static_cast<float>(epoch_kl / epoch_steps), opt.lr(), cfg));
      }
    }
  } else {
    // minibatch over env indices only; time stays intact for BPTT
    std::vector<std::vector<float>> adv = buffer.advantages;
    if (cfg.normalize_advantages) {
      std::vector<float> flat;
      flat.reserve(static_cast<size_t>(buffer.T) * buffer.B);
      for (const auto& row : adv) flat.insert(flat.end(), row.begin(), row.end());
      normalize_in_place(flat);
      for (int t = 0; t < buffer.T; ++t) {
        std::copy_n(flat.begin() + static_cast<int64_t>(t) * buffer.B, buffer.B, adv[t].begin());
      }
    }

    std::vector<int64_t> envs(buffer.B);
    std::iota(envs.begin(), envs.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      if (cfg.num_minibatches > 1) {
        RngStream rng(seed, StreamTag::kShuffle,
                      {update_ordinal, static_cast<uint64_t>(epoch), static_cast<uint64_t>(rank)});
        shuffle_indices(envs, rng);
      }
      double epoch_kl = 0.0;
      int epoch_steps = 0;
      for (int m = 0; m < cfg.num_minibatches; ++m) {
        const int64_t lo = m * static_cast<int64_t>(buffer.B) / cfg.num_minibatches;
        const int64_t hi = (m + 1) * static_cast<int64_t>(buffer.B) / cfg.num_minibatches;
        if (hi <= lo) continue;
        std::vector<int> env_idx;
        for (int64_t i = lo; i < hi; ++i) env_idx.push_back(static_cast<int>(envs[i]));
        const int64_t e = static_cast<int64_t>(env_idx.size());

        Minibatch mb;
        mb.recurrent = true;
        mb.h0 = gather_rows(buffer.h_start, env_idx);
        std::vector<float> old_logp, old_v, advs, rets;
        for (int t = 0; t < buffer.T; ++t) {
          ObservationSet o;
          for (const auto& [name, tensor] : buffer.obs[t].groups) {
            o.groups.emplace(name, gather_rows(tensor, env_idx));
          }
          mb.obs_seq.push_back(std::move(o));
          mb.action_seq.push_back(gather_rows(buffer.actions[t], env_idx));
          std::vector<float> mask(e);
          for (int64_t i = 0; i < e; ++i) mask[i] = buffer.reset_mask[t][env_idx[i]];
          mb.reset_masks.push_back(Tensor::from({e, 1}, std::move(mask)));
          for (int64_t i = 0; i < e; ++i) {
            old_logp.push_back(buffer.log_probs[t][env_idx[i]]);
            old_v.push_back(buffer.values[t][env_idx[i]]);
            advs.push_back(adv[t][env_idx[i]]);
            rets.push_back(buffer.returns[t][env_idx[i]]);
          }
        }
        const int64_t nsamp = static_cast<int64_t>(old_logp.size());
        mb.old_log_prob = Tensor::from({nsamp}, std::move(old_logp));
        mb.old_value = Tensor::from({nsamp}, std::move(old_v));
        mb.advantages = Tensor::from({nsamp}, std::move(advs));
        mb.returns = Tensor::from({nsamp}, std::move(rets));

        auto step = run_minibatch(mb, policy, store, opt, cfg, hooks, reducer);
        accumulate(total, step.stats);
        result.max_grad_norm_seen = std::max(result.max_grad_norm_seen, step.post_clip_norm);
        epoch_kl += step.stats.approx_kl;
        ++epoch_steps;
        ++steps;
      }
      if (epoch_steps > 0 && opt.lr() > 0.0f) {
        opt.set_lr(adapt_lr(static_cast<float>(epoch_kl / epoch_steps), opt.lr(), cfg));
      }
    }
  }

  if (steps > 0) {
    total.surrogate_loss /= steps;
    total.value_loss /= steps;
    total.entropy /= steps;
    total.approx_kl /= steps;
    total.clip_fraction /= steps;
    total.extra_loss /= steps;
  }
  result.stats = total;
  result.lr = opt.lr();
  return result;
}

}  // namespace rlcore
