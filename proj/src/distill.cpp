#include "rlcore/distill.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "rlcore/rng.hpp"

namespace rlcore {

LqrExpert::LqrExpert(std::array<double, 2> gain, float action_lo, float action_hi,
                     std::string group)
    : gain_(gain), lo_(action_lo), hi_(action_hi), group_(std::move(group)) {}

Tensor LqrExpert::act(const ObservationSet& obs, std::span<const float>) {
  const std::string& group = obs.has(group_) ? group_ : "policy";
  const Tensor& x = obs.at(group);
  if (x.dim(1) != 2) throw RoutingError("lqr expert expects a 2-d state group");
  const int64_t n = x.dim(0);
  std::vector<float> u(n);
  for (int64_t i = 0; i < n; ++i) {
    const double raw = -(gain_[0] * x.data()[i * 2] + gain_[1] * x.data()[i * 2 + 1]);
    u[i] = static_cast<float>(std::min(std::max(raw, double(lo_)), double(hi_)));
  }
  return Tensor::from({n, 1}, std::move(u));
}

PolicyExpert::PolicyExpert(std::unique_ptr<ParamStore> store, GaussianActorCritic net)
    : store_(std::move(store)), net_(std::move(net)) {}

Tensor PolicyExpert::act(const ObservationSet& obs, std::span<const float> reset_mask) {
  if (net_.recurrent()) {
    const int64_t B = obs.batch_size();
    if (!hidden_.defined() || hidden_.dim(0) != B) {
      hidden_ = Tensor::zeros({B, net_.cfg.hidden_dim});
    }
    auto h = hidden_.mutable_data();
    for (int64_t b = 0; b < B; ++b) {
      if (b < static_cast<int64_t>(reset_mask.size()) && reset_mask[b] > 0.5f) {
        std::fill_n(h.begin() + b * net_.cfg.hidden_dim, net_.cfg.hidden_dim, 0.0f);
      }
    }
    Tensor next;
    Tensor mu = policy_mean(net_, obs, &hidden_, &next);
    hidden_ = next;
    return mu;
  }
  return policy_mean(net_, obs);
}

void DistillConfig::validate() const {
  if (iterations < 0) throw ConfigError("distill iterations must be >= 0");
  if (rollout_horizon < 1) throw ConfigError("distill rollout horizon must be >= 1");
  if (learning_rate <= 0.0f) throw ConfigError("distill learning rate must be > 0");
  if (epochs_per_iteration < 1 || minibatches < 1) {
    throw ConfigError("distill epochs and minibatches must be >= 1");
  }
  for (float b : {beta_start, beta_end}) {
    if (b < 0.0f || b > 1.0f) throw ConfigError("beta must be in [0, 1]");
  }
}

float DistillConfig::beta_at(int iteration) const {
  if (iterations <= 1) return beta_start;
  const float f = static_cast<float>(iteration) / static_cast<float>(iterations - 1);
  return beta_start + (beta_end - beta_start) * f;
}

DistillDataset collect_and_relabel(RolloutCollector& collector,
                                   const GaussianActorCritic& student, Expert& expert,
                                   int horizon, float beta) {
  VecEnv& env = collector.env();
  const int B = env.spec().num_envs;
  const int A = env.spec().action_dim;

  DistillDataset ds;
  ds.T = horizon;
  ds.B = B;
  ds.A = A;

  Tensor& hidden = collector.hidden();
  if (student.recurrent()) {
    if (!hidden.defined()) hidden = Tensor::zeros({B, student.cfg.hidden_dim});
    ds.h_start = hidden.detach();
  }

  for (int t = 0; t < horizon; ++t) {
    auto& prev_done = collector.prev_done();
    ds.reset_mask.push_back(prev_done);
    if (student.recurrent()) {
      auto h = hidden.mutable_data();
      for (int b = 0; b < B; ++b) {
        if (prev_done[b] > 0.5f) {
          std::fill_n(h.begin() + static_cast<size_t>(b) * student.cfg.hidden_dim,
                      student.cfg.hidden_dim, 0.0f);
        }
      }
    }

    ObservationSet cur_obs = collector.current_obs();
    Tensor expert_action = expert.act(cur_obs, prev_done);
    Tensor noise = collector.sample_noise(collector.step_counter(), A);
    auto act = policy_act(student, cur_obs, ActMode::kSample, &noise,
                          student.recurrent() ? &hidden : nullptr);

    // expert's action with probability beta, else the student's sample
    Tensor executed = act.action;
    if (beta > 0.0f) {
      std::vector<float> mixed(executed.data().begin(), executed.data().end());
      for (int b = 0; b < B; ++b) {
        RngStream coin(collector.seed(), StreamTag::kDistillMix,
                       {static_cast<uint64_t>(collector.env_offset() + b),
                        static_cast<uint64_t>(collector.step_counter())});
        if (coin.uniform() < beta) {
          std::copy_n(expert_action.data().begin() + static_cast<size_t>(b) * A, A,
                      mixed.begin() + static_cast<size_t>(b) * A);
        }
      }
      executed = Tensor::from({B, A}, std::move(mixed));
    }

    collector.step_env(executed);
    ds.obs.push_back(std::move(cur_obs));
    ds.expert_actions.push_back(expert_action);
    if (student.recurrent()) hidden = act.next_hidden;
  }
  return ds;
}

namespace {

Tensor distill_loss_on(const GaussianActorCritic& student, const ObservationSet& obs,
                       const Tensor& targets, DistillLoss kind) {
  Tensor mu = policy_mean(student, obs);
  if (kind == DistillLoss::kMseOnMean) {
    return mean(sum(square(sub(mu, targets)), {1}));
  }
  return neg(mean(gaussian_log_prob(mu, student.log_std, targets)));
}

Tensor distill_loss_seq(const GaussianActorCritic& student,
                        const std::vector<ObservationSet>& obs_seq, const Tensor& h0,
                        const std::vector<Tensor>& masks, const Tensor& targets,
                        DistillLoss kind) {
  Tensor mu = policy_mean_sequence(student, obs_seq, h0, masks);
  if (kind == DistillLoss::kMseOnMean) {
    return mean(sum(square(sub(mu, targets)), {1}));
  }
  return neg(mean(gaussian_log_prob(mu, student.log_std, targets)));
}

void shuffle_indices(std::vector<int64_t>& idx, RngStream& rng) {
  for (size_t i = idx.size(); i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
}

}  // namespace

DistillStats distill_update(const DistillDataset& ds, GaussianActorCritic& student,
                            ParamStore& store, Adam& opt, const DistillConfig& cfg, uint64_t seed,
                            uint64_t update_ordinal, int rank, GradientReducer* reducer) {
  cfg.validate();
  DistillStats stats;
  int steps = 0;

  auto optimizer_step = [&](const Tensor& loss) {
    if (!std::isfinite(loss.item())) throw TrainFault("NaN/Inf distillation loss");
    if (reducer != nullptr) {
      std::vector<float> grads = store.flat_grads();
      reducer->allreduce_mean(grads);
      store.set_flat_grads(grads);
    }
    clip_grad_norm(store, cfg.max_grad_norm);
    opt.step();
    stats.loss += loss.item();
    ++steps;
  };

  if (!student.recurrent()) {
    // flatten t-major
    const int64_t n = static_cast<int64_t>(ds.T) * ds.B;
    std::map<std::string, std::vector<float>> obs_flat;
    std::map<std::string, int64_t> widths;
    for (const auto& [name, tensor] : ds.obs[0].groups) widths[name] = tensor.dim(1);
    std::vector<float> targets;
    for (int t = 0; t < ds.T; ++t) {
      for (const auto& [name, tensor] : ds.obs[t].groups) {
        auto& dst = obs_flat[name];
        dst.insert(dst.end(), tensor.data().begin(), tensor.data().end());
      }
      targets.insert(targets.end(), ds.expert_actions[t].data().begin(),
                     ds.expert_actions[t].data().end());
    }

    std::vector<int64_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs_per_iteration; ++epoch) {
      if (cfg.minibatches > 1) {
        RngStream rng(seed, StreamTag::kShuffle,
                      {update_ordinal, static_cast<uint64_t>(epoch), static_cast<uint64_t>(rank)});
        shuffle_indices(order, rng);
      }
      for (int m = 0; m < cfg.minibatches; ++m) {
        const int64_t lo = m * n / cfg.minibatches;
        const int64_t hi = (m + 1) * n / cfg.minibatches;
        if (hi <= lo) continue;
        std::vector<int64_t> idx(order.begin() + lo, order.begin() + hi);
        const int64_t sz = static_cast<int64_t>(idx.size());

        ObservationSet mb_obs;
        for (const auto& [name, flat] : obs_flat) {
          const int64_t w = widths[name];
          std::vector<float> rows(sz * w);
          for (int64_t i = 0; i < sz; ++i) {
            std::copy_n(flat.begin() + idx[i] * w, w, rows.begin() + i * w);
          }
          mb_obs.groups.emplace(name, Tensor::from({sz, w}, std::move(rows)));
        }
        std::vector<float> mb_targets(sz * ds.A);
        for (int64_t i = 0; i < sz; ++i) {
          std::copy_n(targets.begin() + idx[i] * ds.A, ds.A, mb_targets.begin() + i * ds.A);
        }

        store.zero_grad();
        Tape tape;
        Tensor loss = distill_loss_on(student, mb_obs,
                                      Tensor::from({sz, ds.A}, std::move(mb_targets)),
                                      cfg.loss_kind);
        tape.backward(loss);
        optimizer_step(loss);
      }
    }
  } else {
    std::vector<int64_t> envs(ds.B);
    std::iota(envs.begin(), envs.end(), 0);
    for (int epoch = 0; epoch < cfg.epochs_per_iteration; ++epoch) {
      if (cfg.minibatches > 1) {
        RngStream rng(seed, StreamTag::kShuffle,
                      {update_ordinal, static_cast<uint64_t>(epoch), static_cast<uint64_t>(rank)});
        shuffle_indices(envs, rng);
      }
      for (int m = 0; m < cfg.minibatches; ++m) {
        const int64_t lo = m * static_cast<int64_t>(ds.B) / cfg.minibatches;
        const int64_t hi = (m + 1) * static_cast<int64_t>(ds.B) / cfg.minibatches;
        if (hi <= lo) continue;
        std::vector<int> env_idx;
        for (int64_t i = lo; i < hi; ++i) env_idx.push_back(static_cast<int>(envs[i]));
        const int64_t e = static_cast<int64_t>(env_idx.size());

        std::vector<ObservationSet> obs_seq;
        std::vector<Tensor> masks, target_seq;
        for (int t = 0; t < ds.T; ++t) {
          ObservationSet o;
          for (const auto& [name, tensor] : ds.obs[t].groups) {
            o.groups.emplace(name, gather_rows(tensor, env_idx));
          }
          obs_seq.push_back(std::move(o));
          target_seq.push_back(gather_rows(ds.expert_actions[t], env_idx));
          std::vector<float> mask(e);
          for (int64_t i = 0; i < e; ++i) mask[i] = ds.reset_mask[t][env_idx[i]];
          masks.push_back(Tensor::from({e, 1}, std::move(mask)));
        }

        store.zero_grad();
        Tape tape;
        Tensor loss = distill_loss_seq(student, obs_seq, gather_rows(ds.h_start, env_idx), masks,
                                       concat_rows(target_seq), cfg.loss_kind);
        tape.backward(loss);
        optimizer_step(loss);
      }
    }
  }

  if (steps > 0) stats.loss /= steps;
  return stats;
}

void run_distillation(RolloutCollector& collector, GaussianActorCritic& student,
                      ParamStore& store, Adam& opt, Expert& expert, const DistillConfig& cfg,
                      uint64_t seed,
                      const std::function<void(int, const DistillStats&)>& on_iteration,
                      GradientReducer* reducer) {
  cfg.validate();
  for (int it = 0; it < cfg.iterations; ++it) {
    auto ds = collect_and_relabel(collector, student, expert, cfg.rollout_horizon,
                                  cfg.beta_at(it));
    auto stats = distill_update(ds, student, store, opt, cfg, seed,
                                static_cast<uint64_t>(it), 0, reducer);
    if (on_iteration) on_iteration(it, stats);
  }
}

}  // namespace rlcore
