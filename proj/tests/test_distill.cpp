#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rlcore/distill.hpp"
#include "rlcore/env.hpp"
#include "rlcore/rng.hpp"

using namespace rlcore;

namespace {

struct Student {
  ParamStore store;
  GaussianActorCritic net;
  Student(const ObsSchema& schema, uint64_t seed, bool recurrent = false)
      : net(make_actor_critic(
            store, schema,
            ActorCriticConfig{.action_dim = 1, .recurrent = recurrent, .hidden_dim = 16},
            seed)) {}
};

std::unique_ptr<LqrExpert> make_lqr_expert() {
  auto sol = lqr_oracle(0.05, 1.0, 0.1, 0.01, 1.0, 1);
  return std::make_unique<LqrExpert>(sol.gain, -10.0f, 10.0f);
}

}  // namespace

TEST_CASE("collect_and_relabel basics") {
  auto env = make_env("point_mass", 8);
  Student student(env->spec().schema, 1);
  auto expert = make_lqr_expert();
  RolloutCollector collector(*env, 3);

  auto ds = collect_and_relabel(collector, student.net, *expert, 6, 0.0f);
  CHECK(ds.T == 6);
  CHECK(ds.B == 8);
  CHECK(static_cast<int>(ds.obs.size()) == 6);

  SUBCASE("dataset size is T*B pairs") {
    int64_t pairs = 0;
    for (const auto& a : ds.expert_actions) pairs += a.dim(0);
    CHECK(pairs == 48);
  }

  SUBCASE("targets are a pure function of the stored observations") {
    for (int t = 0; t < ds.T; ++t) {
      auto again = expert->act(ds.obs[t], {});
      CHECK(std::equal(again.data().begin(), again.data().end(),
                       ds.expert_actions[t].data().begin()));
    }
  }
}

TEST_CASE("beta=1 follows the expert's state distribution") {
  EnvOverrides o;
  o.randomize_initial_step = false;
  auto env_student = make_env("point_mass", 8, o);
  auto env_expert = make_env("point_mass", 8, o);
  auto expert = make_lqr_expert();

  // a deliberately bad student: strong positive drift
  Student bad(env_student->spec().schema, 2);
  for (auto& w : bad.net.actor.weights) {
    for (auto& v : const_cast<Tensor&>(w).mutable_data()) v = 0.0f;
  }
  const_cast<Tensor&>(bad.net.actor.biases.back()).mutable_data()[0] = 9.0f;
  for (auto& v : bad.net.log_std.mutable_data()) v = -4.0f;  // nearly deterministic

  RolloutCollector cs(*env_student, 5);
  RolloutCollector ce(*env_expert, 5);
  auto ds_student = collect_and_relabel(cs, bad.net, *expert, 120, 0.0f);
  auto ds_expert = collect_and_relabel(ce, bad.net, *expert, 120, 1.0f);

  auto max_abs_p = [](const DistillDataset& ds) {
    double m = 0.0;
    for (const auto& o : ds.obs) {
      const auto x = o.at("policy").data();
      for (int64_t i = 0; i < o.at("policy").dim(0); ++i) {
        m = std::max(m, std::abs(double(x[i * 2])));
      }
    }
    return m;
  };
  // the bad student drifts far from the origin; the expert never does
  CHECK(max_abs_p(ds_student) > 3.0);
  CHECK(max_abs_p(ds_expert) < 3.0);
}

TEST_CASE("distill_update loss values and lr=0 stability") {
  auto env = make_env("point_mass", 2);
  Student s(env->spec().schema, 4);
  // zero the actor so mu = 0 everywhere
  for (auto& w : s.net.actor.weights) {
    for (auto& v : const_cast<Tensor&>(w).mutable_data()) v = 0.0f;
  }
  for (auto& b : s.net.actor.biases) {
    for (auto& v : const_cast<Tensor&>(b).mutable_data()) v = 0.0f;
  }

  DistillDataset ds;
  ds.T = 1;
  ds.B = 1;
  ds.A = 1;
  ObservationSet o;
  o.groups.emplace("policy", Tensor::from({1, 2}, {0.3f, -0.2f}));
  o.groups.emplace("critic", Tensor::from({1, 2}, {0.3f, -0.2f}));
  ds.obs.push_back(o);
  ds.expert_actions.push_back(Tensor::from({1, 1}, {2.0f}));
  ds.reset_mask.push_back({0.0f});

  DistillConfig cfg;
  cfg.epochs_per_iteration = 1;
  cfg.minibatches = 1;
  Adam opt(s.store, 0.0f);
  auto before = s.store.flat_values();
  auto stats = distill_update(ds, s.net, s.store, opt, cfg, 1, 0);
  CHECK(stats.loss == doctest::Approx(4.0));  // (0 - 2)^2
  CHECK(s.store.flat_values() == before);
}

TEST_CASE("short LQR distillation drives the held-out action error down") {
  auto env = make_env("point_mass", 16);
  Student s(env->spec().schema, 5);
  auto expert = make_lqr_expert();
  RolloutCollector collector(*env, 6);

  DistillConfig cfg;
  cfg.iterations = 25;
  cfg.rollout_horizon = 24;
  Adam opt(s.store, cfg.learning_rate);

  // held-out expert states from an independent expert rollout
  EnvOverrides o;
  o.randomize_initial_step = false;
  auto held_env = make_env("point_mass", 32, o);
  RolloutCollector held_collector(*held_env, 991);
  Student throwaway(held_env->spec().schema, 99);
  auto held = collect_and_relabel(held_collector, throwaway.net, *expert, 40, 1.0f);

  auto held_out_mse = [&]() {
    double total = 0.0;
    int64_t count = 0;
    for (int t = 0; t < held.T; ++t) {
      Tensor mu = policy_mean(s.net, held.obs[t]);
      for (int64_t i = 0; i < mu.numel(); ++i) {
        const double d = mu.data()[i] - held.expert_actions[t].data()[i];
        total += d * d;
        ++count;
      }
    }
    return total / count;
  };

  std::vector<double> errors;
  errors.push_back(held_out_mse());
  for (int it = 0; it < cfg.iterations; ++it) {
    auto ds = collect_and_relabel(collector, s.net, *expert, cfg.rollout_horizon, 0.0f);
    distill_update(ds, s.net, s.store, opt, cfg, 17, static_cast<uint64_t>(it));
    errors.push_back(held_out_mse());
  }

  // smoothed over windows, the error decreases; the tail is small
  double head = 0.0, tail = 0.0;
  for (int i = 0; i < 5; ++i) head += errors[i];
  for (int i = 0; i < 5; ++i) tail += errors[errors.size() - 1 - i];
  CHECK(tail < head);
  CHECK(errors.back() < 0.05);
}

TEST_CASE("run_distillation with zero iterations leaves the student untouched") {
  auto env = make_env("point_mass", 4);
  Student s(env->spec().schema, 6);
  auto expert = make_lqr_expert();
  RolloutCollector collector(*env, 8);
  DistillConfig cfg;
  cfg.iterations = 0;
  Adam opt(s.store, cfg.learning_rate);
  auto before = s.store.flat_values();
  run_distillation(collector, s.net, s.store, opt, *expert, cfg, 1);
  CHECK(s.store.flat_values() == before);
}

TEST_CASE("distillation is bit-deterministic") {
  auto run_once = [&]() {
    auto env = make_env("point_mass", 4);
    Student s(env->spec().schema, 7);
    auto expert = make_lqr_expert();
    RolloutCollector collector(*env, 11);
    DistillConfig cfg;
    cfg.iterations = 3;
    cfg.rollout_horizon = 8;
    Adam opt(s.store, cfg.learning_rate);
    run_distillation(collector, s.net, s.store, opt, *expert, cfg, 13);
    return s.store.flat_values();
  };
  CHECK(run_once() == run_once());
}

TEST_CASE("recurrent students distill through the sequence path") {
  auto env = make_env("memory_recall", 8);
  Student s(env->spec().schema, 8, /*recurrent=*/true);
  RolloutCollector collector(*env, 15);

  // synthetic expert: answer +0.5 at every step (recall task's query format)
  struct ConstantExpert : Expert {
    Tensor act(const ObservationSet& obs, std::span<const float>) override {
      return Tensor::full({obs.batch_size(), 1}, 0.5f);
    }
  } expert;

  DistillConfig cfg;
  cfg.iterations = 4;
  cfg.rollout_horizon = 16;
  cfg.minibatches = 2;
  Adam opt(s.store, cfg.learning_rate);
  double last_loss = -1.0;
  run_distillation(collector, s.net, s.store, opt, expert, cfg, 19,
                   [&](int, const DistillStats& st) { last_loss = st.loss; });
  CHECK(last_loss >= 0.0);
  CHECK(last_loss < 0.3);  // approaching the constant target
}

TEST_CASE("nll loss trains the standard deviation too") {
  auto env = make_env("point_mass", 8);
  Student s(env->spec().schema, 9);
  auto expert = make_lqr_expert();
  RolloutCollector collector(*env, 21);
  DistillConfig cfg;
  cfg.iterations = 10;
  cfg.loss_kind = DistillLoss::kNll;
  Adam opt(s.store, cfg.learning_rate);
  const float sigma_before = s.net.log_std.data()[0];
  run_distillation(collector, s.net, s.store, opt, *expert, cfg, 23);
  CHECK(s.net.log_std.data()[0] != sigma_before);
}
