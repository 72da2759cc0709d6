#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "rlcore/networks.hpp"
#include "rlcore/optim.hpp"
#include "support/gradcheck.hpp"

using namespace rlcore;

namespace {

ObservationSet single_group(const std::string& name, Tensor t) {
  ObservationSet obs;
  obs.groups.emplace(name, std::move(t));
  return obs;
}

}  // namespace

TEST_CASE("mlp init is deterministic and bounded") {
  MlpSpec spec{100, {32}, Activation::kTanh, 4};
  ParamStore a, b, c;
  make_mlp(a, "net", spec, 7);
  make_mlp(b, "net", spec, 7);
  make_mlp(c, "net", spec, 8);
  CHECK(a.flat_values() == b.flat_values());
  CHECK(a.flat_values() != c.flat_values());
  CHECK(a.checksum() == b.checksum());

  // first layer: fan_in = 100 -> |w| <= 0.1, biases zero
  const auto& w0 = a.entries()[0].value;
  for (float v : w0.data()) CHECK(std::abs(v) <= 0.1f);
  for (float v : a.entries()[1].value.data()) CHECK(v == 0.0f);
}

TEST_CASE("mlp forward shapes and degenerate specs") {
  ParamStore store;
  MlpSpec affine{3, {}, Activation::kTanh, 2};
  Mlp net = make_mlp(store, "affine", affine, 1);
  auto x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  auto y = net.forward(x);
  CHECK(y.shape() == Shape{2, 2});

  // pure affine map: y = x W + b exactly
  auto w = store.entries()[0].value;
  float manual = 0.0f;
  for (int j = 0; j < 3; ++j) manual += x.data()[j] * w.data()[j * 2];
  CHECK(y.data()[0] == doctest::Approx(manual));

  // all-zero parameters produce zero output
  ParamStore zstore;
  Mlp znet = make_mlp(zstore, "z", MlpSpec{3, {4}, Activation::kTanh, 2}, 1);
  std::vector<float> zeros(zstore.total_size(), 0.0f);
  zstore.set_flat_values(zeros);
  auto zy = znet.forward(x);
  for (float v : zy.data()) CHECK(v == 0.0f);

  CHECK_THROWS_AS(net.forward(Tensor::zeros({2, 4})), ShapeError);
}

TEST_CASE("mlp gradient matches finite differences") {
  ParamStore store;
  Mlp net = make_mlp(store, "net", MlpSpec{3, {8, 5}, Activation::kElu, 2}, 3);
  RngStream rng(11, StreamTag::kTest, {0});
  auto x = Tensor::uniform({4, 3}, rng, -1.0f, 1.0f);

  {
    Tape tape;
    tape.backward(mean(square(net.forward(x))));
  }
  auto eval = [&]() { return mean(square(net.forward(x))).item(); };
  for (const auto& p : store.entries()) {
    auto fd = gradcheck::fd_gradient(eval, p.value);
    for (int64_t i = 0; i < p.value.numel(); ++i) {
      CHECK(gradcheck::rel_err(p.value.grad()[i], fd[i]) < 1e-2);
    }
  }
}

TEST_CASE("policy_act mean mode returns the actor mean exactly") {
  ParamStore store;
  ObsSchema schema{{"policy", 3}, {"critic", 3}};
  auto net = make_actor_critic(store, schema, ActorCriticConfig{.action_dim = 2}, 5);
  RngStream rng(1, StreamTag::kTest, {1});
  auto obs = single_group("policy", Tensor::uniform({6, 3}, rng, -1.0f, 1.0f));
  obs.groups.emplace("critic", obs.at("policy"));

  auto res = policy_act(net, obs, ActMode::kMean);
  auto mu = net.actor.forward(obs.at("policy"));
  CHECK(std::equal(res.action.data().begin(), res.action.data().end(), mu.data().begin()));
  CHECK(res.value.shape() == Shape{6});

  ObservationSet missing;
  missing.groups.emplace("critic", obs.at("critic"));
  CHECK_THROWS_WITH_AS(policy_act(net, missing, ActMode::kMean), doctest::Contains("policy"),
                       RoutingError);
}

TEST_CASE("log prob of a standard normal at its mode") {
  // mu = 0 (zeroed actor), sigma = 1 (log_std init 0), action = 0
  ParamStore store;
  ObsSchema schema{{"policy", 2}};
  auto net = make_actor_critic(store, schema, ActorCriticConfig{.action_dim = 3}, 5);
  for (auto& t : net.actor.weights) {
    for (auto& v : const_cast<Tensor&>(t).mutable_data()) v = 0.0f;
  }
  auto obs = single_group("policy", Tensor::zeros({1, 2}));
  auto res = policy_act(net, obs, ActMode::kMean);
  CHECK(res.log_prob.data()[0] == doctest::Approx(-3.0 * 0.5 * std::log(2.0 * M_PI)));
}

TEST_CASE("sampled actions have the right empirical mean") {
  ParamStore store;
  ObsSchema schema{{"policy", 3}};
  auto net = make_actor_critic(store, schema, ActorCriticConfig{.action_dim = 2}, 9);
  const int n = 100000;
  RngStream rng(42, StreamTag::kTest, {2});
  std::vector<float> row = {0.3f, -0.5f, 0.8f};
  std::vector<float> tiled(static_cast<size_t>(n) * 3);
  for (int i = 0; i < n; ++i) std::copy(row.begin(), row.end(), tiled.begin() + i * 3);
  auto obs = single_group("policy", Tensor::from({n, 3}, std::move(tiled)));
  auto noise = Tensor::normal({n, 2}, rng);
  auto res = policy_act(net, obs, ActMode::kSample, &noise);

  auto mu = policy_mean(net, obs);
  for (int d = 0; d < 2; ++d) {
    double acc = 0.0;
    for (int i = 0; i < n; ++i) acc += res.action.data()[i * 2 + d];
    const double sample_mean = acc / n;
    const double sigma = std::exp(net.log_std.data()[d]);
    CHECK(std::abs(sample_mean - mu.data()[d]) < 3.0 * sigma / std::sqrt(double(n)));
  }
}

TEST_CASE("policy_evaluate: entropy closed forms and self-consistency") {
  ParamStore store;
  ObsSchema schema{{"policy", 3}};
  ActorCriticConfig cfg{.action_dim = 4};
  auto net = make_actor_critic(store, schema, cfg, 21);
  RngStream rng(3, StreamTag::kTest, {3});
  auto obs = single_group("policy", Tensor::uniform({5, 3}, rng, -1.0f, 1.0f));

  // sigma = 1 everywhere -> entropy = A * 0.5 * log(2*pi*e)
  auto noise = Tensor::normal({5, 4}, rng);
  auto act = policy_act(net, obs, ActMode::kSample, &noise);
  auto eval = policy_evaluate(net, obs, act.action);
  const double base = 4.0 * 0.5 * std::log(2.0 * M_PI * std::exp(1.0));
  CHECK(eval.entropy.data()[0] == doctest::Approx(base));

  // unchanged parameters reproduce the stored log probs
  for (int i = 0; i < 5; ++i) {
    CHECK(eval.log_prob.data()[i] == doctest::Approx(act.log_prob.data()[i]).epsilon(1e-6));
  }

  // doubling sigma adds A*log(2)
  for (auto& v : net.log_std.mutable_data()) v += std::log(2.0f);
  auto eval2 = policy_evaluate(net, obs, act.action);
  CHECK(eval2.entropy.data()[0] - eval.entropy.data()[0] ==
        doctest::Approx(4.0 * std::log(2.0)).epsilon(1e-5));
}

TEST_CASE("log prob integrates to one over a 1-d action grid") {
  ParamStore store;
  ObsSchema schema{{"policy", 2}};
  auto net = make_actor_critic(store, schema, ActorCriticConfig{.action_dim = 1}, 31);
  auto obs_row = single_group("policy", Tensor::from({1, 2}, {0.4f, -0.2f}));
  const float mu = policy_mean(net, obs_row).data()[0];
  const float sigma = std::exp(net.log_std.data()[0]);

  const int grid = 4001;
  const float lo = mu - 8 * sigma, hi = mu + 8 * sigma;
  const float da = (hi - lo) / (grid - 1);
  std::vector<float> obs_tiled(grid * 2);
  std::vector<float> actions(grid);
  for (int i = 0; i < grid; ++i) {
    obs_tiled[i * 2] = 0.4f;
    obs_tiled[i * 2 + 1] = -0.2f;
    actions[i] = lo + i * da;
  }
  auto eval = policy_evaluate(net, single_group("policy", Tensor::from({grid, 2}, obs_tiled)),
                              Tensor::from({grid, 1}, actions));
  double integral = 0.0;
  for (int i = 0; i < grid; ++i) integral += std::exp(eval.log_prob.data()[i]) * da;
  CHECK(integral == doctest::Approx(1.0).epsilon(1e-2));
}

TEST_CASE("entropy matches the Monte-Carlo estimate within 2 percent") {
  ParamStore store;
  ObsSchema schema{{"policy", 2}};
  auto net = make_actor_critic(store, schema, ActorCriticConfig{.action_dim = 3}, 17);
  net.log_std.mutable_data()[0] = 0.3f;
  net.log_std.mutable_data()[1] = -0.4f;
  net.log_std.mutable_data()[2] = 0.1f;

  const int n = 100000;
  RngStream rng(5, StreamTag::kTest, {4});
  std::vector<float> tiled(static_cast<size_t>(n) * 2, 0.5f);
  auto obs = single_group("policy", Tensor::from({n, 2}, std::move(tiled)));
  auto noise = Tensor::normal({n, 3}, rng);
  auto act = policy_act(net, obs, ActMode::kSample, &noise);

  double mc = 0.0;
  for (int i = 0; i < n; ++i) mc -= act.log_prob.data()[i];
  mc /= n;
  const double closed = gaussian_entropy(net.log_std, 1).data()[0];
  CHECK(std::abs(mc - closed) / std::abs(closed) < 0.02);
}

TEST_CASE("gru cell closed-form zero case") {
  // zero input, zero hidden, zero biases: z = r = 0.5, n = 0, h' = 0
  ParamStore store;
  GruCell cell = make_gru(store, "gru", 3, 4, 2);
  auto h = cell.step(Tensor::zeros({2, 3}), Tensor::zeros({2, 4}));
  for (float v : h.data()) CHECK(v == 0.0f);
}

TEST_CASE("gru rollforward reset semantics") {
  ParamStore store;
  GruCell cell = make_gru(store, "gru", 2, 5, 13);
  RngStream rng(8, StreamTag::kTest, {5});
  const int T = 6, B = 3;
  std::vector<Tensor> xs, ones_mask, zeros_mask;
  for (int t = 0; t < T; ++t) {
    xs.push_back(Tensor::uniform({B, 2}, rng, -1.0f, 1.0f));
    ones_mask.push_back(Tensor::full({B, 1}, 1.0f));
    zeros_mask.push_back(Tensor::zeros({B, 1}));
  }
  auto h0 = Tensor::uniform({B, 5}, rng, -1.0f, 1.0f);

  SUBCASE("all-ones mask is stateless") {
    auto seq = gru_rollforward(cell, h0, xs, ones_mask);
    for (int t = 0; t < T; ++t) {
      auto lone = cell.step(xs[t], Tensor::zeros({B, 5}));
      for (int64_t i = 0; i < lone.numel(); ++i) CHECK(seq[t].data()[i] == lone.data()[i]);
    }
  }

  SUBCASE("splitting at a reset boundary is exact") {
    auto masks = zeros_mask;
    masks[3] = Tensor::full({B, 1}, 1.0f);
    auto full = gru_rollforward(cell, h0, xs, masks);

    std::vector<Tensor> xs_a(xs.begin(), xs.begin() + 3);
    std::vector<Tensor> xs_b(xs.begin() + 3, xs.end());
    std::vector<Tensor> m_a(zeros_mask.begin(), zeros_mask.begin() + 3);
    std::vector<Tensor> m_b(zeros_mask.begin(), zeros_mask.begin() + 3);
    auto part_a = gru_rollforward(cell, h0, xs_a, m_a);
    auto part_b = gru_rollforward(cell, Tensor::zeros({B, 5}), xs_b, m_b);
    for (int t = 0; t < 3; ++t) {
      for (int64_t i = 0; i < part_a[t].numel(); ++i) {
        CHECK(full[t].data()[i] == part_a[t].data()[i]);
      }
    }
    for (int t = 0; t < 3; ++t) {
      for (int64_t i = 0; i < part_b[t].numel(); ++i) {
        CHECK(full[3 + t].data()[i] == part_b[t].data()[i]);
      }
    }
  }

  SUBCASE("hidden state stays inf-norm bounded") {
    auto h = Tensor::uniform({B, 5}, rng, -0.9f, 0.9f);
    for (int rep = 0; rep < 50; ++rep) {
      auto x = Tensor::uniform({B, 2}, rng, -3.0f, 3.0f);
      h = cell.step(x, h);
      for (float v : h.data()) CHECK(std::abs(v) <= 1.0f + 1e-6f);
    }
  }
}

TEST_CASE("rnd pair basics") {
  ParamStore store;
  RndPair pair = make_rnd_pair(store, 2, 8, {32, 32}, 77);
  RngStream rng(6, StreamTag::kTest, {6});
  auto x = Tensor::uniform({16, 2}, rng, -1.0f, 1.0f);

  auto [t_out, p_out] = rnd_embed(pair, x);
  double err = 0.0;
  for (int64_t i = 0; i < t_out.numel(); ++i) {
    const double d = t_out.data()[i] - p_out.data()[i];
    err += d * d;
  }
  CHECK(err > 0.0);  // fresh pair disagrees almost surely

  // copying target params into the predictor kills the error
  ParamStore twin;
  RndPair same = make_rnd_pair(twin, 2, 8, {32, 32}, 77);
  std::vector<float> vals = twin.flat_values();
  const int64_t half = twin.total_size() / 2;
  std::copy(vals.begin(), vals.begin() + half, vals.begin() + half);
  twin.set_flat_values(vals);
  auto [t2, p2] = rnd_embed(same, x);
  for (int64_t i = 0; i < t2.numel(); ++i) CHECK(t2.data()[i] == p2.data()[i]);
}

TEST_CASE("rnd predictor trains to convergence on a fixed input set") {
  ParamStore store;
  RndPair pair = make_rnd_pair(store, 2, 8, {32, 32}, 123);
  RngStream rng(7, StreamTag::kTest, {7});
  auto x = Tensor::uniform({16, 2}, rng, -1.0f, 1.0f);

  Adam opt(store, 3e-3f);
  float loss_val = 1.0f;
  for (int it = 0; it < 3000 && loss_val >= 1e-3f; ++it) {
    store.zero_grad();
    Tape tape;
    auto [t_out, p_out] = rnd_embed(pair, x);
    auto loss = mean(square(sub(p_out, t_out)));
    loss_val = loss.item();
    tape.backward(loss);
    opt.step();
  }
  CHECK(loss_val < 1e-3f);

  // the frozen target is bit-identical after training
  ParamStore fresh;
  make_rnd_pair(fresh, 2, 8, {32, 32}, 123);
  for (size_t i = 0; i < store.entries().size(); ++i) {
    if (!store.entries()[i].trainable) {
      CHECK(std::equal(store.entries()[i].value.data().begin(),
                       store.entries()[i].value.data().end(),
                       fresh.entries()[i].value.data().begin()));
    }
  }
}

TEST_CASE("recurrent actor-critic act and sequence evaluation agree") {
  ParamStore store;
  ObsSchema schema{{"policy", 3}};
  ActorCriticConfig cfg{.action_dim = 2, .hidden_sizes = {16}, .recurrent = true, .hidden_dim = 8};
  auto net = make_actor_critic(store, schema, cfg, 55);
  RngStream rng(9, StreamTag::kTest, {8});

  const int T = 4, B = 3;
  std::vector<ObservationSet> obs_seq;
  std::vector<Tensor> actions, masks;
  Tensor h = Tensor::zeros({B, 8});
  std::vector<std::vector<float>> step_logp;
  for (int t = 0; t < T; ++t) {
    obs_seq.push_back(single_group("policy", Tensor::uniform({B, 3}, rng, -1.0f, 1.0f)));
    auto noise = Tensor::normal({B, 2}, rng);
    auto res = policy_act(net, obs_seq.back(), ActMode::kSample, &noise, &h);
    h = res.next_hidden;
    actions.push_back(res.action);
    masks.push_back(Tensor::zeros({B, 1}));
    step_logp.emplace_back(res.log_prob.data().begin(), res.log_prob.data().end());
  }

  auto eval = policy_evaluate_sequence(net, obs_seq, actions, Tensor::zeros({B, 8}), masks);
  for (int t = 0; t < T; ++t) {
    for (int b = 0; b < B; ++b) {
      CHECK(eval.log_prob.data()[t * B + b] == doctest::Approx(step_logp[t][b]).epsilon(1e-5));
    }
  }
}
