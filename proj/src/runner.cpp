#include "rlcore/runner.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>

#include "rlcore/checkpoint.hpp"
#include "rlcore/rng.hpp"

namespace rlcore {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr uint64_t kEvalSeedTag = 0xEA71ull;
constexpr int64_t kVerifyInterval = 50;

void check_keys(const json& j, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& [key, value] : j.items()) {
    (void)value;
    bool ok = false;
    for (const char* a : allowed) {
      if (key == a) {
        ok = true;
        break;
      }
    }
    if (!ok) throw ConfigError("unknown key \"" + key + "\" in " + where);
  }
}

SignedPermutation perm_from_json(const json& j, const std::string& where) {
  SignedPermutation map;
  if (!j.is_array()) throw ConfigError(where + " must be a list of [index, sign] pairs");
  for (const auto& pair : j) {
    if (!pair.is_array() || pair.size() != 2) {
      throw ConfigError(where + " entries must be [index, sign] pairs");
    }
    map.source.push_back(pair[0].get<int>());
    map.sign.push_back(pair[1].get<float>());
  }
  return map;
}

json perm_to_json(const SignedPermutation& map) {
  json out = json::array();
  for (size_t i = 0; i < map.size(); ++i) {
    out.push_back({map.source[i], map.sign[i]});
  }
  return out;
}

PpoConfig ppo_from_json(const json& j) {
  check_keys(j,
             {"gamma", "lam", "clip_eps", "epochs", "num_minibatches", "learning_rate",
              "kl_target", "value_coef", "entropy_coef", "max_grad_norm",
              "normalize_advantages", "clip_value_loss", "rollout_horizon",
              "bootstrap_timeouts"},
             "algo.ppo");
  PpoConfig c;
  c.gamma = j.value("gamma", c.gamma);
  c.lam = j.value("lam", c.lam);
  c.clip_eps = j.value("clip_eps", c.clip_eps);
  c.epochs = j.value("epochs", c.epochs);
  c.num_minibatches = j.value("num_minibatches", c.num_minibatches);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.kl_target = j.value("kl_target", c.kl_target);
  c.value_coef = j.value("value_coef", c.value_coef);
  c.entropy_coef = j.value("entropy_coef", c.entropy_coef);
  c.max_grad_norm = j.value("max_grad_norm", c.max_grad_norm);
  c.normalize_advantages = j.value("normalize_advantages", c.normalize_advantages);
  c.clip_value_loss = j.value("clip_value_loss", c.clip_value_loss);
  c.rollout_horizon = j.value("rollout_horizon", c.rollout_horizon);
  c.bootstrap_timeouts = j.value("bootstrap_timeouts", c.bootstrap_timeouts);
  return c;
}

json ppo_to_json(const PpoConfig& c) {
  return json{{"gamma", c.gamma},
              {"lam", c.lam},
              {"clip_eps", c.clip_eps},
              {"epochs", c.epochs},
              {"num_minibatches", c.num_minibatches},
              {"learning_rate", c.learning_rate},
              {"kl_target", c.kl_target},
              {"value_coef", c.value_coef},
              {"entropy_coef", c.entropy_coef},
              {"max_grad_norm", c.max_grad_norm},
              {"normalize_advantages", c.normalize_advantages},
              {"clip_value_loss", c.clip_value_loss},
              {"rollout_horizon", c.rollout_horizon},
              {"bootstrap_timeouts", c.bootstrap_timeouts}};
}

}  // namespace

RunConfig RunConfig::from_json(const json& j) {
  check_keys(j,
             {"env", "algo", "network", "extensions", "seed", "max_iterations", "log_interval",
              "checkpoint_interval", "out_dir"},
             "config");
  RunConfig cfg;

  const auto& env = j.at("env");
  check_keys(env, {"name", "num_envs", "overrides"}, "env");
  cfg.env_name = env.at("name").get<std::string>();
  cfg.num_envs = env.value("num_envs", cfg.num_envs);
  if (env.contains("overrides") && !env.at("overrides").is_null()) {
    const auto& o = env.at("overrides");
    check_keys(o, {"max_episode_length", "randomize_initial_step", "obs_noise_std"},
               "env.overrides");
    if (o.contains("max_episode_length") && !o.at("max_episode_length").is_null()) {
      cfg.overrides.max_episode_length = o.at("max_episode_length").get<int64_t>();
    }
    cfg.overrides.randomize_initial_step =
        o.value("randomize_initial_step", cfg.overrides.randomize_initial_step);
    cfg.overrides.obs_noise_std = o.value("obs_noise_std", cfg.overrides.obs_noise_std);
  }

  const auto& algo = j.at("algo");
  check_keys(algo, {"ppo", "distill"}, "algo");
  if (algo.contains("ppo") == algo.contains("distill")) {
    throw ConfigError("config must contain exactly one algo block (ppo or distill)");
  }
  if (algo.contains("ppo")) {
    cfg.algo = AlgoKind::kPpo;
    cfg.ppo = ppo_from_json(algo.at("ppo"));
  } else {
    cfg.algo = AlgoKind::kDistill;
    const auto& d = algo.at("distill");
    check_keys(d,
               {"iterations", "rollout_horizon", "learning_rate", "epochs_per_iteration",
                "minibatches", "max_grad_norm", "loss", "beta", "expert"},
               "algo.distill");
    cfg.distill.iterations = d.value("iterations", cfg.distill.iterations);
    cfg.distill.rollout_horizon = d.value("rollout_horizon", cfg.distill.rollout_horizon);
    cfg.distill.learning_rate = d.value("learning_rate", cfg.distill.learning_rate);
    cfg.distill.epochs_per_iteration =
        d.value("epochs_per_iteration", cfg.distill.epochs_per_iteration);
    cfg.distill.minibatches = d.value("minibatches", cfg.distill.minibatches);
    cfg.distill.max_grad_norm = d.value("max_grad_norm", cfg.distill.max_grad_norm);
    const std::string loss = d.value("loss", std::string("mse_on_mean"));
    if (loss == "mse_on_mean") {
      cfg.distill.loss_kind = DistillLoss::kMseOnMean;
    } else if (loss == "nll") {
      cfg.distill.loss_kind = DistillLoss::kNll;
    } else {
      throw ConfigError("algo.distill.loss must be mse_on_mean or nll");
    }
    if (d.contains("beta")) {
      const auto& b = d.at("beta");
      if (b.is_number()) {
        cfg.distill.beta_start = cfg.distill.beta_end = b.get<float>();
      } else {
        check_keys(b, {"start", "end"}, "algo.distill.beta");
        cfg.distill.beta_start = b.value("start", 0.0f);
        cfg.distill.beta_end = b.value("end", 0.0f);
      }
    }
    if (d.contains("expert")) {
      const auto& e = d.at("expert");
      check_keys(e, {"kind", "path"}, "algo.distill.expert");
      const std::string kind = e.value("kind", std::string("lqr"));
      if (kind == "lqr") {
        cfg.expert_kind = ExpertKind::kLqr;
      } else if (kind == "checkpoint") {
        cfg.expert_kind = ExpertKind::kCheckpoint;
      } else {
        throw ConfigError("algo.distill.expert.kind must be lqr or checkpoint");
      }
      cfg.teacher_path = e.value("path", std::string());
    }
  }

  if (j.contains("network") && !j.at("network").is_null()) {
    const auto& n = j.at("network");
    check_keys(n, {"hidden_sizes", "activation", "recurrent", "hidden_dim"}, "network");
    cfg.hidden_sizes = n.value("hidden_sizes", cfg.hidden_sizes);
    cfg.activation = n.value("activation", cfg.activation);
    cfg.recurrent = n.value("recurrent", cfg.recurrent);
    cfg.hidden_dim = n.value("hidden_dim", cfg.hidden_dim);
  }

  if (j.contains("extensions") && !j.at("extensions").is_null()) {
    const auto& e = j.at("extensions");
    check_keys(e, {"symmetry", "rnd"}, "extensions");
    if (e.contains("symmetry") && !e.at("symmetry").is_null()) {
      const auto& s = e.at("symmetry");
      check_keys(s, {"obs", "action", "use_augmentation", "use_loss", "weight"},
                 "extensions.symmetry");
      SymmetrySpec spec;
      for (const auto& [group, map] : s.at("obs").items()) {
        spec.obs_maps[group] = perm_from_json(map, "symmetry map for group " + group);
      }
      spec.action_map = perm_from_json(s.at("action"), "symmetry action map");
      spec.use_augmentation = s.value("use_augmentation", true);
      spec.use_loss = s.value("use_loss", true);
      spec.weight = s.value("weight", 0.5f);
      cfg.symmetry = std::move(spec);
    }
    if (e.contains("rnd") && !e.at("rnd").is_null()) {
      const auto& r = e.at("rnd");
      check_keys(r,
                 {"group", "embed_dim", "hidden_sizes", "reward_scale", "predictor_lr",
                  "normalize_reward", "normalize_obs"},
                 "extensions.rnd");
      RndConfig rc;
      rc.group = r.value("group", rc.group);
      rc.embed_dim = r.value("embed_dim", rc.embed_dim);
      rc.hidden_sizes = r.value("hidden_sizes", rc.hidden_sizes);
      rc.reward_scale = r.value("reward_scale", rc.reward_scale);
      rc.predictor_lr = r.value("predictor_lr", rc.predictor_lr);
      rc.normalize_reward = r.value("normalize_reward", rc.normalize_reward);
      rc.normalize_obs = r.value("normalize_obs", rc.normalize_obs);
      cfg.rnd = rc;
    }
  }

  cfg.seed = j.value("seed", cfg.seed);
  cfg.max_iterations = j.value("max_iterations", cfg.max_iterations);
  cfg.log_interval = j.value("log_interval", cfg.log_interval);
  cfg.checkpoint_interval = j.value("checkpoint_interval", cfg.checkpoint_interval);
  cfg.out_dir = j.value("out_dir", cfg.out_dir);
  return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file \"" + path + "\"");
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw ConfigError("config \"" + path + "\" is not valid JSON: " + e.what());
  }
  return from_json(j);
}

json RunConfig::to_json() const {
  json envj{{"name", env_name}, {"num_envs", num_envs}};
  json o;
  o["max_episode_length"] =
      overrides.max_episode_length ? json(*overrides.max_episode_length) : json(nullptr);
  o["randomize_initial_step"] = overrides.randomize_initial_step;
  o["obs_noise_std"] = overrides.obs_noise_std;
  envj["overrides"] = o;

  json algoj;
  if (algo == AlgoKind::kPpo) {
    algoj["ppo"] = ppo_to_json(ppo);
  } else {
    json expert{{"kind", expert_kind == ExpertKind::kLqr ? "lqr" : "checkpoint"}};
    if (!teacher_path.empty()) expert["path"] = teacher_path;
    algoj["distill"] = json{{"iterations", distill.iterations},
                            {"rollout_horizon", distill.rollout_horizon},
                            {"learning_rate", distill.learning_rate},
                            {"epochs_per_iteration", distill.epochs_per_iteration},
                            {"minibatches", distill.minibatches},
                            {"max_grad_norm", distill.max_grad_norm},
                            {"loss", distill.loss_kind == DistillLoss::kMseOnMean ? "mse_on_mean"
                                                                                  : "nll"},
                            {"beta", json{{"start", distill.beta_start},
                                          {"end", distill.beta_end}}},
                            {"expert", expert}};
  }

  json netj{{"hidden_sizes", hidden_sizes},
            {"activation", activation},
            {"recurrent", recurrent},
            {"hidden_dim", hidden_dim}};

  json ext = json::object();
  if (symmetry) {
    json obs = json::object();
    for (const auto& [group, map] : symmetry->obs_maps) obs[group] = perm_to_json(map);
    ext["symmetry"] = json{{"obs", obs},
                           {"action", perm_to_json(symmetry->action_map)},
                           {"use_augmentation", symmetry->use_augmentation},
                           {"use_loss", symmetry->use_loss},
                           {"weight", symmetry->weight}};
  }
  if (rnd) {
    ext["rnd"] = json{{"group", rnd->group},
                      {"embed_dim", rnd->embed_dim},
                      {"hidden_sizes", rnd->hidden_sizes},
                      {"reward_scale", rnd->reward_scale},
                      {"predictor_lr", rnd->predictor_lr},
                      {"normalize_reward", rnd->normalize_reward},
                      {"normalize_obs", rnd->normalize_obs}};
  }

  return json{{"env", envj},
              {"algo", algoj},
              {"network", netj},
              {"extensions", ext},
              {"seed", seed},
              {"max_iterations", max_iterations},
              {"log_interval", log_interval},
              {"checkpoint_interval", checkpoint_interval},
              {"out_dir", out_dir}};
}

void RunConfig::validate() const {
  static const char* kEnvs[] = {"point_mass", "pendulum", "sparse_chain", "memory_recall"};
  bool known = false;
  for (const char* e : kEnvs) known = known || env_name == e;
  if (!known) throw ConfigError("unknown environment \"" + env_name + "\"");
  if (num_envs < 1) throw ConfigError("num_envs must be >= 1");
  if (max_iterations < 0) throw ConfigError("max_iterations must be >= 0");
  if (log_interval < 1) throw ConfigError("log_interval must be >= 1");
  if (checkpoint_interval < 1) throw ConfigError("checkpoint_interval must be >= 1");
  activation_from_string(activation);  // throws on junk
  if (hidden_dim < 1) throw ConfigError("hidden_dim must be >= 1");
  for (int h : hidden_sizes) {
    if (h < 1) throw ConfigError("hidden sizes must be >= 1");
  }
  if (algo == AlgoKind::kPpo) {
    ppo.validate();
  } else {
    distill.validate();
    if (expert_kind == ExpertKind::kCheckpoint && teacher_path.empty()) {
      throw ConfigError("distill with a checkpoint expert requires a teacher path");
    }
    if (symmetry || rnd) throw ConfigError("extension blocks are only valid with ppo");
  }
  if (symmetry) {
    symmetry->validate();
    if (recurrent && symmetry->use_augmentation) {
      throw ConfigError("symmetry augmentation is not defined for recurrent policies");
    }
  }
  if (rnd) rnd->validate();
}

namespace {

ActorCriticConfig network_config(const RunConfig& cfg, const EnvSpec& spec) {
  ActorCriticConfig nc;
  nc.action_dim = spec.action_dim;
  nc.hidden_sizes = cfg.hidden_sizes;
  nc.activation = activation_from_string(cfg.activation);
  nc.recurrent = cfg.recurrent;
  nc.hidden_dim = cfg.hidden_dim;
  return nc;
}

std::string checkpoint_name(int64_t iteration) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "checkpoint_%06lld.ckpt", static_cast<long long>(iteration));
  return buf;
}

void write_checkpoint(const std::string& path, const RunConfig& cfg, int64_t iteration,
                      int64_t total_env_steps, const ParamStore& store) {
  json header;
  header["format_version"] = 1;
  header["config"] = cfg.to_json();
  header["iteration"] = iteration;
  header["total_env_steps"] = total_env_steps;
  header["rng_state"] = json{{"seed", cfg.seed}, {"update_ordinal", iteration}};
  header["params"] = param_manifest(store);
  write_container(path, kCheckpointMagic, header, store.flat_values());
}

// One JSON-lines metrics record; keys are stable across run kinds.
json metrics_record(int64_t iteration, int64_t total_env_steps, double wall_time_s,
                    const EpisodeStats& window, const json& algo_fields) {
  json rec;
  rec["iteration"] = iteration;
  rec["total_env_steps"] = total_env_steps;
  rec["wall_time_s"] = wall_time_s;
  if (window.returns.empty()) {
    rec["mean_episode_return"] = nullptr;
    rec["mean_episode_length"] = nullptr;
  } else {
    double ret = 0.0, len = 0.0;
    for (double r : window.returns) ret += r;
    for (double l : window.lengths) len += l;
    rec["mean_episode_return"] = ret / window.returns.size();
    rec["mean_episode_length"] = len / window.lengths.size();
  }
  rec["steps_per_second"] =
      wall_time_s > 0.0 ? json(static_cast<double>(total_env_steps) / wall_time_s) : json(nullptr);
  for (const auto& [k, v] : algo_fields.items()) rec[k] = v;
  return rec;
}

class MetricsWriter {
 public:
  explicit MetricsWriter(const std::string& path) : out_(path, std::ios::trunc) {
    if (!out_) throw FormatError("cannot open metrics file \"" + path + "\"");
  }
  void write(const json& rec) {
    out_ << rec.dump() << "\n";
    out_.flush();
  }

 private:
  std::ofstream out_;
};

std::unique_ptr<Expert> build_expert(const RunConfig& cfg, const EnvSpec& spec) {
  if (cfg.expert_kind == ExpertKind::kLqr) {
    auto sol = lqr_oracle(0.05, 1.0, 0.1, 0.01, 1.0, /*episodes=*/1);
    return std::make_unique<LqrExpert>(sol.gain, spec.action_lo[0], spec.action_hi[0]);
  }
  auto lp = load_policy(cfg.teacher_path);
  return std::make_unique<PolicyExpert>(std::move(lp.store), std::move(lp.net));
}

}  // namespace

TrainResult run_training(const RunConfig& cfg, const WorkerIdentity& identity) {
  cfg.validate();
  const bool chief = identity.rank == 0;
  const int world = identity.world_size;
  const int64_t env_offset = static_cast<int64_t>(identity.rank) * cfg.num_envs;

  auto env = make_env(cfg.env_name, cfg.num_envs, cfg.overrides, env_offset);
  ParamStore store;
  GaussianActorCritic net =
      make_actor_critic(store, env->spec().schema, network_config(cfg, env->spec()), cfg.seed);
  std::optional<RndModule> rnd;
  if (cfg.rnd) rnd.emplace(store, env->spec().schema, *cfg.rnd, mix64(cfg.seed, 0x52D));

  auto collective = Collective::connect(identity, store.total_size());
  {
    auto params = store.flat_values();
    collective->broadcast(params);
    store.set_flat_values(params);
  }
  GradientReducer* reducer = world > 1 ? collective.get() : nullptr;

  if (chief) fs::create_directories(cfg.out_dir);
  std::optional<MetricsWriter> metrics;
  std::string metrics_path;
  if (chief) {
    metrics_path = (fs::path(cfg.out_dir) / "metrics.jsonl").string();
    metrics.emplace(metrics_path);
  }

  RolloutCollector collector(*env, cfg.seed, env_offset);
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_s = [&]() {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  };

  const int horizon =
      cfg.algo == AlgoKind::kPpo ? cfg.ppo.rollout_horizon : cfg.distill.rollout_horizon;
  auto global_steps = [&](int64_t it) {
    return it * static_cast<int64_t>(horizon) * cfg.num_envs * world;
  };

  std::string final_path;
  if (cfg.algo == AlgoKind::kPpo) {
    Adam opt(store, cfg.ppo.learning_rate,
             [](const Param& p) { return p.name.rfind("rnd.", 0) != 0; });
    std::optional<Adam> rnd_opt;
    if (rnd) {
      rnd_opt.emplace(store, cfg.rnd->predictor_lr,
                      [](const Param& p) { return p.name.rfind("rnd.predictor", 0) == 0; });
    }
    std::optional<SymmetryHooks> hooks;
    if (cfg.symmetry) hooks.emplace(*cfg.symmetry);

    for (int64_t it = 1; it <= cfg.max_iterations; ++it) {
      auto buf = collector.collect(net, cfg.ppo.rollout_horizon, cfg.ppo);

      json algo_fields;
      algo_fields["intrinsic_reward_mean"] = nullptr;
      if (rnd) {
        std::vector<Tensor> parts;
        parts.reserve(buf.T);
        for (int t = 0; t < buf.T; ++t) parts.push_back(buf.obs[t].at(cfg.rnd->group));
        Tensor all = concat_rows(parts);
        rnd->observe(all);
        auto raw = rnd->raw_errors(all);
        rnd->update_reward_moments(raw);
        const double denom =
            cfg.rnd->normalize_reward ? std::max(rnd->reward_moments().stddev(0), 1e-8) : 1.0;
        const double scale = cfg.rnd->reward_scale / denom;
        double mean_intrinsic = 0.0;
        for (int t = 0; t < buf.T; ++t) {
          for (int b = 0; b < buf.B; ++b) {
            const double r_int = raw[static_cast<size_t>(t) * buf.B + b] * scale;
            buf.rewards[t][b] += static_cast<float>(r_int);
            mean_intrinsic += r_int;
          }
        }
        algo_fields["intrinsic_reward_mean"] = mean_intrinsic / (buf.T * buf.B);
      }

      compute_gae(buf, cfg.ppo.gamma, cfg.ppo.lam);
      auto res = ppo_update(buf, net, store, opt, cfg.ppo, cfg.seed,
                            static_cast<uint64_t>(it), identity.rank,
                            hooks ? &*hooks : nullptr, reducer);
      if (rnd) {
        std::vector<Tensor> parts;
        parts.reserve(buf.T);
        for (int t = 0; t < buf.T; ++t) parts.push_back(buf.obs[t].at(cfg.rnd->group));
        rnd->update_predictor(concat_rows(parts), store, *rnd_opt, reducer);
      }

      if (world > 1 && it % kVerifyInterval == 0) collective->verify_params(store.flat_values());

      if (chief && it % cfg.log_interval == 0) {
        algo_fields["surrogate_loss"] = res.stats.surrogate_loss;
        algo_fields["value_loss"] = res.stats.value_loss;
        algo_fields["entropy"] = res.stats.entropy;
        algo_fields["approx_kl"] = res.stats.approx_kl;
        algo_fields["learning_rate"] = res.lr;
        algo_fields["clip_fraction"] = res.stats.clip_fraction;
        algo_fields["symmetry_loss"] =
            cfg.symmetry && cfg.symmetry->use_loss ? json(res.stats.extra_loss) : json(nullptr);
        algo_fields["distill_loss"] = nullptr;
        metrics->write(metrics_record(it, global_steps(it), elapsed_s(), collector.stats(),
                                      algo_fields));
        collector.stats().clear();
      }
      if (chief && it % cfg.checkpoint_interval == 0 && it != cfg.max_iterations) {
        write_checkpoint((fs::path(cfg.out_dir) / checkpoint_name(it)).string(), cfg, it,
                         global_steps(it), store);
      }
    }
  } else {
    Adam opt(store, cfg.distill.learning_rate);
    DistillConfig dcfg = cfg.distill;
    dcfg.iterations = static_cast<int>(cfg.max_iterations);
    auto expert = build_expert(cfg, env->spec());

    for (int64_t it = 1; it <= cfg.max_iterations; ++it) {
      auto ds = collect_and_relabel(collector, net, *expert, dcfg.rollout_horizon,
                                    dcfg.beta_at(static_cast<int>(it - 1)));
      auto stats = distill_update(ds, net, store, opt, dcfg, cfg.seed,
                                  static_cast<uint64_t>(it), identity.rank, reducer);

      if (world > 1 && it % kVerifyInterval == 0) collective->verify_params(store.flat_values());

      if (chief && it % cfg.log_interval == 0) {
        json algo_fields;
        algo_fields["surrogate_loss"] = nullptr;
        algo_fields["value_loss"] = nullptr;
        algo_fields["entropy"] = nullptr;
        algo_fields["approx_kl"] = nullptr;
        algo_fields["learning_rate"] = opt.lr();
        algo_fields["clip_fraction"] = nullptr;
        algo_fields["symmetry_loss"] = nullptr;
        algo_fields["intrinsic_reward_mean"] = nullptr;
        algo_fields["distill_loss"] = stats.loss;
        metrics->write(metrics_record(it, global_steps(it), elapsed_s(), collector.stats(),
                                      algo_fields));
        collector.stats().clear();
      }
      if (chief && it % cfg.checkpoint_interval == 0 && it != cfg.max_iterations) {
        write_checkpoint((fs::path(cfg.out_dir) / checkpoint_name(it)).string(), cfg, it,
                         global_steps(it), store);
      }
    }
  }

  TrainResult result;
  result.total_env_steps = global_steps(cfg.max_iterations);
  if (chief) {
    final_path = (fs::path(cfg.out_dir) / "checkpoint_final.ckpt").string();
    write_checkpoint(final_path, cfg, cfg.max_iterations, result.total_env_steps, store);
    result.checkpoint_path = final_path;
    result.metrics_path = metrics_path;
  }
  collective->shutdown();
  return result;
}

LoadedPolicy load_policy(const std::string& checkpoint_path) {
  Container c = read_container(checkpoint_path, kCheckpointMagic);
  RunConfig cfg = RunConfig::from_json(c.header.at("config"));
  auto env = make_env(cfg.env_name, 1, cfg.overrides);

  LoadedPolicy lp{cfg, std::make_unique<ParamStore>(),
                  GaussianActorCritic{}, c.header};
  lp.net = make_actor_critic(*lp.store, env->spec().schema, network_config(cfg, env->spec()),
                             cfg.seed);
  if (cfg.rnd) {
    RndModule rebuilt(*lp.store, env->spec().schema, *cfg.rnd, mix64(cfg.seed, 0x52D));
    (void)rebuilt;  // parameters registered; normalizer state is not persisted
  }
  load_params(c, *lp.store);
  return lp;
}

EvalReport evaluate_checkpoint(const std::string& checkpoint_path, int episodes,
                               bool deterministic) {
  if (episodes < 1) throw ArgumentError("evaluate requires at least one episode (empty report)");
  auto lp = load_policy(checkpoint_path);

  EnvOverrides overrides = lp.config.overrides;
  overrides.randomize_initial_step = false;  // measure full episodes
  auto env = make_env(lp.config.env_name, lp.config.num_envs, overrides);
  const int B = env->spec().num_envs;
  const int A = env->spec().action_dim;
  const uint64_t eval_seed = mix64(lp.config.seed, kEvalSeedTag);

  ObservationSet obs = env->reset_all(eval_seed);
  Tensor hidden;
  if (lp.net.recurrent()) hidden = Tensor::zeros({B, lp.net.cfg.hidden_dim});
  std::vector<double> ep_return(B, 0.0);
  std::vector<int64_t> ep_len(B, 0);

  std::vector<double> returns, lengths;
  std::vector<uint8_t> successes;
  int64_t step = 0;
  while (static_cast<int>(returns.size()) < episodes) {
    Tensor action;
    if (deterministic) {
      Tensor next;
      action = policy_mean(lp.net, obs, lp.net.recurrent() ? &hidden : nullptr,
                           lp.net.recurrent() ? &next : nullptr);
      if (lp.net.recurrent()) hidden = next;
    } else {
      std::vector<float> noise(static_cast<size_t>(B) * A);
      for (int b = 0; b < B; ++b) {
        RngStream rng(eval_seed, StreamTag::kEval,
                      {static_cast<uint64_t>(b), static_cast<uint64_t>(step)});
        for (int d = 0; d < A; ++d) noise[static_cast<size_t>(b) * A + d] =
            static_cast<float>(rng.normal());
      }
      Tensor noise_t = Tensor::from({B, A}, std::move(noise));
      auto act = policy_act(lp.net, obs, ActMode::kSample, &noise_t,
                            lp.net.recurrent() ? &hidden : nullptr);
      action = act.action;
      if (lp.net.recurrent()) hidden = act.next_hidden;
    }

    auto sr = env->step(action);
    for (int b = 0; b < B; ++b) {
      ep_return[b] += sr.reward.data()[b];
      ep_len[b] += 1;
      if (sr.terminated[b] || sr.timeout[b]) {
        if (static_cast<int>(returns.size()) < episodes) {
          returns.push_back(ep_return[b]);
          lengths.push_back(static_cast<double>(ep_len[b]));
          successes.push_back(sr.terminated[b] && sr.reward.data()[b] > 0.5f ? 1 : 0);
        }
        ep_return[b] = 0.0;
        ep_len[b] = 0;
        if (lp.net.recurrent()) {
          auto h = hidden.mutable_data();
          std::fill_n(h.begin() + static_cast<size_t>(b) * lp.net.cfg.hidden_dim,
                      lp.net.cfg.hidden_dim, 0.0f);
        }
      }
    }
    obs = sr.obs;
    ++step;
  }

  EvalReport report;
  report.episodes = static_cast<int>(returns.size());
  double mean = 0.0;
  for (double r : returns) mean += r;
  mean /= returns.size();
  double var = 0.0;
  for (double r : returns) var += (r - mean) * (r - mean);
  var /= returns.size();
  double len = 0.0;
  for (double l : lengths) len += l;
  report.mean_return = mean;
  report.std_return = std::sqrt(var);
  report.mean_length = len / lengths.size();
  if (env->defines_success()) {
    double s = 0.0;
    for (uint8_t v : successes) s += v;
    report.success_rate = s / successes.size();
  }
  return report;
}

void export_policy_file(const std::string& checkpoint_path, const std::string& out_path) {
  Container c = read_container(checkpoint_path, kCheckpointMagic);
  RunConfig cfg = RunConfig::from_json(c.header.at("config"));
  auto env = make_env(cfg.env_name, 1, cfg.overrides);

  // rebuild to locate the actor-mean (+ memory) parameters in canonical order
  ParamStore store;
  make_actor_critic(store, env->spec().schema, network_config(cfg, env->spec()), cfg.seed);
  if (cfg.rnd) RndModule rebuilt(store, env->spec().schema, *cfg.rnd, mix64(cfg.seed, 0x52D));
  load_params(c, store);

  ParamStore exported;
  for (const auto& p : store.entries()) {
    if (p.name.rfind("actor.", 0) == 0 || p.name.rfind("memory.", 0) == 0) {
      exported.add(p.name, p.value.detach());
    }
  }

  json schema = json::object();
  for (const auto& [name, width] : env->spec().schema) schema[name] = width;
  json header;
  header["format_version"] = 1;
  header["obs_schema"] = schema;
  header["obs_group"] = "policy";
  header["action_dim"] = env->spec().action_dim;
  header["hidden_sizes"] = cfg.hidden_sizes;
  header["activation"] = cfg.activation;
  header["recurrent"] = cfg.recurrent;
  header["hidden_dim"] = cfg.hidden_dim;
  header["params"] = param_manifest(exported);
  write_container(out_path, kExportMagic, header, exported.flat_values());
}

ExportedPolicy::ExportedPolicy(const std::string& path) {
  Container c = read_container(path, kExportMagic);
  const auto& h = c.header;
  for (const auto& [name, width] : h.at("obs_schema").items()) {
    schema_[name] = width.get<int64_t>();
  }
  obs_dim_ = schema_.at(h.value("obs_group", "policy"));
  action_dim_ = h.at("action_dim").get<int>();
  hidden_dim_ = h.value("hidden_dim", 0);
  const bool recurrent = h.value("recurrent", false);

  store_ = std::make_unique<ParamStore>();
  const auto hidden_sizes = h.at("hidden_sizes").get<std::vector<int>>();
  const auto act = activation_from_string(h.at("activation").get<std::string>());
  if (recurrent) {
    gru_ = make_gru(*store_, "memory", static_cast<int>(obs_dim_), hidden_dim_, 0);
    actor_ = make_mlp(*store_, "actor",
                      MlpSpec{hidden_dim_, hidden_sizes, act, action_dim_}, 0);
  } else {
    actor_ = make_mlp(*store_, "actor",
                      MlpSpec{static_cast<int>(obs_dim_), hidden_sizes, act, action_dim_}, 0);
  }
  load_params(c, *store_);
}

Tensor ExportedPolicy::act(const Tensor& obs, std::span<const float> reset_mask) {
  if (obs.rank() != 2 || obs.dim(1) != obs_dim_) {
    throw ShapeError("exported policy expects [B," + std::to_string(obs_dim_) + "] observations");
  }
  if (!gru_) return actor_.forward(obs);

  const int64_t B = obs.dim(0);
  if (!hidden_.defined() || hidden_.dim(0) != B) hidden_ = Tensor::zeros({B, hidden_dim_});
  if (!reset_mask.empty()) {
    auto h = hidden_.mutable_data();
    for (int64_t b = 0; b < B && b < static_cast<int64_t>(reset_mask.size()); ++b) {
      if (reset_mask[b] > 0.5f) std::fill_n(h.begin() + b * hidden_dim_, hidden_dim_, 0.0f);
    }
  }
  hidden_ = gru_->step(obs, hidden_);
  return actor_.forward(hidden_);
}

}  // namespace rlcore
