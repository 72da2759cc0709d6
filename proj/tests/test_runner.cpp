#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <thread>

#include "rlcore/checkpoint.hpp"
#include "rlcore/runner.hpp"

using namespace rlcore;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

fs::path temp_dir(const std::string& name) {
  auto dir = fs::temp_directory_path() / ("rlcore_test_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

RunConfig tiny_config(const std::string& out_dir) {
  RunConfig cfg;
  cfg.env_name = "point_mass";
  cfg.num_envs = 8;
  cfg.max_iterations = 3;
  cfg.ppo.rollout_horizon = 6;
  cfg.hidden_sizes = {16};
  cfg.checkpoint_interval = 2;
  cfg.out_dir = out_dir;
  cfg.seed = 5;
  return cfg;
}

std::vector<uint8_t> file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in);
  return std::vector<uint8_t>((std::istreambuf_iterator<char>(in)),
                              std::istreambuf_iterator<char>());
}

// Metrics lines with the run-dependent timing fields removed.
std::vector<std::string> stable_metrics(const std::string& path) {
  std::ifstream in(path);
  REQUIRE(in);
  std::vector<std::string> lines;
  std::string line;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    j.erase("wall_time_s");
    j.erase("steps_per_second");
    lines.push_back(j.dump());
  }
  return lines;
}

}  // namespace

TEST_CASE("config parsing rejects malformed input") {
  json good = tiny_config("x").to_json();
  RunConfig::from_json(good).validate();

  SUBCASE("unknown keys") {
    auto bad = good;
    bad["typo"] = 1;
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
  SUBCASE("zero or two algo blocks") {
    auto bad = good;
    bad["algo"] = json::object();
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
    bad["algo"] = {{"ppo", json::object()}, {"distill", json::object()}};
    CHECK_THROWS_AS(RunConfig::from_json(bad), ConfigError);
  }
  SUBCASE("extensions with distill") {
    auto bad = good;
    bad["algo"] = {{"distill", json::object()}};
    bad["extensions"] = {{"rnd", json::object()}};
    CHECK_THROWS_AS(RunConfig::from_json(bad).validate(), ConfigError);
  }
  SUBCASE("unknown env") {
    auto bad = good;
    bad["env"]["name"] = "walker";
    CHECK_THROWS_AS(RunConfig::from_json(bad).validate(), ConfigError);
  }
  SUBCASE("round trip is stable") {
    auto twice = RunConfig::from_json(good).to_json();
    CHECK(twice == good);
    CHECK(twice.dump() == good.dump());
  }
}

TEST_CASE("zero-iteration run writes the checkpoint and an empty metrics body") {
  auto dir = temp_dir("zero_iters");
  auto cfg = tiny_config(dir.string());
  cfg.max_iterations = 0;
  auto result = run_training(cfg);
  CHECK(fs::exists(result.checkpoint_path));
  CHECK(fs::exists(result.metrics_path));
  CHECK(fs::file_size(result.metrics_path) == 0);

  auto lp = load_policy(result.checkpoint_path);
  CHECK(lp.header.at("iteration") == 0);
}

TEST_CASE("training runs are bit-deterministic apart from wall-clock fields") {
  // the config (including out_dir) is echoed into the checkpoint, so the
  // repeat run must use the identical config; stash the first run's files
  auto dir = temp_dir("det");
  auto stash = temp_dir("det_stash");
  auto cfg = tiny_config((dir / "run").string());
  auto ra = run_training(cfg);
  fs::copy(ra.checkpoint_path, stash / "ckpt");
  fs::copy(ra.metrics_path, stash / "metrics");
  auto rb = run_training(cfg);

  CHECK(file_bytes((stash / "ckpt").string()) == file_bytes(rb.checkpoint_path));
  CHECK(stable_metrics((stash / "metrics").string()) == stable_metrics(rb.metrics_path));

  SUBCASE("metrics lines parse independently and carry the stable schema") {
    std::ifstream in(ra.metrics_path);
    std::string line;
    int count = 0;
    while (std::getline(in, line)) {
      auto j = json::parse(line);
      for (const char* key :
           {"iteration", "total_env_steps", "wall_time_s", "mean_episode_return",
            "mean_episode_length", "surrogate_loss", "value_loss", "entropy", "approx_kl",
            "learning_rate", "clip_fraction", "steps_per_second"}) {
        CHECK(j.contains(key));
      }
      ++count;
    }
    CHECK(count == 3);
  }
}

TEST_CASE("checkpoint save -> load -> save is byte-identical") {
  auto dir = temp_dir("roundtrip");
  auto result = run_training(tiny_config(dir.string()));
  auto original = file_bytes(result.checkpoint_path);

  Container c = read_container(result.checkpoint_path, kCheckpointMagic);
  const std::string copy = (dir / "copy.ckpt").string();
  write_container(copy, kCheckpointMagic, c.header, c.data);
  CHECK(file_bytes(copy) == original);

  SUBCASE("corrupt files are rejected with a format error") {
    auto bytes = original;
    bytes[3] = 'X';
    const std::string bad = (dir / "bad.ckpt").string();
    std::ofstream(bad, std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
    CHECK_THROWS_AS(read_container(bad, kCheckpointMagic), FormatError);

    auto short_bytes = original;
    short_bytes.pop_back();
    const std::string truncated = (dir / "short.ckpt").string();
    std::ofstream(truncated, std::ios::binary)
        .write(reinterpret_cast<const char*>(short_bytes.data()), short_bytes.size());
    CHECK_THROWS_WITH_AS(read_container(truncated, kCheckpointMagic),
                         doctest::Contains("length mismatch"), FormatError);
  }
}

TEST_CASE("evaluation") {
  auto dir = temp_dir("eval");
  auto result = run_training(tiny_config(dir.string()));

  SUBCASE("deterministic evaluation twice gives identical numbers") {
    auto a = evaluate_checkpoint(result.checkpoint_path, 16, true);
    auto b = evaluate_checkpoint(result.checkpoint_path, 16, true);
    CHECK(a.mean_return == b.mean_return);
    CHECK(a.std_return == b.std_return);
    CHECK(a.mean_length == b.mean_length);
    CHECK(a.episodes == 16);
    CHECK_FALSE(a.success_rate.has_value());  // point_mass has no success notion
  }

  SUBCASE("zero episodes is an error") {
    CHECK_THROWS_AS(evaluate_checkpoint(result.checkpoint_path, 0, true), ArgumentError);
  }

  SUBCASE("missing checkpoint names the path") {
    CHECK_THROWS_WITH_AS(evaluate_checkpoint("/nope/missing.ckpt", 4, true),
                         doctest::Contains("missing.ckpt"), FormatError);
  }
}

TEST_CASE("export produces a smaller file that reproduces mean actions") {
  auto dir = temp_dir("export");
  auto result = run_training(tiny_config(dir.string()));
  const std::string out = (dir / "policy.bin").string();
  export_policy_file(result.checkpoint_path, out);
  CHECK(fs::file_size(out) < fs::file_size(result.checkpoint_path));

  auto lp = load_policy(result.checkpoint_path);
  ExportedPolicy exported(out);
  RngStream rng(9, StreamTag::kTest, {50});
  for (int rep = 0; rep < 10; ++rep) {
    auto x = Tensor::uniform({100, 2}, rng, -1.0f, 1.0f);
    ObservationSet obs;
    obs.groups.emplace("policy", x);
    obs.groups.emplace("critic", x);
    auto mu = policy_mean(lp.net, obs);
    auto out_actions = exported.act(x);
    for (int64_t i = 0; i < mu.numel(); ++i) {
      CHECK(out_actions.data()[i] == doctest::Approx(mu.data()[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("recurrent export replays hidden trajectories") {
  auto dir = temp_dir("export_recurrent");
  auto cfg = tiny_config(dir.string());
  cfg.env_name = "memory_recall";
  cfg.recurrent = true;
  cfg.hidden_dim = 8;
  auto result = run_training(cfg);
  const std::string out = (dir / "policy.bin").string();
  export_policy_file(result.checkpoint_path, out);

  auto lp = load_policy(result.checkpoint_path);
  ExportedPolicy exported(out);
  RngStream rng(10, StreamTag::kTest, {51});
  Tensor hidden = Tensor::zeros({3, 8});
  for (int t = 0; t < 20; ++t) {
    auto x = Tensor::uniform({3, 3}, rng, -1.0f, 1.0f);
    ObservationSet obs;
    obs.groups.emplace("policy", x);
    Tensor next;
    Tensor mu = policy_mean(lp.net, obs, &hidden, &next);
    hidden = next;
    auto actions = exported.act(x);
    for (int64_t i = 0; i < mu.numel(); ++i) {
      CHECK(actions.data()[i] == doctest::Approx(mu.data()[i]).epsilon(1e-6));
    }
  }
}

TEST_CASE("distillation end to end through the runner") {
  auto dir = temp_dir("distill_runner");
  RunConfig cfg;
  cfg.env_name = "point_mass";
  cfg.num_envs = 8;
  cfg.algo = AlgoKind::kDistill;
  cfg.distill.rollout_horizon = 8;
  cfg.max_iterations = 4;
  cfg.hidden_sizes = {16};
  cfg.out_dir = dir.string();
  cfg.seed = 3;
  auto result = run_training(cfg);
  CHECK(fs::exists(result.checkpoint_path));

  std::ifstream in(result.metrics_path);
  std::string line;
  int lines = 0;
  while (std::getline(in, line)) {
    auto j = json::parse(line);
    CHECK(j.at("distill_loss").is_number());
    CHECK(j.at("surrogate_loss").is_null());
    ++lines;
  }
  CHECK(lines == 4);
}

namespace {

// Counts interface calls to pin down the runner/env seam.
class CountingEnv : public VecEnv {
 public:
  explicit CountingEnv(int num_envs) {
    spec_.num_envs = num_envs;
    spec_.action_dim = 1;
    spec_.action_lo = {-1.0f};
    spec_.action_hi = {1.0f};
    spec_.max_episode_length = 100;
    spec_.schema = {{"policy", 1}, {"critic", 1}};
  }
  ObservationSet reset_all(uint64_t) override {
    ++resets;
    return obs();
  }
  StepResult step(const Tensor&) override {
    ++steps;
    StepResult r;
    r.obs = obs();
    r.reward = Tensor::zeros({spec_.num_envs});
    r.terminated.assign(spec_.num_envs, 0);
    r.timeout.assign(spec_.num_envs, 0);
    r.terminal_obs.groups.emplace("policy", Tensor::zeros({0, 1}));
    r.terminal_obs.groups.emplace("critic", Tensor::zeros({0, 1}));
    return r;
  }
  int steps = 0;
  int resets = 0;

 private:
  ObservationSet obs() const {
    ObservationSet o;
    o.groups.emplace("policy", Tensor::zeros({spec_.num_envs, 1}));
    o.groups.emplace("critic", Tensor::zeros({spec_.num_envs, 1}));
    return o;
  }
};

}  // namespace

TEST_CASE("the collector touches the environment only through the contract") {
  CountingEnv env(4);
  ParamStore store;
  auto net = make_actor_critic(store, env.spec().schema, ActorCriticConfig{.action_dim = 1}, 1);
  RolloutCollector collector(env, 2);
  CHECK(env.resets == 1);
  PpoConfig cfg;
  for (int it = 0; it < 5; ++it) collector.collect(net, 7, cfg);
  CHECK(env.steps == 35);  // exactly T steps per iteration
  CHECK(env.resets == 1);  // and no extra resets
}

#ifdef RLCORE_CLI_PATH
TEST_CASE("command line interface exit codes") {
  const std::string cli = RLCORE_CLI_PATH;
  auto dir = temp_dir("cli");

  auto run = [](const std::string& cmd) {
    const int status = std::system((cmd + " > /dev/null 2>&1").c_str());
    return WEXITSTATUS(status);
  };

  CHECK(run(cli) == 2);                     // no arguments: usage, exit 2
  CHECK(run(cli + " train --bogus") == 2);  // unknown flag
  CHECK(run(cli + " eval --checkpoint /nope/missing.ckpt --episodes 2") == 1);

  // a malformed config is a validation error
  const std::string bad_cfg = (dir / "bad.json").string();
  std::ofstream(bad_cfg) << "{\"env\": {\"name\": \"walker\"}, \"algo\": {\"ppo\": {}}}";
  CHECK(run(cli + " train --config " + bad_cfg) == 2);

  // a real tiny run exits 0 and produces artifacts
  const std::string cfg_path = (dir / "tiny.json").string();
  auto cfg = tiny_config((dir / "run").string());
  std::ofstream(cfg_path) << cfg.to_json().dump();
  CHECK(run(cli + " train --config " + cfg_path) == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint_final.ckpt"));
  CHECK(run(cli + " eval --checkpoint " + (dir / "run" / "checkpoint_final.ckpt").string() +
            " --episodes 4 --deterministic") == 0);
  const std::string exported = (dir / "exported.bin").string();
  CHECK(run(cli + " export --checkpoint " + (dir / "run" / "checkpoint_final.ckpt").string() +
            " --out " + exported) == 0);
  CHECK(fs::exists(exported));
}

TEST_CASE("two-process distributed training via the CLI") {
  const std::string cli = RLCORE_CLI_PATH;
  auto dir = temp_dir("cli_dist");
  const uint16_t port = pick_free_port();

  auto cfg = tiny_config((dir / "run").string());
  cfg.num_envs = 4;
  const std::string cfg_path = (dir / "dist.json").string();
  std::ofstream(cfg_path) << cfg.to_json().dump();

  auto launch = [&](int rank) {
    std::string cmd = cli + " train --config " + cfg_path + " --workers 2 --rank " +
                      std::to_string(rank) + " --coordinator 127.0.0.1:" + std::to_string(port) +
                      " > /dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
  };

  int code0 = -1, code1 = -1;
  std::thread t0([&]() { code0 = launch(0); });
  std::thread t1([&]() { code1 = launch(1); });
  t0.join();
  t1.join();
  CHECK(code0 == 0);
  CHECK(code1 == 0);
  CHECK(fs::exists(dir / "run" / "checkpoint_final.ckpt"));  // rank 0 owns the checkpoint
}
#endif
