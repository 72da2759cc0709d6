// Command-line entry points: train, distill, eval, export.

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <iostream>

#include "rlcore/runner.hpp"

namespace {

struct TrainArgs {
  std::string config_path;
  int64_t seed = -1;
  std::string out_dir;
  std::string teacher;
  int workers = 1;
  int rank = 0;
  std::string coordinator = "127.0.0.1:7777";
};

rlcore::WorkerIdentity identity_from(const TrainArgs& args) {
  rlcore::WorkerIdentity id;
  id.world_size = args.workers;
  id.rank = args.rank;
  const auto colon = args.coordinator.rfind(':');
  if (colon == std::string::npos) {
    throw rlcore::ConfigError("--coordinator must be HOST:PORT");
  }
  id.coordinator_host = args.coordinator.substr(0, colon);
  id.coordinator_port =
      static_cast<uint16_t>(std::stoi(args.coordinator.substr(colon + 1)));
  return id;
}

int run_train(const TrainArgs& args, bool force_distill) {
  rlcore::RunConfig cfg = rlcore::RunConfig::from_file(args.config_path);
  if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
  if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
  if (!args.teacher.empty()) {
    cfg.expert_kind = rlcore::ExpertKind::kCheckpoint;
    cfg.teacher_path = args.teacher;
  }
  if (force_distill && cfg.algo != rlcore::AlgoKind::kDistill) {
    throw rlcore::ConfigError("the distill subcommand requires a config with a distill block");
  }
  auto result = rlcore::run_training(cfg, identity_from(args));
  if (!result.checkpoint_path.empty()) {
    std::cout << "checkpoint: " << result.checkpoint_path << "\n"
              << "metrics: " << result.metrics_path << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compact reinforcement-learning and distillation framework"};
  app.require_subcommand(1);

  TrainArgs train_args;
  auto add_common = [&](CLI::App* cmd, bool with_distributed) {
    cmd->add_option("--config", train_args.config_path, "run config JSON file")->required();
    cmd->add_option("--seed", train_args.seed, "override the config seed");
    cmd->add_option("--out", train_args.out_dir, "override the output directory");
    if (with_distributed) {
      cmd->add_option("--workers", train_args.workers, "data-parallel world size");
      cmd->add_option("--rank", train_args.rank, "rank of this worker");
      cmd->add_option("--coordinator", train_args.coordinator, "coordinator HOST:PORT");
    }
  };

  auto* train = app.add_subcommand("train", "train a policy per the config");
  add_common(train, true);

  auto* distill = app.add_subcommand("distill", "distill an expert into a student policy");
  add_common(distill, false);
  distill->add_option("--teacher", train_args.teacher, "teacher checkpoint path");

  std::string eval_ckpt;
  int eval_episodes = 100;
  bool eval_deterministic = false;
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  eval->add_option("--checkpoint", eval_ckpt, "checkpoint file")->required();
  eval->add_option("--episodes", eval_episodes, "number of episodes");
  eval->add_flag("--deterministic", eval_deterministic, "mean actions instead of sampling");

  std::string export_ckpt, export_out;
  auto* exportc = app.add_subcommand("export", "write a standalone policy file");
  exportc->add_option("--checkpoint", export_ckpt, "checkpoint file")->required();
  exportc->add_option("--out", export_out, "output path")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help() << std::endl;
    return 2;
  }

  try {
    if (train->parsed()) return run_train(train_args, false);
    if (distill->parsed()) return run_train(train_args, true);
    if (eval->parsed()) {
      auto report = rlcore::evaluate_checkpoint(eval_ckpt, eval_episodes, eval_deterministic);
      nlohmann::json out{{"mean_return", report.mean_return},
                         {"std_return", report.std_return},
                         {"mean_length", report.mean_length},
                         {"episodes", report.episodes}};
      out["success_rate"] =
          report.success_rate ? nlohmann::json(*report.success_rate) : nlohmann::json(nullptr);
      std::cout << out.dump() << std::endl;
      return 0;
    }
    if (exportc->parsed()) {
      rlcore::export_policy_file(export_ckpt, export_out);
      std::cout << "exported: " << export_out << std::endl;
      return 0;
    }
  } catch (const rlcore::ConfigError& e) {
    std::cerr << "config error: " << e.what() << std::endl;
    return 2;
  } catch (const rlcore::ArgumentError& e) {
    std::cerr << "argument error: " << e.what() << std::endl;
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << std::endl;
    return 1;
  }
  return 2;
}
