// defgrasp CLI: dataset generation, training, held-out evaluation, the
// stiffness-error sweep and report assembly. Exit codes: 0 success, 1 for
// configuration problems, 2 for runtime failures.
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "defgrasp/pipeline.hpp"

namespace {

namespace fs = std::filesystem;
using namespace defgrasp;

struct CommonArgs {
  std::string config;
  std::optional<uint64_t> seed;
  std::optional<int> jobs;
  std::optional<std::string> out;
};

void add_common(CLI::App* cmd, CommonArgs& args, bool config_required) {
  auto* c = cmd->add_option("--config", args.config, "run configuration file (JSON)");
  if (config_required) c->required();
  cmd->add_option("--seed", args.seed, "override the config seed");
  cmd->add_option("--jobs", args.jobs, "override the worker count");
  cmd->add_option("--out", args.out, "override the output directory");
}

pipeline::RunConfig resolve(const CommonArgs& args) {
  pipeline::RunConfig config = pipeline::load_config(args.config);
  pipeline::Overrides overrides;
  overrides.seed = args.seed;
  overrides.jobs = args.jobs;
  overrides.out = args.out;
  pipeline::apply_overrides(config, overrides);
  return config;
}

fs::path checkpoint_or_default(const std::string& flag, const pipeline::RunConfig& config) {
  if (!flag.empty()) return flag;
  return fs::path(config.out) / "model_2ch.gnet";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"stiffness-aware grasp synthesis pipeline"};
  app.require_subcommand(1);

  CommonArgs gen_args, train_args, eval_args, sens_args, report_args;
  bool no_stiffness = false;
  std::string eval_checkpoint, sens_checkpoint;

  CLI::App* gen = app.add_subcommand("gen-dataset", "simulate grasps and write training tensors");
  add_common(gen, gen_args, true);

  CLI::App* train = app.add_subcommand("train", "fit the network on a generated dataset");
  add_common(train, train_args, true);
  train->add_flag("--no-stiffness", no_stiffness,
                  "train the depth-only baseline (1 input channel)");

  CLI::App* evalc = app.add_subcommand("eval", "benchmark a checkpoint on the held-out objects");
  add_common(evalc, eval_args, true);
  evalc->add_option("--checkpoint", eval_checkpoint,
                    "model file (default <out>/model_2ch.gnet)");

  CLI::App* sens = app.add_subcommand("sensitivity",
                                      "sweep synthetic stiffness-measurement error");
  add_common(sens, sens_args, true);
  sens->add_option("--checkpoint", sens_checkpoint,
                   "model file (default <out>/model_2ch.gnet)");

  CLI::App* report = app.add_subcommand("report", "summarize a finished run as markdown");
  add_common(report, report_args, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 1;
  }

  try {
    if (gen->parsed()) {
      pipeline::gen_dataset(resolve(gen_args));
    } else if (train->parsed()) {
      pipeline::train_cmd(resolve(train_args), !no_stiffness);
    } else if (evalc->parsed()) {
      const pipeline::RunConfig config = resolve(eval_args);
      pipeline::eval_cmd(config, checkpoint_or_default(eval_checkpoint, config));
    } else if (sens->parsed()) {
      const pipeline::RunConfig config = resolve(sens_args);
      pipeline::sensitivity_cmd(config, checkpoint_or_default(sens_checkpoint, config));
    } else if (report->parsed()) {
      std::string dir;
      if (!report_args.config.empty())
        dir = resolve(report_args).out;
      else if (report_args.out)
        dir = *report_args.out;
      if (dir.empty())
        throw pipeline::ConfigError("report needs --config or --out to locate the run");
      pipeline::report_cmd(dir);
    }
  } catch (const pipeline::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
