#include <cstdlib>
#include <iostream>

#include "CLI11.hpp"
#include "lyapctl/experiment.hpp"

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> episodes;
  std::optional<std::string> output_dir;
  std::optional<std::string> algo;
  std::optional<std::string> env;
  std::optional<std::size_t> parallel;
};

void add_common(CLI::App* cmd, Flags& f) {
  cmd->add_option("--config", f.config, "configuration file");
  cmd->add_option("--seed", f.seed, "random seed (overrides LYAPCTL_SEED and the config)");
  cmd->add_option("--episodes", f.episodes, "training episodes");
  cmd->add_option("--output-dir", f.output_dir, "output directory");
  cmd->add_option("--algo", f.algo, "algorithm");
  cmd->add_option("--env", f.env, "environment");
  cmd->add_option("--parallel", f.parallel, "worker threads for sweeps");
}

lyapctl::ExperimentConfig resolve(const Flags& f) {
  lyapctl::ExperimentConfig c = f.config.empty() ? lyapctl::ExperimentConfig{} : lyapctl::load_config(f.config);
  if (const char* s = std::getenv("LYAPCTL_SEED"); s && *s) {
    try {
      c.seeds = {lyapctl::detail::to_count(s)};
    } catch (const std::exception&) {
      throw lyapctl::ConfigError(std::string("LYAPCTL_SEED: not a seed: '") + s + "'");
    }
  }
  if (f.seed) c.seeds = {*f.seed};
  c.train.seed = c.seeds.empty() ? 0 : c.seeds.front();
  if (f.episodes) c.train.episodes = *f.episodes;
  if (f.output_dir) c.output_dir = *f.output_dir;
  if (f.algo) {
    try {
      c.algos = {lyapctl::parse_algo(*f.algo)};
    } catch (const std::exception& e) {
      throw lyapctl::ConfigError(e.what());
    }
  }
  if (f.env) c.env = *f.env;
  if (f.parallel) c.parallel = *f.parallel;
  lyapctl::validate(c);
  return c;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Lyapunov-constrained hierarchical RL for stochastic control"};
  app.require_subcommand(1);
  Flags train_f, eval_f, sweep_f;
  std::string checkpoint;
  std::size_t rollouts = 0;
  auto* train = app.add_subcommand("train", "train one algorithm on one seed");
  add_common(train, train_f);
  auto* evaluate = app.add_subcommand("evaluate", "evaluate a checkpoint");
  add_common(evaluate, eval_f);
  evaluate->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  evaluate->add_option("--rollouts", rollouts, "evaluation rollouts per seed");
  auto* sweep = app.add_subcommand("sweep", "train every algorithm and seed in the config");
  add_common(sweep, sweep_f);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : lyapctl::kExitConfig;
  }

  try {
    if (*train) return lyapctl::cmd_train(resolve(train_f));
    if (*sweep) return lyapctl::cmd_sweep(resolve(sweep_f));
    if (*evaluate) {
      auto c = resolve(eval_f);
      if (rollouts) c.eval_rollouts = rollouts;
      return lyapctl::cmd_evaluate(checkpoint, c);
    }
  } catch (const lyapctl::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return lyapctl::kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return lyapctl::kExitPartial;
  }
  return lyapctl::kExitOk;
}
