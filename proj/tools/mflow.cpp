// mflow: train, sample, evaluate and run inference with manifold-learning flows.
//
//   mflow train     --config exp.cfg [--seed N] [--out DIR] [--override key=value ...]
//   mflow sample    --config exp.cfg --checkpoint DIR/checkpoint.bin [--count N]
//   mflow eval      --config exp.cfg --checkpoint DIR/checkpoint.bin
//   mflow mcmc      --config exp.cfg --checkpoint DIR/checkpoint.bin
//   mflow landscape [--config exp.cfg]
//
// Exit codes: 0 success, 2 configuration or input error, 3 numerical abort.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "mflow/cli/commands.hpp"

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> out;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonOptions& o) {
  cmd->add_option("--config", o.config, "experiment config (dotted key = value lines)");
  cmd->add_option("--seed", o.seed, "overrides the config seed");
  cmd->add_option("--out", o.out, "output directory");
  cmd->add_option("--override", o.overrides, "key=value, applied after the config file (repeatable)");
}

mflow::cli::ExperimentConfig load_config(const CommonOptions& o) {
  using namespace mflow::cli;
  KeyValues kv;
  if (!o.config.empty()) {
    std::ifstream is(o.config);
    if (!is) throw ConfigError("cannot read config '" + o.config + "'");
    std::stringstream ss;
    ss << is.rdbuf();
    kv = parse_key_values(ss.str());
  }
  for (const auto& s : o.overrides) {
    const auto [k, v] = parse_override(s);
    kv[k] = v;
  }
  if (o.seed) kv["seed"] = std::to_string(*o.seed);
  if (o.out) kv["out"] = *o.out;
  return ExperimentConfig::from_map(kv);
}

}  // namespace

int main(int argc, char** argv) {
  using namespace mflow;
  CLI::App app{"Manifold-learning flows: training, sampling, evaluation and inference"};
  app.require_subcommand(1);
  CommonOptions common;
  std::string checkpoint;
  long count = 1000;

  auto* train_cmd = app.add_subcommand("train", "train a model and write checkpoint.bin and train_log.csv");
  auto* sample_cmd = app.add_subcommand("sample", "draw samples from a checkpoint into samples.csv");
  auto* eval_cmd = app.add_subcommand("eval", "write report.txt and report.csv for a checkpoint");
  auto* mcmc_cmd = app.add_subcommand("mcmc", "posterior MCMC over θ with a conditional checkpoint");
  auto* land_cmd = app.add_subcommand("landscape", "loss landscape of the line toy model into landscape.csv");
  for (auto* cmd : {train_cmd, sample_cmd, eval_cmd, mcmc_cmd, land_cmd}) add_common(cmd, common);
  for (auto* cmd : {sample_cmd, eval_cmd, mcmc_cmd}) cmd->add_option("--checkpoint", checkpoint, "checkpoint file")->required();
  sample_cmd->add_option("--count", count, "number of samples");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? cli::kSuccess : cli::kConfigError;
  }

  try {
    const auto cfg = load_config(common);
    if (train_cmd->parsed()) {
      const auto r = cli::run_train(cfg, std::cout);
      std::cout << "wrote " << r.checkpoint.string() << " and " << r.loss_csv.string() << '\n';
    } else if (sample_cmd->parsed()) {
      cli::run_sample(cfg, checkpoint, count, std::cout);
    } else if (eval_cmd->parsed()) {
      cli::run_eval(cfg, checkpoint, std::cout);
    } else if (mcmc_cmd->parsed()) {
      cli::run_mcmc(cfg, checkpoint, std::cout);
    } else {
      cli::run_landscape(cfg, std::cout);
    }
    return cli::kSuccess;
  } catch (const cli::ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return cli::kConfigError;
  } catch (const io::FormatError& e) {
    std::cerr << "input error: " << e.what() << '\n';
    return cli::kConfigError;
  } catch (const NumericalError& e) {
    std::cerr << "numerical abort: " << e.what() << '\n';
    return cli::kNumericalAbort;
  } catch (const std::logic_error& e) {
    // ContractViolation and UnsupportedConfiguration: the request itself is invalid.
    std::cerr << "invalid request: " << e.what() << '\n';
    return cli::kConfigError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return cli::kFailure;
  }
}
