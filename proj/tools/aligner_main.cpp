// SPDX-License-Identifier: Apache-2.0

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "aligner/config.hpp"
#include "aligner/data.hpp"
#include "aligner/layout.hpp"
#include "aligner/ppo.hpp"
#include "aligner/report.hpp"
#include "aligner/trainers.hpp"

namespace {

using namespace aligner;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

struct CommonOpts {
  std::string config_path;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::string out;
};

void add_common(CLI::App* cmd, CommonOpts& opts) {
  cmd->add_option("--config", opts.config_path, "run configuration file");
  cmd->add_option("--preset", opts.preset, "named preset: ppo-default | dpo-zephyr | spin-default");
  cmd->add_option("--seed", opts.seed, "seed override");
  cmd->add_option("--out", opts.out, "output directory override");
}

RunConfig resolve_config(const CommonOpts& opts) {
  RunConfig config;
  if (!opts.preset.empty()) config = preset_config(opts.preset);
  if (!opts.config_path.empty()) {
    RunConfig from_file = load_config_file(opts.config_path);
    config = from_file;  // explicit file wins over preset defaults
  }
  if (opts.seed) config.seed = *opts.seed;
  if (!opts.out.empty()) config.out_dir = opts.out;
  // Addresses (only) may come from the environment.
  if (const char* host = std::getenv("ALIGNER_CRITIC_HOST")) config.critic_host = host;
  if (const char* port = std::getenv("ALIGNER_CRITIC_PORT")) {
    config.critic_port = static_cast<std::uint16_t>(std::stoul(port));
  }
  config.trainer.seed = config.seed;
  return config;
}

DatasetKind dataset_kind_for_algorithm(const std::string& algorithm) {
  if (algorithm == "sft" || algorithm == "spin") return DatasetKind::kSft;
  if (algorithm == "steerlm") return DatasetKind::kSteerlm;
  return DatasetKind::kPreference;
}

int run_offline_trainer(const std::string& algorithm, const CommonOpts& opts) {
  RunConfig config = resolve_config(opts);
  config.trainer.algorithm = algorithm;
  if (config.data_path.empty()) {
    std::cerr << "error: paths.data must point at a dataset\n";
    return kExitValidation;
  }
  const Dataset dataset = load_dataset(config.data_path, dataset_kind_for_algorithm(algorithm));

  std::optional<ModelParams> init;
  if (!config.init_checkpoint.empty()) {
    init = load_checkpoint(config.init_checkpoint);
  }
  std::optional<ModelParams> reference;
  if (!config.reference_checkpoint.empty()) {
    reference = load_checkpoint(config.reference_checkpoint);
  }
  // Preference training starts the policy from the reference weights unless
  // an explicit starting point was given.
  if (!init && reference) init = reference->clone();

  const TrainResult result =
      run_training(config.trainer, config.model, dataset, init, reference);

  std::filesystem::create_directories(config.out_dir);
  const std::string ckpt = config.out_dir + "/" + algorithm + ".ckpt";
  save_checkpoint(result.params, ckpt);
  const std::string log = config.out_dir + "/" + algorithm + "_train.tsv";
  write_train_log(log, result);

  std::cout << "trained " << algorithm << " for " << result.log.size() << " steps\n";
  if (!result.log.empty()) {
    std::cout << "final loss " << result.log.back().loss << " (" << result.extra_name << " "
              << result.log.back().extra << ")\n";
  }
  if (algorithm == "rm") {
    std::cout << "preference accuracy " << rm_accuracy(result.params, dataset) << "\n";
  }
  std::cout << "checkpoint " << ckpt << "\nlog " << log << "\n";
  return kExitOk;
}

int run_validate_data(const std::string& path, const std::string& kind_name) {
  const auto kind = dataset_kind_from_name(kind_name);
  const auto report = validate_dataset_file(path, kind);
  for (const auto& issue : report.issues) {
    std::cerr << path << ":" << issue.line << ": " << issue.message << "\n";
  }
  std::cout << report.valid_records << " valid " << dataset_kind_name(kind) << " records, "
            << report.issues.size() << " bad lines\n";
  return report.ok() ? kExitOk : kExitValidation;
}

int run_plan_layout(const CommonOpts& opts) {
  RunConfig config = resolve_config(opts);
  const ShardPlan shard_plan = plan(config.model, config.layout);
  std::cout << shard_plan.to_text();
  return kExitOk;
}

int run_report(const std::string& log_path, const std::string& compare_path,
               const std::string& plot_out) {
  const auto records = read_metrics_log(log_path);
  const auto summary = summarize_metrics(records);
  if (compare_path.empty()) {
    std::cout << render_report(summary);
  } else {
    const auto other = summarize_metrics(read_metrics_log(compare_path));
    std::cout << render_comparison(summary, other);
  }
  if (!plot_out.empty()) {
    write_plot_data(plot_out, records);
    std::cout << "plot data " << plot_out << "\n";
  }
  return kExitOk;
}

int run_ppo_run(const CommonOpts& opts) {
  RunConfig config = resolve_config(opts);
  const auto result = run_ppo(config.to_ppo_run_config());
  std::cout << "ppo finished " << result.records.size() << " steps\n";
  if (!result.records.empty()) {
    std::cout << "reward_mean first " << result.records.front().metrics.reward_mean << " last "
              << result.records.back().metrics.reward_mean << "\n";
  }
  std::cout << "metrics " << result.metrics_path << "\npolicy " << result.policy_checkpoint
            << "\ncritic " << result.critic_checkpoint << "\n";
  return kExitOk;
}

int run_ppo_actor(const CommonOpts& opts) {
  RunConfig config = resolve_config(opts);
  if (config.critic_port == 0) {
    std::cerr << "error: runtime.critic_port must name the critic service port\n";
    return kExitValidation;
  }
  const auto result =
      run_actor_loop(config.to_ppo_run_config(), config.critic_host, config.critic_port);
  std::cout << "actor finished " << result.records.size() << " steps, metrics "
            << result.metrics_path << "\n";
  return kExitOk;
}

int run_ppo_critic(const CommonOpts& opts) {
  RunConfig config = resolve_config(opts);
  ModelConfig critic_config = config.model;
  critic_config.scalar_head = true;
  ModelParams critic = config.init_checkpoint.empty()
                           ? init_params(critic_config, config.seed + 1)
                           : load_checkpoint(config.init_checkpoint, critic_config);
  ModelParams reward_model = critic.clone();

  CriticJobOptions critic_opts;
  critic_opts.hyper = config.ppo;
  critic_opts.scripted_reward = config.ppo_scripted_reward;
  critic_opts.scripted_target_token = config.ppo_scripted_target;
  critic_opts.train_delay_seconds = config.ppo_debug_train_delay_s;
  critic_opts.lr = config.ppo_critic_lr;
  critic_serve_forever(critic, reward_model, critic_opts, config.critic_host, config.critic_port,
                       config.max_frame);
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale model alignment toolkit"};
  app.require_subcommand(1);

  CommonOpts sft_opts, rm_opts, dpo_opts, steerlm_opts, spin_opts;
  CommonOpts ppo_run_opts, ppo_actor_opts, ppo_critic_opts, plan_opts;
  std::string dpo_variant = "dpo";

  auto* sft = app.add_subcommand("sft", "supervised fine-tuning");
  add_common(sft, sft_opts);
  auto* rm = app.add_subcommand("rm", "reward model training");
  add_common(rm, rm_opts);
  auto* dpo = app.add_subcommand("dpo", "direct preference optimization (and variants)");
  add_common(dpo, dpo_opts);
  dpo->add_option("--variant", dpo_variant, "dpo | ipo | cdpo | kto");
  auto* steerlm = app.add_subcommand("steerlm", "attribute-conditioned fine-tuning");
  add_common(steerlm, steerlm_opts);
  auto* spin = app.add_subcommand("spin", "self-play fine-tuning");
  add_common(spin, spin_opts);

  auto* ppo_run = app.add_subcommand("ppo-run", "full PPO run (spawns the critic process)");
  add_common(ppo_run, ppo_run_opts);
  auto* ppo_actor = app.add_subcommand("ppo-actor", "actor loop against a running critic");
  add_common(ppo_actor, ppo_actor_opts);
  auto* ppo_critic = app.add_subcommand("ppo-critic", "critic + reward model service");
  add_common(ppo_critic, ppo_critic_opts);

  std::string vd_path, vd_kind = "sft";
  auto* validate = app.add_subcommand("validate-data", "check a line-delimited dataset");
  validate->add_option("file", vd_path, "dataset file")->required();
  validate->add_option("--kind", vd_kind, "sft | preference | steerlm | prompts");

  auto* plan_cmd = app.add_subcommand("plan-layout", "print the shard plan for the configured layout");
  add_common(plan_cmd, plan_opts);

  std::string report_log, report_compare, report_plot;
  auto* report_cmd = app.add_subcommand("report", "summarize a metrics log");
  report_cmd->add_option("log", report_log, "metrics log")->required();
  report_cmd->add_option("--compare", report_compare, "second log for relative speedups");
  report_cmd->add_option("--plot-out", report_plot, "write long-format plot data here");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*sft) return run_offline_trainer("sft", sft_opts);
    if (*rm) return run_offline_trainer("rm", rm_opts);
    if (*dpo) return run_offline_trainer(dpo_variant, dpo_opts);
    if (*steerlm) return run_offline_trainer("steerlm", steerlm_opts);
    if (*spin) return run_offline_trainer("spin", spin_opts);
    if (*ppo_run) return run_ppo_run(ppo_run_opts);
    if (*ppo_actor) return run_ppo_actor(ppo_actor_opts);
    if (*ppo_critic) return run_ppo_critic(ppo_critic_opts);
    if (*validate) return run_validate_data(vd_path, vd_kind);
    if (*plan_cmd) return run_plan_layout(plan_opts);
    if (*report_cmd) return run_report(report_log, report_compare, report_plot);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const PlanError& e) {
    std::cerr << "layout error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ContractError& e) {
    std::cerr << "invalid input: " << e.what() << "\n";
    return kExitValidation;
  } catch (const std::exception& e) {
    std::cerr << "runtime error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitOk;
}
