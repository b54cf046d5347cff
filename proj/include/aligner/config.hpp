// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_CONFIG_HPP_
#define ALIGNER_CONFIG_HPP_

#include <string>
#include <vector>

#include "aligner/layout.hpp"
#include "aligner/model.hpp"
#include "aligner/ppo.hpp"
#include "aligner/trainers.hpp"

namespace aligner {

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Full run configuration tree. Serialized as dotted key = value lines;
/// unknown keys are rejected at parse time.
struct RunConfig {
  std::uint64_t seed = 0;

  ModelConfig model;  // lora settings live in trainer.*; scalar_head is derived

  TrainerConfig trainer;

  ParallelLayout layout;

  // PPO runtime.
  PpoHyper ppo;
  std::size_t ppo_steps = 30;
  std::size_t ppo_prompts_per_step = 8;
  std::size_t ppo_max_new = 16;
  double ppo_temperature = 1.0;
  std::size_t ppo_gen_workers = 1;
  double ppo_actor_lr = 3e-3;
  double ppo_critic_lr = 1e-3;
  bool ppo_scripted_reward = true;
  std::int32_t ppo_scripted_target = 'z';
  double ppo_debug_train_delay_s = 0.0;
  double ppo_debug_extra_rollout_s = 0.0;
  double ppo_simulated_token_latency = 0.0;

  std::string critic_host = "127.0.0.1";
  std::uint16_t critic_port = 0;
  std::size_t max_frame = 16 * 1024 * 1024;

  std::string data_path;
  std::string prompts_path;
  std::string out_dir = "out";
  std::string init_checkpoint;
  std::string reference_checkpoint;

  PpoRunConfig to_ppo_run_config() const;
};

RunConfig parse_config_text(const std::string& text);
std::string serialize_config(const RunConfig& config);
RunConfig load_config_file(const std::string& path);
void save_config_file(const RunConfig& config, const std::string& path);

/// Shipped hyperparameter recipes.
std::vector<std::string> preset_names();
RunConfig preset_config(const std::string& name);

}  // namespace aligner

#endif  // ALIGNER_CONFIG_HPP_
