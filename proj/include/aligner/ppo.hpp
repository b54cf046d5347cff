// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_PPO_HPP_
#define ALIGNER_PPO_HPP_

#include <cstdint>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

#include "aligner/engine.hpp"
#include "aligner/losses.hpp"
#include "aligner/model.hpp"
#include "aligner/optim.hpp"
#include "aligner/rpc.hpp"
#include "aligner/timing.hpp"

namespace aligner {

struct PpoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Per-step wall-clock breakdown, one slot per instrumentation category.
struct StepTiming {
  std::size_t step = 0;
  double train = 0.0;
  double rollout = 0.0;
  double response_generation = 0.0;
  double logprob_calculation = 0.0;
  double refit = 0.0;
  double critic_wait = 0.0;

  void validate() const;
};

struct StepMetrics {
  double reward_mean = 0.0;
  double kl_mean = 0.0;
  double loss_actor = 0.0;
  double loss_critic = 0.0;  // reply to the previous step's training request
};

struct StepRecord {
  StepTiming timing;
  StepMetrics metrics;
};

/// Metrics log: header comments, then one tab-separated line per step with
/// step, reward_mean, kl_mean, loss_actor, loss_critic and the six timing
/// categories in fixed order.
void write_metrics_log(const std::string& path, const std::vector<StepRecord>& records,
                       double engine_build_seconds);
std::vector<StepRecord> read_metrics_log(const std::string& path);

// Which weight set is active in a two-model job.
enum class ActorModel { kPolicy, kReference };
enum class CriticModel { kCritic, kRewardModel };

/// Policy plus the parked reference weights, the inference engine, the
/// optimizer, and the connection to the critic service.
struct ActorJob {
  ModelConfig config;
  ModelParams active;
  ModelParams parked;
  ActorModel active_kind = ActorModel::kPolicy;
  std::unique_ptr<Engine> engine;
  AdamW optimizer;
  rpc::Client critic;
  rpc::PendingHandle pending_train;  // previous step's critic-train request
  double pending_train_loss = 0.0;
  double extra_rollout_seconds = 0.0;  // test hook: synthetic rollout work

  ModelParams& policy();
  const ModelParams& policy() const;
};

/// Swaps the active and parked weight sets; a no-op when already active.
void swap_weights(ActorJob& job, ActorModel target);

struct CriticJobOptions {
  PpoHyper hyper;
  bool scripted_reward = false;
  std::int32_t scripted_target_token = 'z';
  double train_delay_seconds = 0.0;  // test hook: slows the train handler
  double lr = 1e-3;
};

/// Critic plus the parked reward model behind the rpc dispatch table.
class CriticJob {
 public:
  CriticJob(ModelParams critic, ModelParams reward_model, CriticJobOptions opts);

  /// Registers infer_rm_critic / train_critic / save_critic handlers.
  void attach(rpc::Server& server);

  nlohmann::json handle_infer(const nlohmann::json& body);
  nlohmann::json handle_train(const nlohmann::json& body);
  nlohmann::json handle_save(const nlohmann::json& body);

  std::uint64_t train_steps() const { return train_steps_; }
  const ModelParams& critic_params() const { return active_kind_ == CriticModel::kCritic ? active_ : parked_; }

 private:
  void swap_to(CriticModel target);
  double scripted_reward_for(const TokenSeq& tokens, std::size_t response_start) const;

  ModelConfig config_;
  ModelParams active_;
  ModelParams parked_;
  CriticModel active_kind_ = CriticModel::kCritic;
  CriticJobOptions opts_;
  AdamW optimizer_;
  std::mutex model_mu_;  // barrier: inference never overlaps training
  std::uint64_t train_steps_ = 0;
};

struct PpoStepOptions {
  std::size_t max_new = 16;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  double critic_timeout_seconds = 120.0;
};

/// One PPO iteration: generate, request rewards/values, recompute log-probs
/// with the reference swap, wait for the critic, optimize the policy, hand
/// the critic its training batch, refit the engine.
StepRecord ppo_step(ActorJob& job, const std::vector<TokenSeq>& prompts, const PpoHyper& hyper,
                    std::size_t step_index, const PpoStepOptions& opts);

struct PpoRunConfig {
  ModelConfig model;
  PpoHyper hyper;
  std::size_t steps = 30;
  std::size_t prompts_per_step = 8;
  std::size_t max_new = 16;
  double temperature = 1.0;
  std::uint64_t seed = 0;
  std::size_t gen_workers = 1;
  double actor_lr = 3e-3;
  double critic_lr = 1e-3;
  bool scripted_reward = true;
  std::int32_t scripted_target_token = 'z';
  std::vector<std::string> prompts;
  std::string prompts_file;  // JSONL alternative to inline prompts
  std::string out_dir;
  std::string policy_init_checkpoint;
  std::string critic_init_checkpoint;
  double debug_train_delay_seconds = 0.0;
  double debug_extra_rollout_seconds = 0.0;
  double simulated_token_latency = 0.0;
  std::size_t max_frame = rpc::kDefaultMaxFrame;
};

struct PpoRunResult {
  std::vector<StepRecord> records;
  double engine_build_seconds = 0.0;
  std::string metrics_path;
  std::string policy_checkpoint;
  std::string critic_checkpoint;
};

/// Observer invoked in the actor after every completed step.
using StepHook = std::function<void(const ActorJob&, const StepRecord&)>;

/// Launches the critic as a separate process, runs the actor loop against it
/// over the wire, writes the metrics log and final checkpoints.
PpoRunResult run_ppo(const PpoRunConfig& config, const StepHook& hook = {});

/// Actor side only, against an already-listening critic service.
PpoRunResult run_actor_loop(const PpoRunConfig& config, const std::string& host,
                            std::uint16_t port, const StepHook& hook = {});

/// Serves a critic job on the given address until the process is signalled;
/// used by the standalone critic entry point.
void critic_serve_forever(const ModelParams& critic, const ModelParams& reward_model,
                          const CriticJobOptions& opts, const std::string& host,
                          std::uint16_t port, std::size_t max_frame = rpc::kDefaultMaxFrame);

}  // namespace aligner

#endif  // ALIGNER_PPO_HPP_
