// SPDX-License-Identifier: Apache-2.0

#include "aligner/ppo.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

#include "aligner/data.hpp"
#include "aligner/rng.hpp"

namespace aligner {

void StepTiming::validate() const {
  const double slack = 1e-9;
  if (train < 0 || rollout < 0 || response_generation < 0 || logprob_calculation < 0 ||
      refit < 0 || critic_wait < 0) {
    throw PpoError("step timing: negative category");
  }
  if (rollout + slack < response_generation + logprob_calculation + refit) {
    throw PpoError("step timing: rollout smaller than its components");
  }
}

void write_metrics_log(const std::string& path, const std::vector<StepRecord>& records,
                       double engine_build_seconds) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw PpoError("metrics log: cannot open for write: " + path);
  os << "# engine_build_seconds\t" << engine_build_seconds << "\n";
  os << "# step\treward_mean\tkl_mean\tloss_actor\tloss_critic\ttrain\trollout\t"
        "response_generation\tlogprob_calculation\trefit\tcritic_wait\n";
  os.precision(17);
  for (const auto& r : records) {
    os << r.timing.step << "\t" << r.metrics.reward_mean << "\t" << r.metrics.kl_mean << "\t"
       << r.metrics.loss_actor << "\t" << r.metrics.loss_critic << "\t" << r.timing.train << "\t"
       << r.timing.rollout << "\t" << r.timing.response_generation << "\t"
       << r.timing.logprob_calculation << "\t" << r.timing.refit << "\t" << r.timing.critic_wait
       << "\n";
  }
}

std::vector<StepRecord> read_metrics_log(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw PpoError("metrics log: cannot open: " + path);
  std::vector<StepRecord> out;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    StepRecord r;
    ls >> r.timing.step >> r.metrics.reward_mean >> r.metrics.kl_mean >> r.metrics.loss_actor >>
        r.metrics.loss_critic >> r.timing.train >> r.timing.rollout >>
        r.timing.response_generation >> r.timing.logprob_calculation >> r.timing.refit >>
        r.timing.critic_wait;
    if (!ls) throw PpoError("metrics log: malformed line: " + line);
    out.push_back(r);
  }
  return out;
}

ModelParams& ActorJob::policy() {
  if (active_kind != ActorModel::kPolicy) {
    throw PpoError("actor job: policy is parked; swap before touching it");
  }
  return active;
}

const ModelParams& ActorJob::policy() const {
  return active_kind == ActorModel::kPolicy ? active : parked;
}

void swap_weights(ActorJob& job, ActorModel target) {
  if (job.active_kind == target) return;
  std::swap(job.active, job.parked);
  job.active_kind = target;
}

CriticJob::CriticJob(ModelParams critic, ModelParams reward_model, CriticJobOptions opts)
    : config_(critic.config),
      active_(std::move(critic)),
      parked_(std::move(reward_model)),
      active_kind_(CriticModel::kCritic),
      opts_(opts),
      optimizer_(AdamW::Options{}) {
  if (!config_.scalar_head) {
    throw PpoError("critic job: critic model needs a scalar head");
  }
  if (!opts_.scripted_reward && !parked_.config.scalar_head) {
    throw PpoError("critic job: reward model needs a scalar head");
  }
  active_.set_requires_grad_on_trainable();
}

void CriticJob::swap_to(CriticModel target) {
  if (active_kind_ == target) return;
  std::swap(active_, parked_);
  active_kind_ = target;
}

double CriticJob::scripted_reward_for(const TokenSeq& tokens, std::size_t response_start) const {
  double count = 0.0;
  for (std::size_t t = response_start; t < tokens.size(); ++t) {
    if (tokens[t] == opts_.scripted_target_token) count += 1.0;
  }
  return count;
}

void CriticJob::attach(rpc::Server& server) {
  server.register_handler(rpc::kKindInferRmCritic,
                          [this](const nlohmann::json& body) { return handle_infer(body); });
  // Training declares serialized execution.
  server.register_handler(rpc::kKindTrainCritic,
                          [this](const nlohmann::json& body) { return handle_train(body); },
                          /*serialized=*/true);
  server.register_handler(rpc::kKindSaveCritic,
                          [this](const nlohmann::json& body) { return handle_save(body); });
}

namespace {

struct WireSeq {
  TokenSeq tokens;
  std::size_t response_start = 0;
  std::vector<double> old_values;
  std::vector<double> returns;
};

std::vector<WireSeq> parse_seqs(const nlohmann::json& body, bool with_training_fields) {
  if (!body.contains("seqs") || !body["seqs"].is_array() || body["seqs"].empty()) {
    throw rpc::RpcError("request body needs a nonempty \"seqs\" array");
  }
  std::vector<WireSeq> out;
  for (const auto& s : body["seqs"]) {
    WireSeq w;
    for (const auto& t : s.at("tokens")) w.tokens.push_back(t.get<std::int32_t>());
    w.response_start = s.at("response_start").get<std::size_t>();
    if (w.response_start == 0 || w.response_start >= w.tokens.size()) {
      throw rpc::RpcError("response_start out of range");
    }
    if (with_training_fields) {
      w.old_values = rpc::decode_floats(s.at("old_values").get<std::string>());
      w.returns = rpc::decode_floats(s.at("returns").get<std::string>());
      const std::size_t t_resp = w.tokens.size() - w.response_start;
      if (w.old_values.size() != t_resp || w.returns.size() != t_resp) {
        throw rpc::RpcError("old_values/returns length mismatch with response length");
      }
    }
    out.push_back(std::move(w));
  }
  return out;
}

}  // namespace

nlohmann::json CriticJob::handle_infer(const nlohmann::json& body) {
  const auto seqs = parse_seqs(body, false);
  std::lock_guard lock(model_mu_);

  // Reward model pass first (one swap each way), then critic values.
  std::vector<double> rewards(seqs.size(), 0.0);
  if (opts_.scripted_reward) {
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      rewards[i] = scripted_reward_for(seqs[i].tokens, seqs[i].response_start);
    }
  } else {
    swap_to(CriticModel::kRewardModel);
    for (std::size_t i = 0; i < seqs.size(); ++i) {
      rewards[i] =
          reward_head(active_, active_.at("scalar_head.weight"), seqs[i].tokens).item();
    }
    swap_to(CriticModel::kCritic);
  }

  nlohmann::json values = nlohmann::json::array();
  for (const auto& s : seqs) {
    Tensor v = value_estimates(active_, active_.at("scalar_head.weight"), s.tokens,
                               s.response_start);
    values.push_back(rpc::encode_floats(v.values()));
  }
  nlohmann::json reply;
  reply["rewards"] = rpc::encode_floats(rewards);
  reply["values"] = std::move(values);
  return reply;
}

nlohmann::json CriticJob::handle_train(const nlohmann::json& body) {
  const auto seqs = parse_seqs(body, true);
  std::lock_guard lock(model_mu_);
  // The artificial delay stands in for a longer optimization step, so it
  // holds the model exactly like real training would.
  if (opts_.train_delay_seconds > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(opts_.train_delay_seconds));
  }
  swap_to(CriticModel::kCritic);

  Tape tape;
  double loss_value = 0.0;
  {
    TapeScope scope(tape);
    Tensor total = Tensor::scalar(0.0);
    for (const auto& s : seqs) {
      Tensor values = value_estimates(active_, active_.at("scalar_head.weight"), s.tokens,
                                      s.response_start);
      std::vector<double> mask(values.size(), 1.0);
      Tensor loss =
          ppo_critic_loss(values, s.old_values, s.returns, opts_.hyper.value_clip, mask);
      total = add(total, loss);
    }
    Tensor mean_loss = mul_scalar(total, 1.0 / static_cast<double>(seqs.size()));
    loss_value = mean_loss.item();
    active_.zero_grad();
    backward(mean_loss);
  }
  optimizer_.step(active_, opts_.lr);
  active_.zero_grad();
  ++train_steps_;

  nlohmann::json reply;
  reply["loss"] = loss_value;
  reply["train_steps"] = train_steps_;
  return reply;
}

nlohmann::json CriticJob::handle_save(const nlohmann::json& body) {
  const std::string path = body.at("path").get<std::string>();
  std::lock_guard lock(model_mu_);
  swap_to(CriticModel::kCritic);
  save_checkpoint(active_, path);
  nlohmann::json reply;
  reply["ok"] = true;
  reply["path"] = path;
  return reply;
}

namespace {

nlohmann::json infer_request_body(const RolloutBatch& batch) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& seq : batch) {
    nlohmann::json s;
    nlohmann::json tokens = nlohmann::json::array();
    TokenSeq full = seq.prompt;
    full.insert(full.end(), seq.response.begin(), seq.response.end());
    for (auto t : full) tokens.push_back(t);
    s["tokens"] = std::move(tokens);
    s["response_start"] = seq.prompt.size();
    seqs.push_back(std::move(s));
  }
  nlohmann::json body;
  body["seqs"] = std::move(seqs);
  return body;
}

nlohmann::json train_request_body(const RolloutBatch& batch) {
  nlohmann::json seqs = nlohmann::json::array();
  for (const auto& seq : batch) {
    nlohmann::json s;
    nlohmann::json tokens = nlohmann::json::array();
    TokenSeq full = seq.prompt;
    full.insert(full.end(), seq.response.begin(), seq.response.end());
    for (auto t : full) tokens.push_back(t);
    s["tokens"] = std::move(tokens);
    s["response_start"] = seq.prompt.size();
    s["old_values"] = rpc::encode_floats(seq.values);
    s["returns"] = rpc::encode_floats(seq.returns);
    seqs.push_back(std::move(s));
  }
  nlohmann::json body;
  body["seqs"] = std::move(seqs);
  return body;
}

std::vector<double> response_logprobs(const ModelParams& params, const RolloutSeq& seq) {
  TokenSeq full = seq.prompt;
  full.insert(full.end(), seq.response.begin(), seq.response.end());
  const auto all = sequence_logprobs(params, full);
  return {all.begin() + static_cast<std::ptrdiff_t>(seq.prompt.size()), all.end()};
}

}  // namespace

StepRecord ppo_step(ActorJob& job, const std::vector<TokenSeq>& prompts, const PpoHyper& hyper,
                    std::size_t step_index, const PpoStepOptions& opts) {
  hyper.validate();
  if (prompts.empty()) throw PpoError("ppo_step: empty prompt batch");
  if (job.active_kind != ActorModel::kPolicy) {
    throw PpoError("ppo_step: policy must be the active model at step start");
  }
  StepRecord rec;
  rec.timing.step = step_index;
  const double wait_before = job.critic.wait_seconds();

  Stopwatch rollout_sw;

  // (1) Response generation on the frozen engine snapshot.
  Stopwatch gen_sw;
  std::vector<GenTask> tasks;
  tasks.reserve(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    GenTask t;
    t.prompt = prompts[i];
    t.max_new = opts.max_new;
    t.sampling = SamplingSpec::temperature_spec(opts.temperature,
                                                mix_seed(opts.seed, step_index * 1000003 + i));
    tasks.push_back(std::move(t));
  }
  const auto generations = job.engine->generate_batch(tasks);
  if (job.extra_rollout_seconds > 0.0) {
    std::this_thread::sleep_for(std::chrono::duration<double>(job.extra_rollout_seconds));
  }
  rec.timing.response_generation = gen_sw.seconds();

  RolloutBatch batch(prompts.size());
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    batch[i].prompt = prompts[i];
    batch[i].response = generations[i].tokens;
    if (batch[i].response.empty()) {
      throw PpoError("ppo_step: empty generation for prompt " + std::to_string(i));
    }
  }

  // (2) Ask the critic service for rewards and values; do not wait yet.
  auto infer_handle = job.critic.send_request(rpc::kKindInferRmCritic, infer_request_body(batch));

  // (3) Local log-probs under the policy, then under the swapped-in
  // reference, then swap back.
  Stopwatch lp_sw;
  for (auto& seq : batch) seq.actor_logprobs = response_logprobs(job.active, seq);
  swap_weights(job, ActorModel::kReference);
  for (auto& seq : batch) seq.ref_logprobs = response_logprobs(job.active, seq);
  swap_weights(job, ActorModel::kPolicy);
  rec.timing.logprob_calculation = lp_sw.seconds();

  // Consume the previous step's critic-train reply (it must have finished
  // before the critic answered this step's inference).
  if (job.pending_train.msg_id() != 0) {
    const auto trained = rpc::await(job.pending_train, opts.critic_timeout_seconds);
    if (trained.status == rpc::AwaitStatus::kError) {
      throw PpoError("ppo_step: critic training failed: " + trained.error_message);
    }
    if (trained.status == rpc::AwaitStatus::kTimeout) {
      throw PpoError("ppo_step: critic training timed out");
    }
    rec.metrics.loss_critic = trained.body.value("loss", 0.0);
    job.pending_train = rpc::PendingHandle();
  }

  // (4) Block on rewards/values.
  const auto infer = rpc::await(infer_handle, opts.critic_timeout_seconds);
  if (infer.status == rpc::AwaitStatus::kError) {
    throw PpoError("ppo_step: critic inference failed: " + infer.error_message);
  }
  if (infer.status == rpc::AwaitStatus::kTimeout) {
    throw PpoError("ppo_step: critic inference timed out");
  }
  const auto rewards = rpc::decode_floats(infer.body.at("rewards").get<std::string>());
  if (rewards.size() != batch.size() || infer.body.at("values").size() != batch.size()) {
    throw PpoError("ppo_step: critic reply size mismatch");
  }
  for (std::size_t i = 0; i < batch.size(); ++i) {
    batch[i].reward = rewards[i];
    batch[i].values = rpc::decode_floats(infer.body.at("values")[i].get<std::string>());
    if (batch[i].values.size() != batch[i].response.size()) {
      throw PpoError("ppo_step: critic value length mismatch");
    }
  }
  const double rollout_body = rollout_sw.seconds();

  // (5) Shape rewards, estimate advantages, optimize the policy.
  Stopwatch train_sw;
  double kl_sum = 0.0;
  std::size_t kl_count = 0;
  for (auto& seq : batch) {
    const auto shaped = kl_penalized_rewards(seq.reward, seq.actor_logprobs, seq.ref_logprobs,
                                             hyper.kl_penalty_coef);
    const auto est = gae(shaped, seq.values, hyper.gamma, hyper.lam);
    seq.advantages = est.advantages;
    seq.returns = est.returns;
    seq.mask.assign(seq.response.size(), 1.0);
    for (std::size_t t = 0; t < seq.response.size(); ++t) {
      kl_sum += seq.actor_logprobs[t] - seq.ref_logprobs[t];
      ++kl_count;
    }
  }

  Tape tape;
  double actor_loss_value = 0.0;
  {
    TapeScope scope(tape);
    std::vector<double> flat_old, flat_adv, flat_mask;
    std::vector<Tensor> new_lp_parts;
    for (const auto& seq : batch) {
      TokenSeq full = seq.prompt;
      full.insert(full.end(), seq.response.begin(), seq.response.end());
      Tensor logits = forward_one(job.active, full);
      // Log-probs of each response token given its prefix.
      Tensor lp = log_softmax(
          slice_rows(logits, seq.prompt.size() - 1, full.size() - 1));
      new_lp_parts.push_back(gather_token_logprobs(lp, seq.response));
      flat_old.insert(flat_old.end(), seq.actor_logprobs.begin(), seq.actor_logprobs.end());
      flat_adv.insert(flat_adv.end(), seq.advantages.begin(), seq.advantages.end());
      flat_mask.insert(flat_mask.end(), seq.mask.begin(), seq.mask.end());
    }
    std::vector<Tensor> as_rows;
    as_rows.reserve(new_lp_parts.size());
    for (auto& part : new_lp_parts) as_rows.push_back(reshape(part, {part.size(), 1}));
    Tensor new_lp = reshape(concat_rows(as_rows), {flat_old.size()});
    Tensor loss = ppo_actor_loss(new_lp, flat_old, flat_adv, hyper.clip_eps, flat_mask);
    actor_loss_value = loss.item();
    job.active.zero_grad();
    backward(loss);
  }
  job.optimizer.step(job.active, hyper.lr);
  job.active.zero_grad();
  rec.timing.train = train_sw.seconds();

  // (6) Hand the critic its training batch; it runs while we prepare the
  // next step.
  job.pending_train = job.critic.send_request(rpc::kKindTrainCritic, train_request_body(batch));

  // (7) Refresh the engine snapshot in place.
  Stopwatch refit_sw;
  job.engine->refit(job.active);
  rec.timing.refit = refit_sw.seconds();

  rec.timing.rollout = rollout_body + rec.timing.refit;
  rec.timing.critic_wait = job.critic.wait_seconds() - wait_before;
  rec.metrics.loss_actor = actor_loss_value;
  double reward_sum = 0.0;
  for (const auto& seq : batch) reward_sum += seq.reward;
  rec.metrics.reward_mean = reward_sum / static_cast<double>(batch.size());
  rec.metrics.kl_mean = kl_count ? kl_sum / static_cast<double>(kl_count) : 0.0;
  rec.timing.validate();
  return rec;
}

namespace {

std::vector<TokenSeq> load_prompts(const PpoRunConfig& config) {
  std::vector<TokenSeq> prompts;
  if (!config.prompts_file.empty()) {
    const auto ds = load_dataset(config.prompts_file, DatasetKind::kPrompts);
    for (const auto& rec : ds.records) prompts.push_back(encode_bytes(rec.prompt));
  }
  for (const auto& p : config.prompts) prompts.push_back(encode_bytes(p));
  if (prompts.empty()) throw PpoError("run_ppo: no prompts configured");
  for (const auto& p : prompts) {
    if (p.size() + config.max_new > config.model.max_seq_len) {
      throw PpoError("run_ppo: prompt plus max_new exceeds max_seq_len");
    }
  }
  return prompts;
}

ModelParams init_or_load(const std::string& checkpoint, const ModelConfig& config,
                         std::uint64_t seed) {
  if (!checkpoint.empty()) return load_checkpoint(checkpoint, config);
  return init_params(config, seed);
}

}  // namespace

void critic_serve_forever(const ModelParams& critic, const ModelParams& reward_model,
                          const CriticJobOptions& opts, const std::string& host,
                          std::uint16_t port, std::size_t max_frame) {
  // Block the shutdown signals before any server thread exists so every
  // thread inherits the mask and sigwait owns delivery.
  sigset_t set;
  sigemptyset(&set);
  sigaddset(&set, SIGINT);
  sigaddset(&set, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &set, nullptr);

  CriticJob job(critic.clone(), reward_model.clone(), opts);
  rpc::Server server;
  job.attach(server);
  server.start(host, port, max_frame);
  std::fprintf(stderr, "critic listening on %s:%u\n", host.c_str(), server.port());
  int sig = 0;
  sigwait(&set, &sig);
  server.stop();
}

PpoRunResult run_actor_loop(const PpoRunConfig& config, const std::string& host,
                            std::uint16_t port, const StepHook& hook) {
  config.model.validate();
  config.hyper.validate();
  if (config.out_dir.empty()) throw PpoError("run_actor_loop: out_dir is required");
  std::filesystem::create_directories(config.out_dir);
  const auto prompts = load_prompts(config);

  ModelParams policy = init_or_load(config.policy_init_checkpoint, config.model, config.seed);
  ModelParams reference = policy.clone();

  PpoRunResult result;
  ActorJob job;
  job.config = config.model;
  job.active = std::move(policy);
  job.parked = std::move(reference);
  job.active_kind = ActorModel::kPolicy;
  job.optimizer = AdamW(AdamW::Options{});
  job.extra_rollout_seconds = config.debug_extra_rollout_seconds;

  EngineOptions engine_opts;
  engine_opts.n_workers = config.gen_workers;
  engine_opts.simulated_token_latency = config.simulated_token_latency;
  Stopwatch build_sw;
  job.engine = build_engine(job.active, config.model, engine_opts);
  result.engine_build_seconds = build_sw.seconds();

  job.critic = rpc::Client::connect_with_retry(host, port, 10.0, config.max_frame);

  PpoHyper hyper = config.hyper;
  hyper.lr = config.actor_lr;

  Rng shuffle_rng(config.seed);
  std::vector<std::size_t> order(prompts.size());
  std::iota(order.begin(), order.end(), 0);
  std::size_t cursor = 0;
  auto next_batch = [&]() {
    std::vector<TokenSeq> batch;
    for (std::size_t i = 0; i < config.prompts_per_step; ++i) {
      if (cursor == 0) {
        for (std::size_t k = order.size(); k > 1; --k) {
          std::swap(order[k - 1], order[shuffle_rng.uniform_int(k)]);
        }
      }
      batch.push_back(prompts[order[cursor]]);
      cursor = (cursor + 1) % order.size();
    }
    return batch;
  };

  PpoStepOptions step_opts;
  step_opts.max_new = config.max_new;
  step_opts.temperature = config.temperature;
  step_opts.seed = config.seed;

  for (std::size_t step = 1; step <= config.steps; ++step) {
    result.records.push_back(ppo_step(job, next_batch(), hyper, step, step_opts));
    if (hook) hook(job, result.records.back());
  }

  // Drain the last training request, then snapshot both sides.
  if (job.pending_train.msg_id() != 0) {
    const auto trained = rpc::await(job.pending_train, step_opts.critic_timeout_seconds);
    if (trained.status != rpc::AwaitStatus::kResult) {
      throw PpoError("run_actor_loop: final critic training did not complete");
    }
  }
  result.policy_checkpoint = config.out_dir + "/policy.ckpt";
  save_checkpoint(job.active, result.policy_checkpoint);
  result.critic_checkpoint = config.out_dir + "/critic.ckpt";
  auto save_handle = job.critic.send_request(
      rpc::kKindSaveCritic, nlohmann::json{{"path", result.critic_checkpoint}});
  const auto saved = rpc::await(save_handle, 30.0);
  if (saved.status != rpc::AwaitStatus::kResult) {
    throw PpoError("run_actor_loop: critic checkpoint save failed");
  }
  result.metrics_path = config.out_dir + "/metrics.tsv";
  write_metrics_log(result.metrics_path, result.records, result.engine_build_seconds);
  job.critic.close();
  return result;
}

PpoRunResult run_ppo(const PpoRunConfig& config, const StepHook& hook) {
  config.model.validate();
  config.hyper.validate();
  if (config.out_dir.empty()) throw PpoError("run_ppo: out_dir is required");
  std::filesystem::create_directories(config.out_dir);

  // Validate the prompt source before paying for the fork.
  (void)load_prompts(config);

  // Critic lineage: the reward model and critic start from the same weights.
  ModelConfig critic_config = config.model;
  critic_config.scalar_head = true;
  ModelParams critic = init_or_load(config.critic_init_checkpoint, critic_config, config.seed + 1);
  ModelParams reward_model = critic.clone();

  CriticJobOptions critic_opts;
  critic_opts.hyper = config.hyper;
  critic_opts.scripted_reward = config.scripted_reward;
  critic_opts.scripted_target_token = config.scripted_target_token;
  critic_opts.train_delay_seconds = config.debug_train_delay_seconds;
  critic_opts.lr = config.critic_lr;

  // The critic runs in its own process. The child reports its port through a
  // pipe and exits when the shutdown pipe closes.
  int port_pipe[2];
  int shutdown_pipe[2];
  if (pipe(port_pipe) != 0 || pipe(shutdown_pipe) != 0) {
    throw PpoError("run_ppo: cannot create pipes");
  }
  const pid_t child = fork();
  if (child < 0) throw PpoError("run_ppo: fork failed");
  if (child == 0) {
    // Critic process.
    ::close(port_pipe[0]);
    ::close(shutdown_pipe[1]);
    int exit_code = 0;
    try {
      CriticJob job(std::move(critic), std::move(reward_model), critic_opts);
      rpc::Server server;
      job.attach(server);
      server.start("127.0.0.1", 0, config.max_frame);
      const std::uint16_t port = server.port();
      if (::write(port_pipe[1], &port, sizeof(port)) != sizeof(port)) _exit(3);
      ::close(port_pipe[1]);
      char buf;
      while (::read(shutdown_pipe[0], &buf, 1) > 0) {
      }
      server.stop();
    } catch (...) {
      exit_code = 2;
    }
    _exit(exit_code);
  }

  ::close(port_pipe[1]);
  ::close(shutdown_pipe[0]);
  std::uint16_t critic_port = 0;
  if (::read(port_pipe[0], &critic_port, sizeof(critic_port)) != sizeof(critic_port)) {
    ::close(port_pipe[0]);
    ::close(shutdown_pipe[1]);
    waitpid(child, nullptr, 0);
    throw PpoError("run_ppo: critic process failed to start");
  }
  ::close(port_pipe[0]);

  PpoRunResult result;
  try {
    result = run_actor_loop(config, "127.0.0.1", critic_port, hook);
  } catch (...) {
    ::close(shutdown_pipe[1]);
    waitpid(child, nullptr, 0);
    throw;
  }
  ::close(shutdown_pipe[1]);
  int status = 0;
  waitpid(child, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw PpoError("run_ppo: critic process exited abnormally");
  }
  return result;
}

}  // namespace aligner
