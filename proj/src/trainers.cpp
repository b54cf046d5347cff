// SPDX-License-Identifier: Apache-2.0

#include "aligner/trainers.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "aligner/rng.hpp"

namespace aligner {

namespace {

// Per-sequence response log-prob sum under the tape (policy side).
Tensor policy_response_logprob_sum(const ModelParams& params, const BuiltSequence& seq) {
  Tensor logits = forward_one(params, seq.inputs);
  Tensor lp = gather_token_logprobs(log_softmax(logits), seq.targets);
  return masked_sum(lp, seq.loss_mask);
}

// Same quantity without gradients (frozen reference side).
double frozen_response_logprob_sum(const ModelParams& params, const BuiltSequence& seq) {
  const auto lps = sequence_logprobs(params, seq.full);
  double acc = 0.0;
  for (std::size_t p = seq.response_start; p < seq.full.size(); ++p) acc += lps[p];
  return acc;
}

Tensor stack_scalars(std::vector<Tensor> parts) {
  std::vector<Tensor> rows;
  rows.reserve(parts.size());
  for (auto& p : parts) rows.push_back(reshape(p, {1, 1}));
  return reshape(concat_rows(rows), {parts.size()});
}

Tensor sft_micro_loss(TrainContext& ctx, std::span<const DataRecord> records, bool conditioned) {
  std::vector<Tensor> logits;
  std::vector<TokenSeq> targets;
  std::vector<std::vector<double>> masks;
  for (const auto& rec : records) {
    const std::string prompt_text =
        conditioned ? steerlm_format(rec.prompt, rec.attributes) : rec.prompt;
    const auto seq = build_sft_sequence(ctx.model_config, encode_bytes(prompt_text),
                                        encode_bytes(rec.response));
    logits.push_back(forward_one(ctx.policy, seq.inputs));
    targets.push_back(seq.targets);
    masks.push_back(seq.loss_mask);
  }
  return sft_loss_batch(logits, targets, masks);
}

Tensor dpo_micro_loss(TrainContext& ctx, std::span<const DataRecord> records, double& extra) {
  if (!ctx.reference) throw TrainerError("dpo: reference policy missing");
  std::vector<Tensor> pc, pr;
  std::vector<double> rc, rr;
  for (const auto& rec : records) {
    const auto chosen = build_sft_sequence(ctx.model_config, encode_bytes(rec.prompt),
                                           encode_bytes(rec.chosen));
    const auto rejected = build_sft_sequence(ctx.model_config, encode_bytes(rec.prompt),
                                             encode_bytes(rec.rejected));
    pc.push_back(policy_response_logprob_sum(ctx.policy, chosen));
    pr.push_back(policy_response_logprob_sum(ctx.policy, rejected));
    rc.push_back(frozen_response_logprob_sum(*ctx.reference, chosen));
    rr.push_back(frozen_response_logprob_sum(*ctx.reference, rejected));
  }
  Tensor policy_chosen = stack_scalars(std::move(pc));
  Tensor policy_rejected = stack_scalars(std::move(pr));
  Tensor ref_chosen({rc.size()}, rc);
  Tensor ref_rejected({rr.size()}, rr);

  // Mean implicit-reward margin β·[(logπ−logπref)(chosen) − (…)(rejected)].
  double margin = 0.0;
  for (std::size_t i = 0; i < rc.size(); ++i) {
    margin += (policy_chosen.at(i) - rc[i]) - (policy_rejected.at(i) - rr[i]);
  }
  extra = ctx.config.dpo.beta * margin / static_cast<double>(rc.size());
  return dpo_family_loss(policy_chosen, policy_rejected, ref_chosen, ref_rejected, ctx.config.dpo);
}

Algorithm make_dpo_algorithm(DpoVariant variant) {
  Algorithm algo;
  algo.needs_reference = true;
  algo.extra_name = "margin";
  algo.micro_batch_loss = [variant](TrainContext& ctx, std::span<const DataRecord> records,
                                    double& extra) {
    ctx.config.dpo.variant = variant;
    return dpo_micro_loss(ctx, records, extra);
  };
  return algo;
}

Algorithm make_spin_algorithm() {
  Algorithm algo = make_dpo_algorithm(DpoVariant::kDpo);
  algo.prepare_epoch = [](TrainContext& ctx,
                          const std::vector<DataRecord>& records) -> std::vector<DataRecord> {
    if (!ctx.reference) throw TrainerError("spin: reference policy missing");
    std::vector<SftExample> examples;
    examples.reserve(records.size());
    for (const auto& rec : records) {
      examples.push_back({encode_bytes(rec.prompt), encode_bytes(rec.response)});
    }
    const auto pairs = spin_make_pairs(
        examples, [&](const TokenSeq& prompt) {
          auto gen = generate(*ctx.reference, prompt, ctx.config.spin_max_new,
                              SamplingSpec::greedy_spec());
          // Trailing end-of-text is re-appended at sequence build time.
          if (!gen.tokens.empty() && gen.tokens.back() == kEotToken) gen.tokens.pop_back();
          return gen.tokens;
        });
    std::vector<DataRecord> out;
    for (const auto& pair : pairs.pairs) {
      DataRecord rec;
      rec.prompt = decode_bytes(pair.prompt);
      rec.chosen = decode_bytes(pair.chosen);
      rec.rejected = decode_bytes(pair.rejected);
      if (rec.rejected.empty() || rec.chosen == rec.rejected) continue;
      out.push_back(std::move(rec));
    }
    if (out.empty()) throw TrainerError("spin: every generated pair was degenerate");
    return out;
  };
  // Iteration boundary: the reference absorbs the trained policy.
  algo.on_epoch_end = [](TrainContext& ctx) { ctx.reference = ctx.policy.clone(); };
  return algo;
}

Algorithm make_rm_algorithm() {
  Algorithm algo;
  algo.extra_name = "accuracy";
  algo.micro_batch_loss = [](TrainContext& ctx, std::span<const DataRecord> records,
                             double& extra) {
    std::vector<Tensor> chosen_r, rejected_r;
    double correct = 0.0;
    const Tensor& head = ctx.policy.at("scalar_head.weight");
    for (const auto& rec : records) {
      const auto chosen = build_sft_sequence(ctx.model_config, encode_bytes(rec.prompt),
                                             encode_bytes(rec.chosen));
      const auto rejected = build_sft_sequence(ctx.model_config, encode_bytes(rec.prompt),
                                               encode_bytes(rec.rejected));
      Tensor r_c = reward_head(ctx.policy, head, chosen.full);
      Tensor r_r = reward_head(ctx.policy, head, rejected.full);
      if (r_c.item() > r_r.item()) {
        correct += 1.0;
      } else if (r_c.item() == r_r.item()) {
        correct += 0.5;  // ties score at chance
      }
      chosen_r.push_back(r_c);
      rejected_r.push_back(r_r);
    }
    extra = correct / static_cast<double>(records.size());
    return rm_loss(stack_scalars(std::move(chosen_r)), stack_scalars(std::move(rejected_r)));
  };
  return algo;
}

}  // namespace

AlgorithmRegistry::AlgorithmRegistry() {
  Algorithm sft;
  sft.micro_batch_loss = [](TrainContext& ctx, std::span<const DataRecord> records, double&) {
    return sft_micro_loss(ctx, records, false);
  };
  algorithms_.emplace("sft", std::move(sft));

  Algorithm steerlm;
  steerlm.micro_batch_loss = [](TrainContext& ctx, std::span<const DataRecord> records, double&) {
    return sft_micro_loss(ctx, records, true);
  };
  algorithms_.emplace("steerlm", std::move(steerlm));

  algorithms_.emplace("rm", make_rm_algorithm());
  algorithms_.emplace("dpo", make_dpo_algorithm(DpoVariant::kDpo));
  algorithms_.emplace("ipo", make_dpo_algorithm(DpoVariant::kIpo));
  algorithms_.emplace("cdpo", make_dpo_algorithm(DpoVariant::kCdpo));
  algorithms_.emplace("kto", make_dpo_algorithm(DpoVariant::kKto));
  algorithms_.emplace("spin", make_spin_algorithm());
}

AlgorithmRegistry& AlgorithmRegistry::instance() {
  static AlgorithmRegistry registry;
  return registry;
}

void AlgorithmRegistry::register_algorithm(const std::string& name, Algorithm algorithm) {
  if (algorithms_.count(name)) {
    throw TrainerError("algorithm already registered: " + name);
  }
  if (!algorithm.micro_batch_loss) {
    throw TrainerError("algorithm " + name + " needs a loss callable");
  }
  algorithms_.emplace(name, std::move(algorithm));
}

bool AlgorithmRegistry::has(const std::string& name) const { return algorithms_.count(name) != 0; }

const Algorithm& AlgorithmRegistry::get(const std::string& name) const {
  const auto it = algorithms_.find(name);
  if (it == algorithms_.end()) throw TrainerError("unknown algorithm: " + name);
  return it->second;
}

std::vector<std::string> AlgorithmRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, algo] : algorithms_) out.push_back(name);
  return out;
}

TrainResult run_training(const TrainerConfig& config, const ModelConfig& model_config,
                         const Dataset& dataset, const std::optional<ModelParams>& init,
                         const std::optional<ModelParams>& reference) {
  const Algorithm& algo = AlgorithmRegistry::instance().get(config.algorithm);
  if (dataset.records.empty()) throw TrainerError("training: dataset is empty");
  if (config.micro_batch == 0 || config.global_batch == 0) {
    throw TrainerError("training: batch sizes must be positive");
  }

  ModelConfig effective = model_config;
  if (config.lora && !effective.lora) {
    effective.lora = LoraConfig{config.lora_rank, config.lora_alpha};
  }
  if (config.algorithm == "rm") effective.scalar_head = true;

  TrainContext ctx;
  ctx.model_config = effective;
  ctx.config = config;
  if (init) {
    if (!(init->config == effective)) {
      throw TrainerError("training: init checkpoint config does not match");
    }
    ctx.policy = init->clone();
  } else {
    ctx.policy = init_params(effective, config.seed);
  }
  ctx.policy.set_requires_grad_on_trainable();
  if (reference) {
    ctx.reference = reference->clone();
  } else if (algo.needs_reference) {
    ctx.reference = ctx.policy.clone();
  }

  AdamW::Options opt_opts;
  opt_opts.weight_decay = config.weight_decay;
  AdamW optimizer(opt_opts);

  TrainResult result;
  result.extra_name = algo.extra_name.empty() ? "extra" : algo.extra_name;

  const std::size_t epochs = config.algorithm == "spin" ? config.spin_iterations : config.epochs;
  for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
    ctx.epoch = epoch;
    std::vector<DataRecord> data =
        algo.prepare_epoch ? algo.prepare_epoch(ctx, dataset.records) : dataset.records;
    if (data.empty()) throw TrainerError("training: epoch dataset is empty");

    // Deterministic per-epoch shuffle, then optional subset sampling.
    Rng rng(mix_seed(config.seed, epoch));
    for (std::size_t k = data.size(); k > 1; --k) {
      std::swap(data[k - 1], data[rng.uniform_int(k)]);
    }
    if (config.dataset_fraction < 1.0) {
      const auto keep = static_cast<std::size_t>(
          std::ceil(config.dataset_fraction * static_cast<double>(data.size())));
      data.resize(std::max<std::size_t>(1, keep));
    }

    const std::size_t steps =
        config.steps_per_epoch > 0
            ? config.steps_per_epoch
            : (data.size() + config.global_batch - 1) / config.global_batch;
    std::size_t cursor = 0;
    for (std::size_t step = 0; step < steps; ++step) {
      std::vector<DataRecord> batch;
      batch.reserve(config.global_batch);
      for (std::size_t i = 0; i < config.global_batch; ++i) {
        batch.push_back(data[cursor]);
        cursor = (cursor + 1) % data.size();
      }

      ctx.policy.zero_grad();
      double loss_sum = 0.0;
      double extra_sum = 0.0;
      std::size_t micro_count = 0;
      for (std::size_t off = 0; off < batch.size(); off += config.micro_batch) {
        const std::size_t end = std::min(batch.size(), off + config.micro_batch);
        Tape tape;
        TapeScope scope(tape);
        double extra = 0.0;
        Tensor loss = algo.micro_batch_loss(
            ctx, std::span<const DataRecord>(batch.data() + off, end - off), extra);
        loss_sum += loss.item();
        extra_sum += extra;
        ++micro_count;
        backward(loss);
      }
      const double lr = config.lr.at(ctx.global_step);
      optimizer.step(ctx.policy, lr, static_cast<double>(micro_count));
      ctx.policy.zero_grad();

      TrainStepLog row;
      row.step = ctx.global_step;
      row.loss = loss_sum / static_cast<double>(micro_count);
      row.lr = lr;
      row.extra = extra_sum / static_cast<double>(micro_count);
      result.log.push_back(row);
      ++ctx.global_step;
    }
    if (algo.on_epoch_end) algo.on_epoch_end(ctx);
  }

  result.params = std::move(ctx.policy);
  return result;
}

TrainResult train_sft(const TrainerConfig& config, const ModelConfig& model_config,
                      const Dataset& dataset) {
  TrainerConfig c = config;
  c.algorithm = "sft";
  return run_training(c, model_config, dataset);
}

TrainResult train_rm(const TrainerConfig& config, const ModelConfig& model_config,
                     const Dataset& dataset) {
  TrainerConfig c = config;
  c.algorithm = "rm";
  return run_training(c, model_config, dataset);
}

TrainResult train_dpo(const TrainerConfig& config, const ModelConfig& model_config,
                      const Dataset& dataset, const ModelParams& reference) {
  TrainerConfig c = config;
  if (c.algorithm != "dpo" && c.algorithm != "ipo" && c.algorithm != "cdpo" &&
      c.algorithm != "kto") {
    c.algorithm = "dpo";
  }
  // The policy starts from the reference weights; with adapters enabled only
  // the adapters move.
  ModelConfig effective = model_config;
  if (c.lora && !effective.lora) effective.lora = LoraConfig{c.lora_rank, c.lora_alpha};
  std::optional<ModelParams> init;
  if (effective == reference.config) {
    init = reference.clone();
  } else {
    ModelParams start = init_params(effective, c.seed);
    for (const auto& name : ModelParams::expected_names(reference.config)) {
      if (!start.has(name)) continue;
      const auto src = reference.at(name).values();
      auto dst = start.at(name).values_mut();
      std::copy(src.begin(), src.end(), dst.begin());
    }
    init = std::move(start);
  }
  return run_training(c, model_config, dataset, init, reference.clone());
}

TrainResult train_steerlm(const TrainerConfig& config, const ModelConfig& model_config,
                          const Dataset& dataset) {
  TrainerConfig c = config;
  c.algorithm = "steerlm";
  return run_training(c, model_config, dataset);
}

TrainResult train_spin(const TrainerConfig& config, const ModelConfig& model_config,
                       const Dataset& dataset) {
  TrainerConfig c = config;
  c.algorithm = "spin";
  return run_training(c, model_config, dataset);
}

double rm_accuracy(const ModelParams& params, const Dataset& dataset) {
  if (dataset.records.empty()) throw TrainerError("rm_accuracy: dataset is empty");
  const Tensor& head = params.at("scalar_head.weight");
  double correct = 0.0;
  for (const auto& rec : dataset.records) {
    const auto chosen = build_sft_sequence(params.config, encode_bytes(rec.prompt),
                                           encode_bytes(rec.chosen));
    const auto rejected = build_sft_sequence(params.config, encode_bytes(rec.prompt),
                                             encode_bytes(rec.rejected));
    const double r_c = reward_head(params, head, chosen.full).item();
    const double r_r = reward_head(params, head, rejected.full).item();
    if (r_c > r_r) {
      correct += 1.0;
    } else if (r_c == r_r) {
      correct += 0.5;
    }
  }
  return correct / static_cast<double>(dataset.records.size());
}

GenerateResult steerlm_generate(const ModelParams& params, const std::string& prompt,
                                const AttributeSpec& attrs, std::size_t max_new,
                                const SamplingSpec& sampling) {
  return generate(params, encode_bytes(steerlm_format(prompt, attrs)), max_new, sampling);
}

void write_train_log(const std::string& path, const TrainResult& result) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw TrainerError("train log: cannot open for write: " + path);
  os << "# step\tloss\tlr\t" << result.extra_name << "\n";
  os.precision(17);
  for (const auto& row : result.log) {
    os << row.step << "\t" << row.loss << "\t" << row.lr << "\t" << row.extra << "\n";
  }
}

}  // namespace aligner
