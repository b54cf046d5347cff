// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_LOSSES_HPP_
#define ALIGNER_LOSSES_HPP_

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "aligner/model.hpp"
#include "aligner/tensor.hpp"

namespace aligner {

struct PreferenceExample {
  TokenSeq prompt;
  TokenSeq chosen;
  TokenSeq rejected;

  void validate() const;
};

enum class DpoVariant { kDpo, kIpo, kCdpo, kKto };

DpoVariant dpo_variant_from_name(const std::string& name);
std::string dpo_variant_name(DpoVariant v);

struct DpoHyper {
  double beta = 0.1;
  DpoVariant variant = DpoVariant::kDpo;
  double cdpo_eps = 0.0;  // label-smoothing weight, only read for cdpo

  void validate() const;
};

struct PpoHyper {
  double clip_eps = 0.2;
  double value_clip = 0.2;
  double kl_penalty_coef = 0.003;
  double gamma = 1.0;
  double lam = 0.95;
  std::size_t rollout_gbs = 128;
  std::size_t train_gbs = 128;
  double lr = 1e-7;

  void validate() const;
};

/// One rollout sequence: everything the four PPO models exchange about it.
/// All per-token arrays run over the response only.
struct RolloutSeq {
  TokenSeq prompt;
  TokenSeq response;
  std::vector<double> actor_logprobs;
  std::vector<double> ref_logprobs;
  std::vector<double> values;
  double reward = 0.0;
  std::vector<double> advantages;
  std::vector<double> returns;
  std::vector<double> mask;
};

using RolloutBatch = std::vector<RolloutSeq>;

struct AttributeSpec {
  std::vector<std::pair<std::string, int>> entries;

  void validate() const;
  bool empty() const { return entries.empty(); }
};

/// Mean negative log-likelihood over mask-selected positions.
/// logits[t] predicts targets[t]; mask length equals targets length.
Tensor sft_loss(const Tensor& logits, const TokenSeq& targets, const std::vector<double>& mask);
/// Batch variant: one global mean over all masked positions.
Tensor sft_loss_batch(std::span<const Tensor> logits, std::span<const TokenSeq> targets,
                      std::span<const std::vector<double>> masks);

/// Bradley-Terry pairwise loss, −log σ(r_chosen − r_rejected); inputs may be
/// scalars or equal-length vectors (mean over pairs).
Tensor rm_loss(const Tensor& r_chosen, const Tensor& r_rejected);

/// Index of the last non-pad token.
std::size_t last_content_index(const TokenSeq& tokens);

/// Linear head applied to the final hidden state of the last non-pad token.
Tensor reward_head(const ModelParams& base, const Tensor& head_weights, const TokenSeq& tokens);

/// Per-response-token value estimates: head applied to the hidden state of
/// the prefix preceding each response token. response_start indexes into
/// tokens; returns a [T_response] tensor.
Tensor value_estimates(const ModelParams& base, const Tensor& head_weights, const TokenSeq& tokens,
                       std::size_t response_start);

/// Preference losses over per-sequence response-token log-prob sums.
Tensor dpo_family_loss(const Tensor& policy_chosen, const Tensor& policy_rejected,
                       const Tensor& ref_chosen, const Tensor& ref_rejected, const DpoHyper& h);

struct GaeResult {
  std::vector<double> advantages;
  std::vector<double> returns;
};

GaeResult gae(std::span<const double> rewards, std::span<const double> values, double gamma,
              double lam);

/// Per-token −kl_coef·(actor−ref) shaping with the scalar model reward added
/// at the final response token.
std::vector<double> kl_penalized_rewards(double rm_reward, std::span<const double> actor_lp,
                                         std::span<const double> ref_lp, double kl_coef);

Tensor ppo_actor_loss(const Tensor& new_lp, std::span<const double> old_lp,
                      std::span<const double> advantages, double clip_eps,
                      const std::vector<double>& mask);

Tensor ppo_critic_loss(const Tensor& new_values, std::span<const double> old_values,
                       std::span<const double> returns, double value_clip,
                       const std::vector<double>& mask);

/// Renders "name:value,..." and appends it to the prompt on a fixed
/// delimiter line. Empty attribute lists leave the prompt untouched.
std::string steerlm_format(const std::string& prompt_text, const AttributeSpec& attrs);

/// Inverse of steerlm_format; returns the original prompt and the parsed
/// attributes (empty when no attribute line is present).
struct SteerlmParsed {
  std::string prompt;
  AttributeSpec attrs;
};
SteerlmParsed steerlm_parse(const std::string& conditioned);

struct SftExample {
  TokenSeq prompt;
  TokenSeq response;
};

struct SpinPairs {
  std::vector<PreferenceExample> pairs;
  std::size_t dropped = 0;  // degenerate chosen==rejected pairs
};

using GenerateFn = std::function<TokenSeq(const TokenSeq& prompt)>;

/// chosen = dataset response, rejected = generation from the frozen
/// reference; degenerate pairs are dropped and counted.
SpinPairs spin_make_pairs(std::span<const SftExample> examples, const GenerateFn& generate_rejected);
SpinPairs spin_make_pairs(std::span<const SftExample> examples, const ModelParams& reference,
                          std::size_t max_new);

}  // namespace aligner

#endif  // ALIGNER_LOSSES_HPP_
