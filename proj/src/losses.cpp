// SPDX-License-Identifier: Apache-2.0

#include "aligner/losses.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace aligner {

void PreferenceExample::validate() const {
  if (prompt.empty() || chosen.empty() || rejected.empty()) {
    throw ContractError("preference example: prompt/chosen/rejected must be nonempty");
  }
  if (chosen == rejected) {
    throw ContractError("preference example: chosen equals rejected");
  }
}

DpoVariant dpo_variant_from_name(const std::string& name) {
  if (name == "dpo") return DpoVariant::kDpo;
  if (name == "ipo") return DpoVariant::kIpo;
  if (name == "cdpo") return DpoVariant::kCdpo;
  if (name == "kto") return DpoVariant::kKto;
  throw ContractError("unknown dpo variant: " + name);
}

std::string dpo_variant_name(DpoVariant v) {
  switch (v) {
    case DpoVariant::kDpo: return "dpo";
    case DpoVariant::kIpo: return "ipo";
    case DpoVariant::kCdpo: return "cdpo";
    case DpoVariant::kKto: return "kto";
  }
  return "dpo";
}

void DpoHyper::validate() const {
  if (beta <= 0.0) throw ContractError("dpo hyper: beta must be > 0");
  if (variant == DpoVariant::kCdpo && (cdpo_eps < 0.0 || cdpo_eps >= 0.5)) {
    throw ContractError("dpo hyper: cdpo epsilon must be in [0, 0.5)");
  }
}

void PpoHyper::validate() const {
  if (clip_eps <= 0.0 || clip_eps >= 1.0) throw ContractError("ppo hyper: clip_eps must be in (0,1)");
  if (gamma <= 0.0 || gamma > 1.0) throw ContractError("ppo hyper: gamma must be in (0,1]");
  if (lam <= 0.0 || lam > 1.0) throw ContractError("ppo hyper: lam must be in (0,1]");
}

void AttributeSpec::validate() const {
  for (const auto& [name, value] : entries) {
    if (name.empty()) throw ContractError("attribute spec: empty name");
    if (name.find(':') != std::string::npos || name.find(',') != std::string::npos) {
      throw ContractError("attribute spec: name contains reserved character: " + name);
    }
    if (value < 0 || value > 4) {
      throw ContractError("attribute spec: value for " + name + " outside [0,4]: " +
                          std::to_string(value));
    }
  }
}

Tensor sft_loss(const Tensor& logits, const TokenSeq& targets, const std::vector<double>& mask) {
  const Tensor one = logits;
  return sft_loss_batch(std::span<const Tensor>(&one, 1), std::span<const TokenSeq>(&targets, 1),
                        std::span<const std::vector<double>>(&mask, 1));
}

Tensor sft_loss_batch(std::span<const Tensor> logits, std::span<const TokenSeq> targets,
                      std::span<const std::vector<double>> masks) {
  if (logits.size() != targets.size() || logits.size() != masks.size() || logits.empty()) {
    throw ContractError("sft_loss: mismatched batch sizes");
  }
  double total_mask = 0.0;
  for (const auto& m : masks) {
    for (double v : m) total_mask += v;
  }
  if (total_mask == 0.0) throw ContractError("sft_loss: mask selects no positions");

  Tensor acc = Tensor::scalar(0.0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    if (masks[i].size() != targets[i].size() || logits[i].rows() != targets[i].size()) {
      throw ContractError("sft_loss: logits/targets/mask length mismatch at sequence " +
                          std::to_string(i));
    }
    Tensor token_lp = gather_token_logprobs(log_softmax(logits[i]), targets[i]);
    acc = add(acc, masked_sum(token_lp, masks[i]));
  }
  return mul_scalar(acc, -1.0 / total_mask);
}

Tensor rm_loss(const Tensor& r_chosen, const Tensor& r_rejected) {
  return mean(neg(log_sigmoid(sub(r_chosen, r_rejected))));
}

std::size_t last_content_index(const TokenSeq& tokens) {
  if (tokens.empty()) throw ContractError("last_content_index: empty sequence");
  for (std::size_t i = tokens.size(); i-- > 0;) {
    if (tokens[i] != kPadToken) return i;
  }
  throw ContractError("last_content_index: all-pad sequence");
}

Tensor reward_head(const ModelParams& base, const Tensor& head_weights, const TokenSeq& tokens) {
  if (head_weights.rank() != 2 || head_weights.cols() != 1 ||
      head_weights.rows() != base.config.d_model) {
    throw ShapeError("reward_head: head must be [d_model x 1], got " +
                     shape_str(head_weights.shape()));
  }
  const std::size_t last = last_content_index(tokens);
  Tensor hidden = forward_hidden(base, tokens);
  Tensor row = slice_rows(hidden, last, last + 1);
  return matmul(row, head_weights);  // [1x1]
}

Tensor value_estimates(const ModelParams& base, const Tensor& head_weights, const TokenSeq& tokens,
                       std::size_t response_start) {
  if (response_start == 0 || response_start >= tokens.size()) {
    throw ContractError("value_estimates: response_start must leave a nonempty prompt and response");
  }
  Tensor hidden = forward_hidden(base, tokens);
  // V(s_t) reads the hidden state of the prefix before response token t.
  Tensor rows = slice_rows(hidden, response_start - 1, tokens.size() - 1);
  Tensor vals = matmul(rows, head_weights);  // [T_resp x 1]
  return reshape(vals, {tokens.size() - response_start});
}

Tensor dpo_family_loss(const Tensor& policy_chosen, const Tensor& policy_rejected,
                       const Tensor& ref_chosen, const Tensor& ref_rejected, const DpoHyper& h) {
  h.validate();
  const std::size_t n = policy_chosen.size();
  if (policy_rejected.size() != n || ref_chosen.size() != n || ref_rejected.size() != n || n == 0) {
    throw ContractError("dpo_family_loss: mismatched sequence counts");
  }
  Tensor chosen_ratio = sub(policy_chosen, ref_chosen);
  Tensor rejected_ratio = sub(policy_rejected, ref_rejected);
  Tensor margin = sub(chosen_ratio, rejected_ratio);

  switch (h.variant) {
    case DpoVariant::kDpo:
      return mean(neg(log_sigmoid(mul_scalar(margin, h.beta))));
    case DpoVariant::kIpo: {
      Tensor delta = add_scalar(margin, -1.0 / (2.0 * h.beta));
      return mean(mul(delta, delta));
    }
    case DpoVariant::kCdpo: {
      Tensor scaled = mul_scalar(margin, h.beta);
      Tensor pos = neg(log_sigmoid(scaled));
      Tensor negv = neg(log_sigmoid(neg(scaled)));
      return mean(add(mul_scalar(pos, 1.0 - h.cdpo_eps), mul_scalar(negv, h.cdpo_eps)));
    }
    case DpoVariant::kKto: {
      // Paired adaptation of the Kahneman-Tversky objective: each class is
      // scored against the other class's mean log-ratio, floored at zero.
      Tensor z_chosen = clamp(mean(chosen_ratio), 0.0, 1e300);
      Tensor z_rejected = clamp(mean(rejected_ratio), 0.0, 1e300);
      Tensor chosen_term =
          add_scalar(neg(sigmoid(mul_scalar(sub(chosen_ratio, z_rejected), h.beta))), 1.0);
      Tensor rejected_term =
          add_scalar(neg(sigmoid(mul_scalar(sub(z_chosen, rejected_ratio), h.beta))), 1.0);
      return mul_scalar(add(mean(chosen_term), mean(rejected_term)), 0.5);
    }
  }
  throw ContractError("dpo_family_loss: unreachable");
}

GaeResult gae(std::span<const double> rewards, std::span<const double> values, double gamma,
              double lam) {
  if (rewards.size() != values.size()) {
    throw ContractError("gae: rewards and values must have equal length");
  }
  const std::size_t t_len = rewards.size();
  GaeResult out;
  out.advantages.assign(t_len, 0.0);
  out.returns.assign(t_len, 0.0);
  double running = 0.0;
  for (std::size_t t = t_len; t-- > 0;) {
    const double next_value = (t + 1 < t_len) ? values[t + 1] : 0.0;
    const double delta = rewards[t] + gamma * next_value - values[t];
    running = delta + gamma * lam * running;
    out.advantages[t] = running;
    out.returns[t] = running + values[t];
  }
  return out;
}

std::vector<double> kl_penalized_rewards(double rm_reward, std::span<const double> actor_lp,
                                         std::span<const double> ref_lp, double kl_coef) {
  if (actor_lp.size() != ref_lp.size() || actor_lp.empty()) {
    throw ContractError("kl_penalized_rewards: log-prob arrays must be nonempty and equal length");
  }
  std::vector<double> rewards(actor_lp.size());
  for (std::size_t t = 0; t < actor_lp.size(); ++t) {
    rewards[t] = -kl_coef * (actor_lp[t] - ref_lp[t]);
  }
  rewards.back() += rm_reward;
  return rewards;
}

Tensor ppo_actor_loss(const Tensor& new_lp, std::span<const double> old_lp,
                      std::span<const double> advantages, double clip_eps,
                      const std::vector<double>& mask) {
  const std::size_t t_len = new_lp.size();
  if (old_lp.size() != t_len || advantages.size() != t_len || mask.size() != t_len) {
    throw ContractError("ppo_actor_loss: array length mismatch");
  }
  Tensor old_t({t_len}, std::vector<double>(old_lp.begin(), old_lp.end()));
  Tensor adv_t({t_len}, std::vector<double>(advantages.begin(), advantages.end()));
  Tensor ratio = vexp(sub(new_lp, old_t));
  Tensor unclipped = mul(ratio, adv_t);
  Tensor clipped = mul(clamp(ratio, 1.0 - clip_eps, 1.0 + clip_eps), adv_t);
  return neg(masked_mean(minimum(unclipped, clipped), mask));
}

Tensor ppo_critic_loss(const Tensor& new_values, std::span<const double> old_values,
                       std::span<const double> returns, double value_clip,
                       const std::vector<double>& mask) {
  const std::size_t t_len = new_values.size();
  if (old_values.size() != t_len || returns.size() != t_len || mask.size() != t_len) {
    throw ContractError("ppo_critic_loss: array length mismatch");
  }
  Tensor old_t({t_len}, std::vector<double>(old_values.begin(), old_values.end()));
  Tensor ret_t({t_len}, std::vector<double>(returns.begin(), returns.end()));
  Tensor err = sub(new_values, ret_t);
  Tensor sq = mul(err, err);
  Tensor v_clipped = add(clamp(sub(new_values, old_t), -value_clip, value_clip), old_t);
  Tensor err_c = sub(v_clipped, ret_t);
  Tensor sq_c = mul(err_c, err_c);
  return masked_mean(maximum(sq, sq_c), mask);
}

namespace {
constexpr const char* kAttributeMarker = "\n[attributes] ";
}

std::string steerlm_format(const std::string& prompt_text, const AttributeSpec& attrs) {
  attrs.validate();
  if (attrs.empty()) return prompt_text;
  std::ostringstream os;
  os << prompt_text << kAttributeMarker;
  bool first = true;
  for (const auto& [name, value] : attrs.entries) {
    if (!first) os << ",";
    os << name << ":" << value;
    first = false;
  }
  os << "\n";
  return os.str();
}

SteerlmParsed steerlm_parse(const std::string& conditioned) {
  SteerlmParsed out;
  const auto pos = conditioned.rfind(kAttributeMarker);
  if (pos == std::string::npos) {
    out.prompt = conditioned;
    return out;
  }
  out.prompt = conditioned.substr(0, pos);
  const std::size_t start = pos + std::string(kAttributeMarker).size();
  auto end = conditioned.find('\n', start);
  if (end == std::string::npos) end = conditioned.size();
  const std::string rendered = conditioned.substr(start, end - start);
  std::istringstream is(rendered);
  std::string item;
  while (std::getline(is, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) {
      throw ContractError("steerlm_parse: malformed attribute item: " + item);
    }
    out.attrs.entries.emplace_back(item.substr(0, colon), std::stoi(item.substr(colon + 1)));
  }
  out.attrs.validate();
  return out;
}

SpinPairs spin_make_pairs(std::span<const SftExample> examples, const GenerateFn& generate_rejected) {
  SpinPairs out;
  for (const auto& ex : examples) {
    TokenSeq rejected = generate_rejected(ex.prompt);
    if (rejected == ex.response || rejected.empty()) {
      ++out.dropped;
      continue;
    }
    out.pairs.push_back(PreferenceExample{ex.prompt, ex.response, std::move(rejected)});
  }
  return out;
}

SpinPairs spin_make_pairs(std::span<const SftExample> examples, const ModelParams& reference,
                          std::size_t max_new) {
  return spin_make_pairs(examples, [&](const TokenSeq& prompt) {
    return generate(reference, prompt, max_new, SamplingSpec::greedy_spec()).tokens;
  });
}

}  // namespace aligner
