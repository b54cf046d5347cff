// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_MODEL_HPP_
#define ALIGNER_MODEL_HPP_

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "aligner/tensor.hpp"

namespace aligner {

// Byte-level tokenizer: ids 0..255 are raw bytes, then two specials.
constexpr std::int32_t kPadToken = 256;
constexpr std::int32_t kEotToken = 257;
constexpr std::size_t kByteVocab = 258;

TokenSeq encode_bytes(const std::string& text);
std::string decode_bytes(const TokenSeq& ids);

struct LoraConfig {
  std::size_t rank = 0;
  double alpha = 1.0;
  double scale() const { return alpha / static_cast<double>(rank); }
};

struct ModelConfig {
  std::size_t vocab_size = kByteVocab;
  std::size_t d_model = 64;
  std::size_t n_layers = 2;
  std::size_t n_heads = 4;
  std::size_t d_ff = 256;
  std::size_t max_seq_len = 128;
  std::optional<LoraConfig> lora;
  // Adds a scalar projection head on the final hidden state (reward / value
  // models). Participates in the checkpoint name set.
  bool scalar_head = false;

  std::size_t head_dim() const { return d_model / n_heads; }
  void validate() const;
  bool operator==(const ModelConfig& other) const;
};

/// Named parameter collection. Names are the shard/refit keys.
struct ModelParams {
  ModelConfig config;
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name);
  const Tensor& at(const std::string& name) const;
  bool has(const std::string& name) const { return tensors.count(name) != 0; }

  /// Parameter names this config implies, in canonical order.
  static std::vector<std::string> expected_names(const ModelConfig& config);

  std::size_t total_elements() const;
  /// Names updated by the optimizer: adapter (+head) tensors when LoRA is
  /// active, every tensor otherwise.
  std::vector<std::string> trainable_names() const;

  void set_requires_grad_on_trainable();
  void zero_grad();
  ModelParams clone() const;
};

ModelParams init_params(const ModelConfig& config, std::uint64_t seed);

/// Shape a named parameter must have under a config; unknown names are a
/// contract error.
std::vector<std::size_t> param_shape(const ModelConfig& config, const std::string& name);

struct SamplingSpec {
  bool greedy = true;
  double temperature = 1.0;
  std::uint64_t seed = 0;

  static SamplingSpec greedy_spec() { return {}; }
  static SamplingSpec temperature_spec(double tau, std::uint64_t seed) {
    return {false, tau, seed};
  }
};

struct GenerateResult {
  TokenSeq tokens;                // includes the end-of-text id when emitted
  std::vector<double> logprobs;   // log p(token) under the model, per token
};

/// Causal logits for a batch of sequences; one [T×V] tensor per sequence.
/// Records on the current tape when one is installed.
std::vector<Tensor> forward(const ModelParams& params, const std::vector<TokenSeq>& batch);
Tensor forward_one(const ModelParams& params, const TokenSeq& tokens);

/// Final-norm hidden states [T×d] for one sequence (reward/value heads).
Tensor forward_hidden(const ModelParams& params, const TokenSeq& tokens);

/// Incremental KV-cached decoding. Inference only, never records.
GenerateResult generate(const ModelParams& params, const TokenSeq& prompt, std::size_t max_new,
                        const SamplingSpec& sampling);

/// Per-position log p(tokens[t] | tokens[<t]) for t ≥ 1, without gradients.
std::vector<double> sequence_logprobs(const ModelParams& params, const TokenSeq& tokens);

ModelParams merge_lora(const ModelParams& params);

void save_checkpoint(const ModelParams& params, const std::string& path);
ModelParams load_checkpoint(const std::string& path);
ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected);

}  // namespace aligner

#endif  // ALIGNER_MODEL_HPP_
