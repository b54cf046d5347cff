// SPDX-License-Identifier: Apache-2.0

#include "aligner/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <sstream>

#include "aligner/rng.hpp"

namespace aligner {

TokenSeq encode_bytes(const std::string& text) {
  TokenSeq out;
  out.reserve(text.size());
  for (unsigned char c : text) out.push_back(static_cast<std::int32_t>(c));
  return out;
}

std::string decode_bytes(const TokenSeq& ids) {
  std::string out;
  out.reserve(ids.size());
  for (auto id : ids) {
    if (id >= 0 && id < 256) out.push_back(static_cast<char>(id));
  }
  return out;
}

void ModelConfig::validate() const {
  if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 ||
      max_seq_len == 0) {
    throw ContractError("model config: all dimensions must be positive");
  }
  if (d_model % n_heads != 0) {
    throw ContractError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
  }
  if (lora && lora->rank == 0) {
    throw ContractError("model config: lora rank must be >= 1");
  }
}

bool ModelConfig::operator==(const ModelConfig& o) const {
  const bool lora_eq = lora.has_value() == o.lora.has_value() &&
                       (!lora || (lora->rank == o.lora->rank && lora->alpha == o.lora->alpha));
  return vocab_size == o.vocab_size && d_model == o.d_model && n_layers == o.n_layers &&
         n_heads == o.n_heads && d_ff == o.d_ff && max_seq_len == o.max_seq_len &&
         scalar_head == o.scalar_head && lora_eq;
}

Tensor& ModelParams::at(const std::string& name) {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("missing parameter: " + name);
  return it->second;
}

const Tensor& ModelParams::at(const std::string& name) const {
  auto it = tensors.find(name);
  if (it == tensors.end()) throw ContractError("missing parameter: " + name);
  return it->second;
}

std::vector<std::string> ModelParams::expected_names(const ModelConfig& config) {
  std::vector<std::string> names;
  names.push_back("tok_embed.weight");
  names.push_back("pos_embed.weight");
  for (std::size_t i = 0; i < config.n_layers; ++i) {
    const std::string base = "layers." + std::to_string(i) + ".";
    names.push_back(base + "attn_norm.weight");
    names.push_back(base + "attn_norm.bias");
    for (const char* proj : {"q_proj", "k_proj", "v_proj", "o_proj"}) {
      names.push_back(base + "attn." + proj + ".weight");
      if (config.lora) {
        names.push_back(base + "attn." + proj + ".lora_a");
        names.push_back(base + "attn." + proj + ".lora_b");
      }
    }
    names.push_back(base + "ffn_norm.weight");
    names.push_back(base + "ffn_norm.bias");
    names.push_back(base + "ffn.up_proj.weight");
    names.push_back(base + "ffn.down_proj.weight");
  }
  names.push_back("final_norm.weight");
  names.push_back("final_norm.bias");
  if (config.scalar_head) names.push_back("scalar_head.weight");
  return names;
}

std::vector<std::size_t> param_shape(const ModelConfig& config, const std::string& name) {
  const std::size_t d = config.d_model;
  if (name == "tok_embed.weight") return {config.vocab_size, d};
  if (name == "pos_embed.weight") return {config.max_seq_len, d};
  if (name == "final_norm.weight" || name == "final_norm.bias") return {d};
  if (name == "scalar_head.weight") return {d, 1};
  if (name.rfind("layers.", 0) == 0) {
    const auto rest = name.substr(name.find('.', 7) + 1);
    if (rest == "attn_norm.weight" || rest == "attn_norm.bias" || rest == "ffn_norm.weight" ||
        rest == "ffn_norm.bias") {
      return {d};
    }
    if (rest == "ffn.up_proj.weight") return {d, config.d_ff};
    if (rest == "ffn.down_proj.weight") return {config.d_ff, d};
    if (rest.rfind("attn.", 0) == 0) {
      if (rest.size() > 7 && rest.substr(rest.size() - 7) == ".weight") return {d, d};
      if (config.lora) {
        if (rest.substr(rest.size() - 7) == ".lora_a") return {d, config.lora->rank};
        if (rest.substr(rest.size() - 7) == ".lora_b") return {config.lora->rank, d};
      }
    }
  }
  throw ContractError("unknown parameter name: " + name);
}

std::size_t ModelParams::total_elements() const {
  std::size_t n = 0;
  for (const auto& [name, t] : tensors) n += t.size();
  return n;
}

std::vector<std::string> ModelParams::trainable_names() const {
  std::vector<std::string> out;
  for (const auto& name : expected_names(config)) {
    if (config.lora) {
      const bool adapter = name.find(".lora_") != std::string::npos;
      const bool head = name == "scalar_head.weight";
      if (!adapter && !head) continue;
    }
    out.push_back(name);
  }
  return out;
}

void ModelParams::set_requires_grad_on_trainable() {
  for (auto& [name, t] : tensors) t.set_requires_grad(false);
  for (const auto& name : trainable_names()) at(name).set_requires_grad(true);
}

void ModelParams::zero_grad() {
  for (auto& [name, t] : tensors) t.zero_grad();
}

ModelParams ModelParams::clone() const {
  ModelParams out;
  out.config = config;
  for (const auto& [name, t] : tensors) {
    Tensor copy(t.shape(), std::vector<double>(t.values().begin(), t.values().end()));
    copy.set_requires_grad(t.requires_grad());
    out.tensors.emplace(name, std::move(copy));
  }
  return out;
}

ModelParams init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  ModelParams params;
  params.config = config;
  for (const auto& name : ModelParams::expected_names(config)) {
    const auto shape = param_shape(config, name);
    const std::size_t n =
        std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
    std::vector<double> data(n);
    const bool is_norm_weight = name.find("norm.weight") != std::string::npos;
    const bool is_norm_bias = name.find("norm.bias") != std::string::npos;
    const bool is_lora_a = name.find(".lora_a") != std::string::npos;
    const bool is_lora_b = name.find(".lora_b") != std::string::npos;
    const bool is_head = name == "scalar_head.weight";
    if (is_norm_weight) {
      std::fill(data.begin(), data.end(), 1.0);
    } else if (is_norm_bias || is_lora_b || is_head) {
      std::fill(data.begin(), data.end(), 0.0);
    } else if (is_lora_a) {
      for (auto& x : data) x = rng.uniform(-0.02, 0.02);
    } else {
      for (auto& x : data) x = rng.normal(0.0, 0.02);
    }
    params.tensors.emplace(name, Tensor(shape, std::move(data)));
  }
  params.set_requires_grad_on_trainable();
  return params;
}

namespace {

// W plus the low-rank adapter path when present.
Tensor project(const ModelParams& params, const Tensor& x, const std::string& prefix) {
  Tensor out = matmul(x, params.at(prefix + ".weight"));
  if (params.config.lora && params.has(prefix + ".lora_a")) {
    Tensor delta = matmul(matmul(x, params.at(prefix + ".lora_a")), params.at(prefix + ".lora_b"));
    out = add(out, mul_scalar(delta, params.config.lora->scale()));
  }
  return out;
}

Tensor causal_mask(std::size_t t_len) {
  std::vector<double> m(t_len * t_len, 0.0);
  for (std::size_t i = 0; i < t_len; ++i)
    for (std::size_t j = i + 1; j < t_len; ++j) m[i * t_len + j] = -1e30;
  return Tensor({t_len, t_len}, std::move(m));
}

Tensor transformer_hidden(const ModelParams& params, const TokenSeq& tokens) {
  const auto& cfg = params.config;
  const std::size_t t_len = tokens.size();
  if (t_len == 0) throw ContractError("forward: empty token sequence");
  if (t_len > cfg.max_seq_len) {
    throw ContractError("forward: sequence length " + std::to_string(t_len) +
                        " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  TokenSeq positions(t_len);
  std::iota(positions.begin(), positions.end(), 0);

  Tensor x = add(embedding(params.at("tok_embed.weight"), tokens),
                 embedding(params.at("pos_embed.weight"), positions));
  const Tensor mask = causal_mask(t_len);
  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

  for (std::size_t l = 0; l < cfg.n_layers; ++l) {
    const std::string base = "layers." + std::to_string(l) + ".";
    Tensor h = layer_norm(x, params.at(base + "attn_norm.weight"), params.at(base + "attn_norm.bias"));
    Tensor q = project(params, h, base + "attn.q_proj");
    Tensor k = project(params, h, base + "attn.k_proj");
    Tensor v = project(params, h, base + "attn.v_proj");
    std::vector<Tensor> head_outs;
    head_outs.reserve(cfg.n_heads);
    for (std::size_t hd = 0; hd < cfg.n_heads; ++hd) {
      Tensor qh = slice_cols(q, hd * dh, (hd + 1) * dh);
      Tensor kh = slice_cols(k, hd * dh, (hd + 1) * dh);
      Tensor vh = slice_cols(v, hd * dh, (hd + 1) * dh);
      Tensor scores = add(mul_scalar(matmul_nt(qh, kh), inv_sqrt_dh), mask);
      head_outs.push_back(matmul(softmax(scores), vh));
    }
    Tensor attn_out = project(params, concat_cols(head_outs), base + "attn.o_proj");
    x = add(x, attn_out);

    Tensor h2 = layer_norm(x, params.at(base + "ffn_norm.weight"), params.at(base + "ffn_norm.bias"));
    Tensor up = gelu(matmul(h2, params.at(base + "ffn.up_proj.weight")));
    x = add(x, matmul(up, params.at(base + "ffn.down_proj.weight")));
  }
  return layer_norm(x, params.at("final_norm.weight"), params.at("final_norm.bias"));
}

}  // namespace

Tensor forward_hidden(const ModelParams& params, const TokenSeq& tokens) {
  return transformer_hidden(params, tokens);
}

Tensor forward_one(const ModelParams& params, const TokenSeq& tokens) {
  // Output head is weight-tied to the token embedding.
  return matmul_nt(transformer_hidden(params, tokens), params.at("tok_embed.weight"));
}

std::vector<Tensor> forward(const ModelParams& params, const std::vector<TokenSeq>& batch) {
  std::vector<Tensor> out;
  out.reserve(batch.size());
  for (const auto& tokens : batch) out.push_back(forward_one(params, tokens));
  return out;
}

namespace {

// Plain-vector inference path: one token per step against per-layer KV
// caches. Kept tape-free; generation never needs gradients.
class KvSession {
 public:
  explicit KvSession(const ModelParams& params) : p_(params), cfg_(params.config) {
    k_cache_.resize(cfg_.n_layers);
    v_cache_.resize(cfg_.n_layers);
  }

  std::size_t pos() const { return n_fed_; }

  // Feeds one token; returns logits over the vocabulary.
  std::vector<double> step(std::int32_t token) {
    const std::size_t pos = n_fed_;
    if (pos >= cfg_.max_seq_len) {
      throw ContractError("generate: sequence length exceeds max_seq_len " +
                          std::to_string(cfg_.max_seq_len));
    }
    if (token < 0 || static_cast<std::size_t>(token) >= cfg_.vocab_size) {
      throw IndexError("generate: token id " + std::to_string(token) + " out of range [0," +
                       std::to_string(cfg_.vocab_size) + ")");
    }
    const std::size_t d = cfg_.d_model;
    const auto& tok_embed = p_.at("tok_embed.weight").values();
    const auto& pos_embed = p_.at("pos_embed.weight").values();
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) {
      x[j] = tok_embed[static_cast<std::size_t>(token) * d + j] + pos_embed[pos * d + j];
    }

    const std::size_t dh = cfg_.head_dim();
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    for (std::size_t l = 0; l < cfg_.n_layers; ++l) {
      const std::string base = "layers." + std::to_string(l) + ".";
      std::vector<double> h = layer_norm_vec(x, base + "attn_norm");
      std::vector<double> q = project_vec(h, base + "attn.q_proj");
      std::vector<double> k = project_vec(h, base + "attn.k_proj");
      std::vector<double> v = project_vec(h, base + "attn.v_proj");
      auto& kc = k_cache_[l];
      auto& vc = v_cache_[l];
      kc.insert(kc.end(), k.begin(), k.end());
      vc.insert(vc.end(), v.begin(), v.end());
      const std::size_t t_len = pos + 1;

      std::vector<double> attn_out(d, 0.0);
      std::vector<double> scores(t_len);
      for (std::size_t hd = 0; hd < cfg_.n_heads; ++hd) {
        const std::size_t off = hd * dh;
        double mx = -1e300;
        for (std::size_t t = 0; t < t_len; ++t) {
          double s = 0.0;
          const double* krow = kc.data() + t * d + off;
          for (std::size_t j = 0; j < dh; ++j) s += q[off + j] * krow[j];
          scores[t] = s * inv_sqrt_dh;
          mx = std::max(mx, scores[t]);
        }
        double se = 0.0;
        for (std::size_t t = 0; t < t_len; ++t) {
          scores[t] = std::exp(scores[t] - mx);
          se += scores[t];
        }
        for (std::size_t t = 0; t < t_len; ++t) {
          const double w = scores[t] / se;
          const double* vrow = vc.data() + t * d + off;
          for (std::size_t j = 0; j < dh; ++j) attn_out[off + j] += w * vrow[j];
        }
      }
      std::vector<double> o = project_vec(attn_out, base + "attn.o_proj");
      for (std::size_t j = 0; j < d; ++j) x[j] += o[j];

      std::vector<double> h2 = layer_norm_vec(x, base + "ffn_norm");
      std::vector<double> up = matvec(h2, p_.at(base + "ffn.up_proj.weight"));
      for (auto& u : up) u = gelu_scalar(u);
      std::vector<double> down = matvec(up, p_.at(base + "ffn.down_proj.weight"));
      for (std::size_t j = 0; j < d; ++j) x[j] += down[j];
    }

    std::vector<double> hidden = layer_norm_final(x);
    const std::size_t v_size = cfg_.vocab_size;
    std::vector<double> logits(v_size, 0.0);
    for (std::size_t vv = 0; vv < v_size; ++vv) {
      const double* row = tok_embed.data() + vv * d;
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += hidden[j] * row[j];
      logits[vv] = acc;
    }
    ++n_fed_;
    return logits;
  }

 private:
  static double gelu_scalar(double x) {
    constexpr double kC = 0.7978845608028654;
    return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
  }

  std::vector<double> matvec(const std::vector<double>& x, const Tensor& w) const {
    const std::size_t in = w.rows(), out = w.cols();
    std::vector<double> y(out, 0.0);
    const auto wv = w.values();
    for (std::size_t i = 0; i < in; ++i) {
      const double xi = x[i];
      if (xi == 0.0) continue;
      const double* row = wv.data() + i * out;
      for (std::size_t j = 0; j < out; ++j) y[j] += xi * row[j];
    }
    return y;
  }

  std::vector<double> project_vec(const std::vector<double>& x, const std::string& prefix) const {
    std::vector<double> y = matvec(x, p_.at(prefix + ".weight"));
    if (cfg_.lora && p_.has(prefix + ".lora_a")) {
      const auto xa = matvec(x, p_.at(prefix + ".lora_a"));
      auto delta = matvec(xa, p_.at(prefix + ".lora_b"));
      const double s = cfg_.lora->scale();
      for (std::size_t j = 0; j < y.size(); ++j) y[j] += s * delta[j];
    }
    return y;
  }

  std::vector<double> layer_norm_core(const std::vector<double>& x, const Tensor& w,
                                      const Tensor& b) const {
    const std::size_t d = x.size();
    double mu = 0.0;
    for (double v : x) mu += v;
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (double v : x) var += (v - mu) * (v - mu);
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + 1e-5);
    std::vector<double> y(d);
    for (std::size_t j = 0; j < d; ++j) y[j] = w.at(j) * ((x[j] - mu) * is) + b.at(j);
    return y;
  }

  std::vector<double> layer_norm_vec(const std::vector<double>& x, const std::string& prefix) const {
    return layer_norm_core(x, p_.at(prefix + ".weight"), p_.at(prefix + ".bias"));
  }

  std::vector<double> layer_norm_final(const std::vector<double>& x) const {
    return layer_norm_core(x, p_.at("final_norm.weight"), p_.at("final_norm.bias"));
  }

  const ModelParams& p_;
  const ModelConfig& cfg_;
  std::size_t n_fed_ = 0;
  std::vector<std::vector<double>> k_cache_;
  std::vector<std::vector<double>> v_cache_;
};

std::vector<double> log_softmax_vec(const std::vector<double>& logits) {
  double mx = logits[0];
  for (double v : logits) mx = std::max(mx, v);
  double se = 0.0;
  for (double v : logits) se += std::exp(v - mx);
  const double lse = mx + std::log(se);
  std::vector<double> out(logits.size());
  for (std::size_t i = 0; i < logits.size(); ++i) out[i] = logits[i] - lse;
  return out;
}

std::size_t argmax_index(const std::vector<double>& v) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < v.size(); ++i) {
    if (v[i] > v[best]) best = i;
  }
  return best;
}

}  // namespace

GenerateResult generate(const ModelParams& params, const TokenSeq& prompt, std::size_t max_new,
                        const SamplingSpec& sampling) {
  if (prompt.empty()) throw ContractError("generate: prompt must be nonempty");
  KvSession session(params);
  std::vector<double> logits;
  for (auto tok : prompt) logits = session.step(tok);

  Rng rng(sampling.seed);
  GenerateResult result;
  const std::size_t budget =
      std::min(max_new, params.config.max_seq_len - std::min(prompt.size(), params.config.max_seq_len));
  for (std::size_t i = 0; i < budget; ++i) {
    const auto model_lp = log_softmax_vec(logits);
    std::size_t chosen;
    if (sampling.greedy) {
      chosen = argmax_index(logits);
    } else {
      const double tau = std::max(sampling.temperature, 1e-12);
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      std::vector<double> probs(logits.size());
      double se = 0.0;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        probs[j] = std::exp((logits[j] - mx) / tau);
        se += probs[j];
      }
      const double u = rng.uniform() * se;
      double acc = 0.0;
      chosen = logits.size() - 1;
      for (std::size_t j = 0; j < logits.size(); ++j) {
        acc += probs[j];
        if (u < acc) {
          chosen = j;
          break;
        }
      }
    }
    const auto tok = static_cast<std::int32_t>(chosen);
    result.tokens.push_back(tok);
    result.logprobs.push_back(model_lp[chosen]);
    if (tok == kEotToken) break;
    if (i + 1 < budget) logits = session.step(tok);
  }
  return result;
}

std::vector<double> sequence_logprobs(const ModelParams& params, const TokenSeq& tokens) {
  if (tokens.empty()) return {};
  KvSession session(params);
  std::vector<double> out(tokens.size(), 0.0);
  std::vector<double> logits = session.step(tokens[0]);
  for (std::size_t t = 1; t < tokens.size(); ++t) {
    const auto lp = log_softmax_vec(logits);
    out[t] = lp[static_cast<std::size_t>(tokens[t])];
    logits = session.step(tokens[t]);
  }
  return out;
}

ModelParams merge_lora(const ModelParams& params) {
  if (!params.config.lora) return params.clone();
  ModelParams out;
  out.config = params.config;
  out.config.lora.reset();
  const double scale = params.config.lora->scale();
  for (const auto& name : ModelParams::expected_names(out.config)) {
    const Tensor& src = params.at(name);
    std::vector<double> data(src.values().begin(), src.values().end());
    const std::string lora_a = name.substr(0, name.size() - std::strlen(".weight")) + ".lora_a";
    if (name.find("attn.") != std::string::npos && params.has(lora_a)) {
      const std::string lora_b = lora_a.substr(0, lora_a.size() - 2) + "_b";
      const Tensor& a = params.at(lora_a);
      const Tensor& b = params.at(lora_b);
      const std::size_t d_in = a.rows(), r = a.cols(), d_out = b.cols();
      for (std::size_t i = 0; i < d_in; ++i)
        for (std::size_t p = 0; p < r; ++p) {
          const double av = a.at(i, p);
          if (av == 0.0) continue;
          for (std::size_t j = 0; j < d_out; ++j) data[i * d_out + j] += scale * av * b.at(p, j);
        }
    }
    out.tensors.emplace(name, Tensor(src.shape(), std::move(data)));
  }
  out.set_requires_grad_on_trainable();
  return out;
}

namespace {

constexpr char kMagic[8] = {'A', 'L', 'G', 'N', 'C', 'K', 'P', '1'};
constexpr std::uint32_t kVersion = 1;

void write_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void write_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

void write_f64(std::ostream& os, double v) {
  std::uint64_t bits;
  std::memcpy(&bits, &v, 8);
  write_u64(os, bits);
}

std::uint32_t read_u32(std::istream& is) {
  unsigned char b[4];
  is.read(reinterpret_cast<char*>(b), 4);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t read_u64(std::istream& is) {
  unsigned char b[8];
  is.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

double read_f64(std::istream& is) {
  const std::uint64_t bits = read_u64(is);
  double v;
  std::memcpy(&v, &bits, 8);
  return v;
}

}  // namespace

void save_checkpoint(const ModelParams& params, const std::string& path) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw ContractError("checkpoint: cannot open for write: " + path);
  os.write(kMagic, 8);
  write_u32(os, kVersion);
  const auto& cfg = params.config;
  write_u64(os, cfg.vocab_size);
  write_u64(os, cfg.d_model);
  write_u64(os, cfg.n_layers);
  write_u64(os, cfg.n_heads);
  write_u64(os, cfg.d_ff);
  write_u64(os, cfg.max_seq_len);
  write_u64(os, cfg.lora ? cfg.lora->rank : 0);
  write_f64(os, cfg.lora ? cfg.lora->alpha : 0.0);
  write_u32(os, cfg.scalar_head ? 1 : 0);

  const auto names = ModelParams::expected_names(cfg);
  write_u64(os, names.size());
  for (const auto& name : names) {
    const Tensor& t = params.at(name);
    write_u32(os, static_cast<std::uint32_t>(name.size()));
    os.write(name.data(), static_cast<std::streamsize>(name.size()));
    write_u32(os, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) write_u64(os, d);
    for (double v : t.values()) write_f64(os, v);
  }
  if (!os) throw ContractError("checkpoint: write failed: " + path);
}

ModelParams load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw ContractError("checkpoint: cannot open: " + path);
  char magic[8];
  is.read(magic, 8);
  if (!is || std::memcmp(magic, kMagic, 8) != 0) {
    throw ContractError("checkpoint: bad magic in " + path);
  }
  const auto version = read_u32(is);
  if (version != kVersion) {
    throw ContractError("checkpoint: unsupported format version " + std::to_string(version) +
                        " (expected " + std::to_string(kVersion) + ")");
  }
  ModelConfig cfg;
  cfg.vocab_size = read_u64(is);
  cfg.d_model = read_u64(is);
  cfg.n_layers = read_u64(is);
  cfg.n_heads = read_u64(is);
  cfg.d_ff = read_u64(is);
  cfg.max_seq_len = read_u64(is);
  const auto lora_rank = read_u64(is);
  const auto lora_alpha = read_f64(is);
  if (lora_rank > 0) cfg.lora = LoraConfig{lora_rank, lora_alpha};
  cfg.scalar_head = read_u32(is) != 0;
  cfg.validate();

  ModelParams params;
  params.config = cfg;
  const auto n_params = read_u64(is);
  for (std::uint64_t i = 0; i < n_params; ++i) {
    const auto name_len = read_u32(is);
    std::string name(name_len, '\0');
    is.read(name.data(), name_len);
    const auto ndim = read_u32(is);
    std::vector<std::size_t> shape(ndim);
    std::size_t total = 1;
    for (auto& d : shape) {
      d = read_u64(is);
      total *= d;
    }
    std::vector<double> data(total);
    for (auto& v : data) v = read_f64(is);
    if (!is) throw ContractError("checkpoint: truncated file: " + path);
    const auto expected_shape = param_shape(cfg, name);
    if (shape != expected_shape) {
      throw ContractError("checkpoint: shape mismatch for " + name + ": file " + shape_str(shape) +
                          " vs config " + shape_str(expected_shape));
    }
    if (params.tensors.count(name)) throw ContractError("checkpoint: duplicate parameter " + name);
    params.tensors.emplace(name, Tensor(shape, std::move(data)));
  }
  for (const auto& name : ModelParams::expected_names(cfg)) {
    if (!params.has(name)) throw ContractError("checkpoint: missing parameter " + name);
  }
  if (params.tensors.size() != ModelParams::expected_names(cfg).size()) {
    throw ContractError("checkpoint: unexpected extra parameters in " + path);
  }
  params.set_requires_grad_on_trainable();
  return params;
}

ModelParams load_checkpoint(const std::string& path, const ModelConfig& expected) {
  ModelParams params = load_checkpoint(path);
  if (!(params.config == expected)) {
    throw ContractError("checkpoint: config mismatch loading " + path);
  }
  return params;
}

}  // namespace aligner
