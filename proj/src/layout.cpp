// SPDX-License-Identifier: Apache-2.0

#include "aligner/layout.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace aligner {

void ParallelLayout::validate() const {
  if (tp == 0 || pp == 0 || dp == 0 || node_count == 0 || gpus_per_node == 0) {
    throw PlanError("layout: all degrees must be positive");
  }
  if (tp * pp * dp != slots()) {
    throw PlanError("layout: tp*pp*dp = " + std::to_string(tp * pp * dp) +
                    " does not equal node_count*gpus_per_node = " + std::to_string(slots()));
  }
}

namespace {

// Split rule per parameter, following the usual convention: QKV and FF-up
// column-split, attention-out and FF-down row-split, embeddings split over
// the vocabulary rows, norms and small tensors replicated.
SliceKind split_kind(const std::string& name) {
  if (name == "tok_embed.weight") return SliceKind::kRows;
  if (name.find("attn.o_proj.weight") != std::string::npos) return SliceKind::kRows;
  if (name.find("attn.o_proj.lora_a") != std::string::npos) return SliceKind::kRows;
  if (name.find("ffn.down_proj.weight") != std::string::npos) return SliceKind::kRows;
  if (name.find("ffn.up_proj.weight") != std::string::npos) return SliceKind::kCols;
  if (name.find("_proj.weight") != std::string::npos) return SliceKind::kCols;  // q/k/v
  if (name.find("_proj.lora_b") != std::string::npos &&
      name.find("o_proj") == std::string::npos) {
    return SliceKind::kCols;  // adapters follow their base projection's split
  }
  return SliceKind::kReplicated;
}

// Stage owning a parameter: embeddings on the first stage, final norm and
// head on the last, transformer layers by contiguous range.
std::size_t stage_of(const std::string& name, const ModelConfig& config, std::size_t pp) {
  if (name == "tok_embed.weight" || name == "pos_embed.weight") return 0;
  if (name.rfind("layers.", 0) == 0) {
    const std::size_t layer = std::stoul(name.substr(7));
    return layer / (config.n_layers / pp);
  }
  return pp - 1;
}

SliceSpec slice_for(const std::string& name, const ModelConfig& config, std::size_t tp,
                    std::size_t tp_rank) {
  const auto kind = split_kind(name);
  if (kind == SliceKind::kReplicated || tp == 1) {
    return {SliceKind::kReplicated, 0, 0};
  }
  const auto shape = param_shape(config, name);
  const std::size_t dim = (kind == SliceKind::kRows) ? shape[0] : shape[1];
  if (dim % tp != 0) {
    throw PlanError("plan: parameter " + name + " " +
                    (kind == SliceKind::kRows ? std::string("rows ") : std::string("cols ")) +
                    std::to_string(dim) + " not divisible by tp=" + std::to_string(tp));
  }
  const std::size_t width = dim / tp;
  return {kind, tp_rank * width, (tp_rank + 1) * width};
}

std::size_t slot_index(const ParallelLayout& l, std::size_t tp_rank, std::size_t pp_rank,
                       std::size_t dp_rank) {
  return dp_rank * (l.pp * l.tp) + pp_rank * l.tp + tp_rank;
}

Tensor cut_slice(const Tensor& full, const SliceSpec& spec) {
  if (spec.kind == SliceKind::kReplicated) {
    return Tensor(full.shape(), std::vector<double>(full.values().begin(), full.values().end()));
  }
  const std::size_t rows = full.rank() == 1 ? full.size() : full.rows();
  const std::size_t cols = full.rank() == 1 ? 1 : full.cols();
  if (spec.kind == SliceKind::kRows) {
    std::vector<double> out((spec.end - spec.begin) * cols);
    std::copy(full.values().begin() + static_cast<std::ptrdiff_t>(spec.begin * cols),
              full.values().begin() + static_cast<std::ptrdiff_t>(spec.end * cols), out.begin());
    if (full.rank() == 1) return Tensor({spec.end - spec.begin}, std::move(out));
    return Tensor({spec.end - spec.begin, cols}, std::move(out));
  }
  std::vector<double> out(rows * (spec.end - spec.begin));
  const std::size_t w = spec.end - spec.begin;
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < w; ++j) out[i * w + j] = full.at(i, spec.begin + j);
  return Tensor({rows, w}, std::move(out));
}

}  // namespace

const SlotPlan& ShardPlan::slot_at(std::size_t tp_rank, std::size_t pp_rank,
                                   std::size_t dp_rank) const {
  return slots[slot_index(layout, tp_rank, pp_rank, dp_rank)];
}

std::string ShardPlan::to_text() const {
  std::ostringstream os;
  os << "shard plan: tp=" << layout.tp << " pp=" << layout.pp << " dp=" << layout.dp
     << " slots=" << layout.slots() << "\n";
  for (const auto& s : slots) {
    os << "slot " << s.slot << " (tp=" << s.tp_rank << ",pp=" << s.pp_rank << ",dp=" << s.dp_rank
       << ") layers [" << s.layer_begin << "," << s.layer_end << ")";
    for (const auto& [name, spec] : s.slices) {
      os << " " << name << "=";
      switch (spec.kind) {
        case SliceKind::kReplicated: os << "full"; break;
        case SliceKind::kRows: os << "rows[" << spec.begin << "," << spec.end << ")"; break;
        case SliceKind::kCols: os << "cols[" << spec.begin << "," << spec.end << ")"; break;
      }
    }
    os << "\n";
  }
  return os.str();
}

ShardPlan plan(const ModelConfig& config, const ParallelLayout& layout) {
  config.validate();
  layout.validate();
  if (config.n_layers % layout.pp != 0) {
    throw PlanError("plan: layer count " + std::to_string(config.n_layers) +
                    " not divisible by pp=" + std::to_string(layout.pp));
  }
  if (config.n_heads % layout.tp != 0) {
    throw PlanError("plan: parameter attn.q_proj.weight heads " + std::to_string(config.n_heads) +
                    " not divisible by tp=" + std::to_string(layout.tp));
  }

  ShardPlan out;
  out.config = config;
  out.layout = layout;
  out.slots.resize(layout.slots());
  const std::size_t layers_per_stage = config.n_layers / layout.pp;
  const auto names = ModelParams::expected_names(config);

  for (std::size_t dp_rank = 0; dp_rank < layout.dp; ++dp_rank)
    for (std::size_t pp_rank = 0; pp_rank < layout.pp; ++pp_rank)
      for (std::size_t tp_rank = 0; tp_rank < layout.tp; ++tp_rank) {
        SlotPlan sp;
        sp.slot = slot_index(layout, tp_rank, pp_rank, dp_rank);
        sp.tp_rank = tp_rank;
        sp.pp_rank = pp_rank;
        sp.dp_rank = dp_rank;
        sp.layer_begin = pp_rank * layers_per_stage;
        sp.layer_end = (pp_rank + 1) * layers_per_stage;
        for (const auto& name : names) {
          if (stage_of(name, config, layout.pp) != pp_rank) continue;
          sp.slices.emplace(name, slice_for(name, config, layout.tp, tp_rank));
        }
        out.slots[sp.slot] = std::move(sp);
      }
  return out;
}

std::vector<ShardMap> shard(const ModelParams& params, const ShardPlan& plan) {
  if (!(params.config == plan.config)) {
    throw PlanError("shard: parameter config does not match plan config");
  }
  std::vector<ShardMap> out(plan.slots.size());
  for (const auto& sp : plan.slots) {
    for (const auto& [name, spec] : sp.slices) {
      out[sp.slot].emplace(name, cut_slice(params.at(name), spec));
    }
  }
  return out;
}

namespace {

void check_replica_consistency(const std::vector<ShardMap>& shards, std::size_t a, std::size_t b,
                               const std::string& name) {
  const auto& ta = shards[a].at(name);
  const auto& tb = shards[b].at(name);
  if (ta.shape() != tb.shape() ||
      !std::equal(ta.values().begin(), ta.values().end(), tb.values().begin())) {
    throw PlanError("gather: replicas of " + name + " disagree between slots " +
                    std::to_string(a) + " and " + std::to_string(b));
  }
}

}  // namespace

ModelParams gather(const std::vector<ShardMap>& shards, const ShardPlan& plan) {
  if (shards.size() != plan.slots.size()) {
    throw PlanError("gather: expected " + std::to_string(plan.slots.size()) + " shards, got " +
                    std::to_string(shards.size()));
  }
  ModelParams out;
  out.config = plan.config;
  const auto& layout = plan.layout;
  for (const auto& name : ModelParams::expected_names(plan.config)) {
    const std::size_t pp_rank = stage_of(name, plan.config, layout.pp);
    const auto shape = param_shape(plan.config, name);
    const std::size_t rows = shape[0];
    const std::size_t cols = shape.size() == 1 ? 1 : shape[1];
    std::vector<double> data(rows * cols, 0.0);

    const auto& slot0 = plan.slot_at(0, pp_rank, 0);
    if (slot0.slices.find(name) == slot0.slices.end()) {
      throw PlanError("gather: plan does not assign parameter " + name);
    }
    for (std::size_t tp_rank = 0; tp_rank < layout.tp; ++tp_rank) {
      const auto& sp = plan.slot_at(tp_rank, pp_rank, 0);
      const auto& spec = sp.slices.at(name);
      const auto it = shards[sp.slot].find(name);
      if (it == shards[sp.slot].end()) {
        throw PlanError("gather: missing shard for " + name + " at slot " +
                        std::to_string(sp.slot));
      }
      const Tensor& piece = it->second;
      switch (spec.kind) {
        case SliceKind::kReplicated:
          if (tp_rank == 0) {
            std::copy(piece.values().begin(), piece.values().end(), data.begin());
          } else {
            check_replica_consistency(shards, slot0.slot, sp.slot, name);
          }
          break;
        case SliceKind::kRows:
          std::copy(piece.values().begin(), piece.values().end(),
                    data.begin() + static_cast<std::ptrdiff_t>(spec.begin * cols));
          break;
        case SliceKind::kCols:
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = spec.begin; j < spec.end; ++j) {
              data[i * cols + j] = piece.at(i, j - spec.begin);
            }
          break;
      }
    }
    // Data-parallel replicas must hold identical bytes.
    for (std::size_t dp_rank = 1; dp_rank < layout.dp; ++dp_rank) {
      check_replica_consistency(shards, slot0.slot, plan.slot_at(0, pp_rank, dp_rank).slot, name);
    }
    out.tensors.emplace(name, Tensor(shape, std::move(data)));
  }
  out.set_requires_grad_on_trainable();
  return out;
}

ReshardResult reshard_for_inference(const std::vector<ShardMap>& shards,
                                    const ShardPlan& train_plan,
                                    const ParallelLayout& infer_layout) {
  if (infer_layout.pp != 1) {
    throw PlanError("reshard: inference layout must be tensor-parallel only (pp=1), got pp=" +
                    std::to_string(infer_layout.pp));
  }
  ReshardResult out;
  out.plan = plan(train_plan.config, infer_layout);
  out.shards.resize(out.plan.slots.size());

  // Gathered full parameters, built only if some slice must be reassembled.
  ModelParams full;
  bool full_ready = false;
  auto ensure_full = [&]() -> ModelParams& {
    if (!full_ready) {
      full = gather(shards, train_plan);
      full_ready = true;
    }
    return full;
  };

  for (const auto& sp : out.plan.slots) {
    for (const auto& [name, target_spec] : sp.slices) {
      const std::size_t src_pp = stage_of(name, train_plan.config, train_plan.layout.pp);
      // A slice moves without materialization when some training slot holds
      // exactly the same span of the parameter; the same slot wins so that
      // unchanged layouts record no movement.
      const SlotPlan* source = nullptr;
      for (std::size_t tp_rank = 0; tp_rank < train_plan.layout.tp; ++tp_rank) {
        const auto& cand = train_plan.slot_at(tp_rank, src_pp, 0);
        if (cand.slices.at(name) != target_spec) continue;
        if (cand.slot == sp.slot) {
          source = &cand;
          break;
        }
        if (!source) source = &cand;
      }
      if (source != nullptr) {
        const Tensor& piece = shards[source->slot].at(name);
        out.shards[sp.slot].emplace(
            name, Tensor(piece.shape(),
                         std::vector<double>(piece.values().begin(), piece.values().end())));
        if (source->slot == sp.slot) {
          ++out.stats.unchanged;
        } else {
          ++out.stats.moved;
        }
      } else {
        out.shards[sp.slot].emplace(name, cut_slice(ensure_full().at(name), target_spec));
        ++out.stats.materialized;
      }
    }
  }
  return out;
}

namespace {

std::vector<double> matmul_raw(const std::vector<double>& x, std::size_t t_len, std::size_t in,
                               const Tensor& w) {
  const std::size_t out_dim = w.cols();
  std::vector<double> y(t_len * out_dim, 0.0);
  for (std::size_t r = 0; r < t_len; ++r)
    for (std::size_t p = 0; p < in; ++p) {
      const double xv = x[r * in + p];
      if (xv == 0.0) continue;
      for (std::size_t j = 0; j < out_dim; ++j) y[r * out_dim + j] += xv * w.at(p, j);
    }
  return y;
}

std::vector<double> layer_norm_raw(const std::vector<double>& x, std::size_t t_len, std::size_t d,
                                   const Tensor& w, const Tensor& b) {
  std::vector<double> y(t_len * d);
  for (std::size_t r = 0; r < t_len; ++r) {
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += x[r * d + j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double c = x[r * d + j] - mu;
      var += c * c;
    }
    var /= static_cast<double>(d);
    const double is = 1.0 / std::sqrt(var + 1e-5);
    for (std::size_t j = 0; j < d; ++j) {
      y[r * d + j] = w.at(j) * ((x[r * d + j] - mu) * is) + b.at(j);
    }
  }
  return y;
}

double gelu_raw(double x) {
  constexpr double kC = 0.7978845608028654;
  return 0.5 * x * (1.0 + std::tanh(kC * (x + 0.044715 * x * x * x)));
}

// Local projection of a replicated input against a column-split weight, with
// the matching adapter split (A replicated, B column-split).
std::vector<double> col_parallel_project(const ShardMap& shard, const ModelConfig& cfg,
                                         const std::string& prefix, const std::vector<double>& x,
                                         std::size_t t_len) {
  const Tensor& w = shard.at(prefix + ".weight");
  std::vector<double> y = matmul_raw(x, t_len, cfg.d_model, w);
  const auto a_it = shard.find(prefix + ".lora_a");
  if (a_it != shard.end()) {
    const Tensor& a = a_it->second;
    const Tensor& b = shard.at(prefix + ".lora_b");
    const auto xa = matmul_raw(x, t_len, cfg.d_model, a);
    const auto delta = matmul_raw(xa, t_len, a.cols(), b);
    const double s = cfg.lora->scale();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * delta[i];
  }
  return y;
}

// Partial output of a row-split projection from a column-split local input.
// Adapter split mirrors the base: A row-split, B replicated.
std::vector<double> row_parallel_project(const ShardMap& shard, const ModelConfig& cfg,
                                         const std::string& prefix, const std::vector<double>& x,
                                         std::size_t t_len, std::size_t local_in) {
  const Tensor& w = shard.at(prefix + ".weight");
  std::vector<double> y = matmul_raw(x, t_len, local_in, w);
  const auto a_it = shard.find(prefix + ".lora_a");
  if (a_it != shard.end()) {
    const Tensor& a = a_it->second;
    const Tensor& b = shard.at(prefix + ".lora_b");
    const auto xa = matmul_raw(x, t_len, local_in, a);
    const auto delta = matmul_raw(xa, t_len, a.cols(), b);
    const double s = cfg.lora->scale();
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += s * delta[i];
  }
  return y;
}

}  // namespace

std::vector<double> tp_forward_logits(const ShardPlan& plan, const std::vector<ShardMap>& shards,
                                      const TokenSeq& tokens) {
  if (plan.layout.pp != 1) {
    throw PlanError("tp_forward_logits: plan must be tensor-parallel only (pp=1)");
  }
  const auto& cfg = plan.config;
  const std::size_t tp = plan.layout.tp;
  const std::size_t t_len = tokens.size();
  const std::size_t d = cfg.d_model;

  // Embedding: vocabulary rows are split, so each rank contributes the rows
  // it owns and the result is reduced by summation.
  std::vector<double> x(t_len * d, 0.0);
  for (std::size_t tp_rank = 0; tp_rank < tp; ++tp_rank) {
    const auto& sp = plan.slot_at(tp_rank, 0, 0);
    const auto& spec = sp.slices.at("tok_embed.weight");
    const Tensor& local = shards[sp.slot].at("tok_embed.weight");
    for (std::size_t t = 0; t < t_len; ++t) {
      const auto id = static_cast<std::size_t>(tokens[t]);
      if (spec.kind == SliceKind::kReplicated) {
        if (tp_rank == 0) {
          for (std::size_t j = 0; j < d; ++j) x[t * d + j] += local.at(id, j);
        }
      } else if (id >= spec.begin && id < spec.end) {
        for (std::size_t j = 0; j < d; ++j) x[t * d + j] += local.at(id - spec.begin, j);
      }
    }
  }
  {  // Positions are replicated; add once.
    const auto& sp0 = plan.slot_at(0, 0, 0);
    const Tensor& pos = shards[sp0.slot].at("pos_embed.weight");
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t j = 0; j < d; ++j) x[t * d + j] += pos.at(t, j);
  }

  const std::size_t dh = cfg.head_dim();
  const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
  const std::size_t local_d = d / tp;
  const std::size_t local_heads = cfg.n_heads / tp;
  const std::size_t local_ff = cfg.d_ff / tp;

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string base = "layers." + std::to_string(layer) + ".";
    std::vector<double> attn_reduced(t_len * d, 0.0);
    for (std::size_t tp_rank = 0; tp_rank < tp; ++tp_rank) {
      const auto& shard_map = shards[plan.slot_at(tp_rank, 0, 0).slot];
      const auto h = layer_norm_raw(x, t_len, d, shard_map.at(base + "attn_norm.weight"),
                                    shard_map.at(base + "attn_norm.bias"));
      const auto q = col_parallel_project(shard_map, cfg, base + "attn.q_proj", h, t_len);
      const auto k = col_parallel_project(shard_map, cfg, base + "attn.k_proj", h, t_len);
      const auto v = col_parallel_project(shard_map, cfg, base + "attn.v_proj", h, t_len);

      // Causal attention over this rank's heads only.
      const std::size_t width = tp == 1 ? d : local_d;
      const std::size_t heads_here = tp == 1 ? cfg.n_heads : local_heads;
      std::vector<double> attn_local(t_len * width, 0.0);
      std::vector<double> scores(t_len);
      for (std::size_t hd = 0; hd < heads_here; ++hd) {
        const std::size_t off = hd * dh;
        for (std::size_t i = 0; i < t_len; ++i) {
          double mx = -1e300;
          for (std::size_t j2 = 0; j2 <= i; ++j2) {
            double s = 0.0;
            for (std::size_t p = 0; p < dh; ++p) {
              s += q[i * width + off + p] * k[j2 * width + off + p];
            }
            scores[j2] = s * inv_sqrt_dh;
            mx = std::max(mx, scores[j2]);
          }
          double se = 0.0;
          for (std::size_t j2 = 0; j2 <= i; ++j2) {
            scores[j2] = std::exp(scores[j2] - mx);
            se += scores[j2];
          }
          for (std::size_t j2 = 0; j2 <= i; ++j2) {
            const double w = scores[j2] / se;
            for (std::size_t p = 0; p < dh; ++p) {
              attn_local[i * width + off + p] += w * v[j2 * width + off + p];
            }
          }
        }
      }
      const auto partial =
          row_parallel_project(shard_map, cfg, base + "attn.o_proj", attn_local, t_len, width);
      for (std::size_t i = 0; i < partial.size(); ++i) attn_reduced[i] += partial[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += attn_reduced[i];

    std::vector<double> ffn_reduced(t_len * d, 0.0);
    for (std::size_t tp_rank = 0; tp_rank < tp; ++tp_rank) {
      const auto& shard_map = shards[plan.slot_at(tp_rank, 0, 0).slot];
      const auto h2 = layer_norm_raw(x, t_len, d, shard_map.at(base + "ffn_norm.weight"),
                                     shard_map.at(base + "ffn_norm.bias"));
      auto up = matmul_raw(h2, t_len, d, shard_map.at(base + "ffn.up_proj.weight"));
      for (auto& u : up) u = gelu_raw(u);
      const std::size_t width = tp == 1 ? cfg.d_ff : local_ff;
      const auto partial = matmul_raw(up, t_len, width, shard_map.at(base + "ffn.down_proj.weight"));
      for (std::size_t i = 0; i < partial.size(); ++i) ffn_reduced[i] += partial[i];
    }
    for (std::size_t i = 0; i < x.size(); ++i) x[i] += ffn_reduced[i];
  }

  const auto& sp0 = plan.slot_at(0, 0, 0);
  const auto hidden = layer_norm_raw(x, t_len, d, shards[sp0.slot].at("final_norm.weight"),
                                     shards[sp0.slot].at("final_norm.bias"));

  // Output head ties to the split embedding: each rank produces the logits
  // for its vocabulary rows (an all-gather in a real deployment).
  std::vector<double> logits(t_len * cfg.vocab_size, 0.0);
  for (std::size_t tp_rank = 0; tp_rank < tp; ++tp_rank) {
    const auto& sp = plan.slot_at(tp_rank, 0, 0);
    const auto& spec = sp.slices.at("tok_embed.weight");
    if (spec.kind == SliceKind::kReplicated && tp_rank != 0) continue;
    const Tensor& local = shards[sp.slot].at("tok_embed.weight");
    const std::size_t v0 = spec.kind == SliceKind::kReplicated ? 0 : spec.begin;
    const std::size_t v1 = spec.kind == SliceKind::kReplicated ? cfg.vocab_size : spec.end;
    for (std::size_t t = 0; t < t_len; ++t)
      for (std::size_t vv = v0; vv < v1; ++vv) {
        double acc = 0.0;
        for (std::size_t j = 0; j < d; ++j) acc += hidden[t * d + j] * local.at(vv - v0, j);
        logits[t * cfg.vocab_size + vv] = acc;
      }
  }
  return logits;
}

AllocationReport validate_allocation(std::size_t actor_nodes, std::size_t critic_nodes,
                                     const StageCosts& costs, double band) {
  if (band < 1.0) throw ContractError("validate_allocation: band must be >= 1");
  AllocationReport r;
  r.actor_nodes = actor_nodes;
  r.critic_nodes = critic_nodes;
  r.band = band;
  const double server_side = costs.rm_infer + costs.critic_infer;
  const double actor_side = costs.actor_sampling + costs.ref_infer;
  if (actor_side <= 0.0) throw ContractError("validate_allocation: actor-side costs must be > 0");
  r.infer_ratio = server_side / actor_side;
  r.infer_balanced = r.infer_ratio <= band && r.infer_ratio >= 1.0 / band;
  const double actor_train_side = costs.actor_train + costs.actor_infer_init;
  if (actor_train_side <= 0.0) {
    throw ContractError("validate_allocation: actor train costs must be > 0");
  }
  r.train_ratio = costs.critic_train / actor_train_side;
  r.train_fits = costs.critic_train <= actor_train_side;
  return r;
}

std::string AllocationReport::to_text() const {
  std::ostringstream os;
  os << "allocation check (actor=" << actor_nodes << " nodes, critic=" << critic_nodes
     << " nodes)\n";
  os << "  rule 1: [rm_infer + critic_infer] vs [actor_sampling + ref_infer] ratio "
     << infer_ratio << " (band " << 1.0 / band << ".." << band << "): "
     << (infer_balanced ? "pass" : "fail") << "\n";
  os << "  rule 2: critic_train <= actor_train + actor_infer_init ratio " << train_ratio << ": "
     << (train_fits ? "pass" : "fail") << "\n";
  return os.str();
}

}  // namespace aligner
