// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_LAYOUT_HPP_
#define ALIGNER_LAYOUT_HPP_

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "aligner/model.hpp"

namespace aligner {

struct PlanError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ParallelLayout {
  std::size_t tp = 1;
  std::size_t pp = 1;
  std::size_t dp = 1;
  std::size_t node_count = 1;
  std::size_t gpus_per_node = 1;

  std::size_t slots() const { return node_count * gpus_per_node; }
  void validate() const;
};

enum class SliceKind { kReplicated, kRows, kCols };

struct SliceSpec {
  SliceKind kind = SliceKind::kReplicated;
  std::size_t begin = 0;  // row/col range for splits; unused when replicated
  std::size_t end = 0;

  bool operator==(const SliceSpec&) const = default;
};

struct SlotPlan {
  std::size_t slot = 0;
  std::size_t tp_rank = 0;
  std::size_t pp_rank = 0;
  std::size_t dp_rank = 0;
  std::size_t layer_begin = 0;
  std::size_t layer_end = 0;
  std::map<std::string, SliceSpec> slices;
};

struct ShardPlan {
  ModelConfig config;
  ParallelLayout layout;
  std::vector<SlotPlan> slots;

  std::size_t layers_per_stage() const { return config.n_layers / layout.pp; }
  const SlotPlan& slot_at(std::size_t tp_rank, std::size_t pp_rank, std::size_t dp_rank) const;
  /// One line per worker slot: coordinates, stage range, slice specs.
  std::string to_text() const;
};

using ShardMap = std::map<std::string, Tensor>;

/// Deterministic shard plan; throws PlanError naming the first parameter
/// whose dimensions do not divide.
ShardPlan plan(const ModelConfig& config, const ParallelLayout& layout);

std::vector<ShardMap> shard(const ModelParams& params, const ShardPlan& plan);
ModelParams gather(const std::vector<ShardMap>& shards, const ShardPlan& plan);

struct ReshardStats {
  std::size_t unchanged = 0;    // same slot, same slice: no data movement
  std::size_t moved = 0;        // identical slice shipped to another slot
  std::size_t materialized = 0; // slice had to be reassembled from pieces
};

struct ReshardResult {
  std::vector<ShardMap> shards;
  ShardPlan plan;
  ReshardStats stats;
};

/// Converts training shards (tp, pp, dp) into inference shards under a
/// tp-only layout; equivalent to gather-then-shard without materializing
/// parameters whose slice only changes owner.
ReshardResult reshard_for_inference(const std::vector<ShardMap>& shards,
                                    const ShardPlan& train_plan,
                                    const ParallelLayout& infer_layout);

/// Simulated tensor-parallel forward over a pp=1 shard set, with explicit
/// partial-sum reductions at the row-parallel boundaries. Returns logits in
/// row-major [T x V] order.
std::vector<double> tp_forward_logits(const ShardPlan& plan, const std::vector<ShardMap>& shards,
                                      const TokenSeq& tokens);

struct StageCosts {
  double rm_infer = 0.0;
  double critic_infer = 0.0;
  double actor_sampling = 0.0;
  double ref_infer = 0.0;
  double critic_train = 0.0;
  double actor_train = 0.0;
  double actor_infer_init = 0.0;
};

struct AllocationReport {
  std::size_t actor_nodes = 0;
  std::size_t critic_nodes = 0;
  double infer_ratio = 0.0;  // (rm_infer + critic_infer) / (actor_sampling + ref_infer)
  bool infer_balanced = false;
  double train_ratio = 0.0;  // critic_train / (actor_train + actor_infer_init)
  bool train_fits = false;
  double band = 0.0;

  bool pass() const { return infer_balanced && train_fits; }
  std::string to_text() const;
};

/// Checks the allocation-sizing rules: server-side inference should roughly
/// match actor-side rollout work (within `band`), and critic training must
/// hide behind actor training plus inference initialization.
AllocationReport validate_allocation(std::size_t actor_nodes, std::size_t critic_nodes,
                                     const StageCosts& costs, double band = 1.5);

}  // namespace aligner

#endif  // ALIGNER_LAYOUT_HPP_
