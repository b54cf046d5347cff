// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_ENGINE_HPP_
#define ALIGNER_ENGINE_HPP_

#include <atomic>
#include <cstdint>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <vector>

#include "aligner/layout.hpp"
#include "aligner/model.hpp"
#include "aligner/timing.hpp"

namespace aligner {

struct RefitError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GenTask {
  TokenSeq prompt;
  std::size_t max_new = 16;
  SamplingSpec sampling;
  // Load-balancing weight in predicted tokens; defaults to max_new.
  double estimated_cost = 0.0;

  double cost() const { return estimated_cost > 0.0 ? estimated_cost : static_cast<double>(max_new); }
};

struct EngineOptions {
  std::size_t n_workers = 1;
  // Models the latency-bound nature of single-token decode steps: a fixed
  // per-generated-token delay, zero by default.
  double simulated_token_latency = 0.0;
  // Gates holding a resharded tensor-parallel copy alongside the snapshot.
  bool reshard_for_inference = false;
  ParallelLayout infer_layout;  // tp-only
};

/// Longest-processing-time assignment: tasks sorted by cost descending, each
/// placed on the least-loaded worker, ties to the lowest worker index.
/// Returns task indices per worker.
std::vector<std::vector<std::size_t>> balance(const std::vector<GenTask>& tasks,
                                              std::size_t n_workers);

/// Inference-engine analog: a frozen weight snapshot behind a copy boundary,
/// refreshed in place by refit, never rebuilt.
class Engine {
 public:
  Engine(const ModelParams& params, const ModelConfig& config, EngineOptions opts);

  /// Replaces the snapshot in place. Name/shape mismatch throws RefitError
  /// and leaves the engine untouched; on success the generation counter
  /// advances and the cost lands in the "refit" category.
  void refit(const ModelParams& new_params);

  /// Runs every task against the frozen snapshot; results are index-aligned
  /// with the inputs. Safe to call concurrently with other generate_batch
  /// calls, never with refit.
  std::vector<GenerateResult> generate_batch(const std::vector<GenTask>& tasks);

  std::uint64_t generation_counter() const { return generation_.load(); }
  double build_seconds() const { return build_seconds_; }
  CostBook costs() const;
  const ModelParams& snapshot() const { return snapshot_; }
  const EngineOptions& options() const { return opts_; }
  /// Tensor-parallel copy of the snapshot, kept when resharding is enabled;
  /// refreshed by every refit.
  const std::vector<ShardMap>& inference_shards() const { return infer_shards_; }
  const ShardPlan& inference_plan() const { return infer_plan_; }

 private:
  void rebuild_inference_shards();

  ModelParams snapshot_;
  std::vector<ShardMap> infer_shards_;
  ShardPlan infer_plan_;
  EngineOptions opts_;
  std::atomic<std::uint64_t> generation_ = 0;
  double build_seconds_ = 0.0;
  CostBook costs_;
  mutable std::mutex costs_mu_;
  std::shared_mutex mu_;
};

/// Compiles (copies) training parameters into a fresh engine; the build cost
/// is recorded separately from per-step costs.
std::unique_ptr<Engine> build_engine(const ModelParams& params, const ModelConfig& config,
                                     EngineOptions opts = {});

}  // namespace aligner

#endif  // ALIGNER_ENGINE_HPP_
