// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_TRAINERS_HPP_
#define ALIGNER_TRAINERS_HPP_

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "aligner/data.hpp"
#include "aligner/losses.hpp"
#include "aligner/model.hpp"
#include "aligner/optim.hpp"

namespace aligner {

struct TrainerError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainerConfig {
  std::string algorithm = "sft";
  std::size_t global_batch = 8;
  std::size_t micro_batch = 4;
  LrSchedule lr = LrSchedule::constant(1e-3);
  std::size_t epochs = 1;
  // Optimizer steps per epoch; 0 derives it from the dataset size.
  std::size_t steps_per_epoch = 0;
  std::uint64_t seed = 0;
  bool lora = false;
  std::size_t lora_rank = 4;
  double lora_alpha = 8.0;
  double weight_decay = 0.0;

  DpoHyper dpo;                  // dpo/ipo/cdpo/kto/spin
  std::size_t spin_iterations = 1;
  std::size_t spin_max_new = 16;
  double dataset_fraction = 1.0;  // subset sampling (spin recipe)
  AttributeSpec steerlm_inference_attrs;  // appended by the inference helper
};

/// Mutable state handed to algorithm callbacks.
struct TrainContext {
  ModelConfig model_config;
  ModelParams policy;
  std::optional<ModelParams> reference;  // frozen (dpo family, spin)
  TrainerConfig config;
  std::size_t epoch = 0;
  std::size_t global_step = 0;
};

/// One metrics row per optimizer step; written as tab-separated text.
struct TrainStepLog {
  std::size_t step = 0;
  double loss = 0.0;
  double lr = 0.0;
  double extra = 0.0;  // algorithm-specific (accuracy, margin, ...)
};

struct TrainResult {
  ModelParams params;
  std::vector<TrainStepLog> log;
  std::string extra_name;  // column name for TrainStepLog::extra
};

/// An algorithm is a loss over a micro-batch plus optional epoch hooks; the
/// shared loop handles batching, accumulation, scheduling, and logging.
struct Algorithm {
  // Returns the loss tensor and optionally a metrics value via `extra`.
  std::function<Tensor(TrainContext&, std::span<const DataRecord>, double& extra)>
      micro_batch_loss;
  // Maps the epoch's dataset view (identity by default).
  std::function<std::vector<DataRecord>(TrainContext&, const std::vector<DataRecord>&)>
      prepare_epoch;
  std::function<void(TrainContext&)> on_epoch_end;
  std::string extra_name;
  bool needs_reference = false;
};

/// Registry behind the trainer abstraction: registering a name wires a new
/// loss into the shared loop without touching it.
class AlgorithmRegistry {
 public:
  static AlgorithmRegistry& instance();
  void register_algorithm(const std::string& name, Algorithm algorithm);
  bool has(const std::string& name) const;
  const Algorithm& get(const std::string& name) const;
  std::vector<std::string> names() const;

 private:
  AlgorithmRegistry();
  std::map<std::string, Algorithm> algorithms_;
};

/// Shared offline training loop: deterministic shuffling, gradient
/// accumulation to the global batch, AdamW with the configured schedule.
TrainResult run_training(const TrainerConfig& config, const ModelConfig& model_config,
                         const Dataset& dataset,
                         const std::optional<ModelParams>& init = std::nullopt,
                         const std::optional<ModelParams>& reference = std::nullopt);

// Entry points per algorithm (thin wrappers over run_training).
TrainResult train_sft(const TrainerConfig& config, const ModelConfig& model_config,
                      const Dataset& dataset);
TrainResult train_rm(const TrainerConfig& config, const ModelConfig& model_config,
                     const Dataset& dataset);
TrainResult train_dpo(const TrainerConfig& config, const ModelConfig& model_config,
                      const Dataset& dataset, const ModelParams& reference);
TrainResult train_steerlm(const TrainerConfig& config, const ModelConfig& model_config,
                          const Dataset& dataset);
TrainResult train_spin(const TrainerConfig& config, const ModelConfig& model_config,
                       const Dataset& dataset);

/// Preference accuracy of a reward model over a dataset: fraction of pairs
/// with r(chosen) > r(rejected).
double rm_accuracy(const ModelParams& params, const Dataset& dataset);

/// SteerLM inference helper: conditions the prompt on the requested
/// attribute values before generating.
GenerateResult steerlm_generate(const ModelParams& params, const std::string& prompt,
                                const AttributeSpec& attrs, std::size_t max_new,
                                const SamplingSpec& sampling);

void write_train_log(const std::string& path, const TrainResult& result);

}  // namespace aligner

#endif  // ALIGNER_TRAINERS_HPP_
