// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_OPTIM_HPP_
#define ALIGNER_OPTIM_HPP_

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "aligner/model.hpp"

namespace aligner {

struct LrSchedule {
  enum class Kind { kConstant, kCosine };
  Kind kind = Kind::kConstant;
  double peak = 1e-7;
  double min_lr = 0.0;
  std::size_t warmup_steps = 0;
  std::size_t max_steps = 0;
  // First decaying step; 0 starts the decay right after warmup. A later
  // value holds the peak until then (recipes that anneal only at the end).
  std::size_t decay_start = 0;

  static LrSchedule constant(double lr) { return {Kind::kConstant, lr, lr, 0, 0, 0}; }
  static LrSchedule cosine(double peak, double min_lr, std::size_t warmup, std::size_t max_steps,
                           std::size_t decay_start = 0);

  /// LR for optimizer step `step` (0-based). Warmup ramps linearly to peak at
  /// the end of warmup; cosine decays to min_lr at max_steps.
  double at(std::size_t step) const;
};

/// Adam with decoupled weight decay over the trainable subset of a
/// parameter collection.
class AdamW {
 public:
  struct Options {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 0.0;
  };

  AdamW() = default;
  explicit AdamW(Options opts) : opts_(opts) {}

  /// Applies one update from accumulated grads, scaled by 1/grad_scale
  /// (micro-batch accumulation count). Grads are not cleared.
  void step(ModelParams& params, double lr, double grad_scale = 1.0);

  std::size_t steps_taken() const { return t_; }
  const Options& options() const { return opts_; }

 private:
  struct Slot {
    std::vector<double> m;
    std::vector<double> v;
  };
  Options opts_;
  std::map<std::string, Slot> slots_;
  std::size_t t_ = 0;
};

}  // namespace aligner

#endif  // ALIGNER_OPTIM_HPP_
