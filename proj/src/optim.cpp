// SPDX-License-Identifier: Apache-2.0

#include "aligner/optim.hpp"

#include <cmath>

namespace aligner {

LrSchedule LrSchedule::cosine(double peak, double min_lr, std::size_t warmup,
                              std::size_t max_steps, std::size_t decay_start) {
  if (peak < min_lr) throw ContractError("lr schedule: cosine requires peak >= min");
  if (max_steps <= warmup) throw ContractError("lr schedule: max_steps must exceed warmup");
  if (decay_start != 0 && (decay_start < warmup || decay_start >= max_steps)) {
    throw ContractError("lr schedule: decay_start must lie between warmup and max_steps");
  }
  return {Kind::kCosine, peak, min_lr, warmup, max_steps, decay_start};
}

double LrSchedule::at(std::size_t step) const {
  if (kind == Kind::kConstant) return peak;
  if (warmup_steps > 0 && step < warmup_steps) {
    return peak * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  }
  const std::size_t begin = decay_start > warmup_steps ? decay_start : warmup_steps;
  if (step < begin) return peak;
  if (step >= max_steps) return min_lr;
  const double progress =
      static_cast<double>(step - begin) / static_cast<double>(max_steps - begin);
  return min_lr + 0.5 * (peak - min_lr) * (1.0 + std::cos(3.141592653589793 * progress));
}

void AdamW::step(ModelParams& params, double lr, double grad_scale) {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  const double inv_scale = 1.0 / grad_scale;
  for (const auto& name : params.trainable_names()) {
    Tensor& p = params.at(name);
    auto& slot = slots_[name];
    if (slot.m.empty()) {
      slot.m.assign(p.size(), 0.0);
      slot.v.assign(p.size(), 0.0);
    }
    const auto& g = p.grad();
    auto vals = p.values_mut();
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = g[i] * inv_scale;
      slot.m[i] = opts_.beta1 * slot.m[i] + (1.0 - opts_.beta1) * gi;
      slot.v[i] = opts_.beta2 * slot.v[i] + (1.0 - opts_.beta2) * gi * gi;
      const double mhat = slot.m[i] / bc1;
      const double vhat = slot.v[i] / bc2;
      vals[i] -= lr * (mhat / (std::sqrt(vhat) + opts_.eps) + opts_.weight_decay * vals[i]);
    }
  }
}

}  // namespace aligner
