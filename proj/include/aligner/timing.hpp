// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_TIMING_HPP_
#define ALIGNER_TIMING_HPP_

#include <chrono>
#include <map>
#include <string>

namespace aligner {

// Fixed instrumentation category names shared across the runtime.
namespace timing {
inline constexpr const char* kTrain = "train";
inline constexpr const char* kRollout = "rollout";
inline constexpr const char* kResponseGeneration = "response_generation";
inline constexpr const char* kLogprobCalculation = "logprob_calculation";
inline constexpr const char* kRefit = "refit";
inline constexpr const char* kCriticWait = "critic_wait";
}  // namespace timing

class Stopwatch {
 public:
  Stopwatch() : start_(std::chrono::steady_clock::now()) {}
  double seconds() const {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
  }
  void restart() { start_ = std::chrono::steady_clock::now(); }

 private:
  std::chrono::steady_clock::time_point start_;
};

/// Cumulative per-category cost accounting.
class CostBook {
 public:
  void add(const std::string& category, double seconds) { totals_[category] += seconds; }
  double get(const std::string& category) const {
    const auto it = totals_.find(category);
    return it == totals_.end() ? 0.0 : it->second;
  }
  const std::map<std::string, double>& totals() const { return totals_; }

 private:
  std::map<std::string, double> totals_;
};

}  // namespace aligner

#endif  // ALIGNER_TIMING_HPP_
