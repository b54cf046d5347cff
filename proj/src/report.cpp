// SPDX-License-Identifier: Apache-2.0

#include "aligner/report.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace aligner {

namespace {

double category_value(const StepRecord& r, const std::string& category) {
  if (category == "overall") return r.timing.train + r.timing.rollout;
  if (category == timing::kTrain) return r.timing.train;
  if (category == timing::kRollout) return r.timing.rollout;
  if (category == timing::kResponseGeneration) return r.timing.response_generation;
  if (category == timing::kLogprobCalculation) return r.timing.logprob_calculation;
  if (category == timing::kRefit) return r.timing.refit;
  if (category == timing::kCriticWait) return r.timing.critic_wait;
  if (category == "reward_mean") return r.metrics.reward_mean;
  throw PpoError("report: unknown category " + category);
}

}  // namespace

const std::vector<std::string>& ReportSummary::categories() {
  static const std::vector<std::string> names = {
      "overall",      timing::kTrain,  timing::kRollout,    timing::kResponseGeneration,
      timing::kLogprobCalculation, timing::kRefit, timing::kCriticWait, "reward_mean"};
  return names;
}

ReportSummary summarize_metrics(const std::vector<StepRecord>& records) {
  if (records.empty()) throw PpoError("report: no step records");
  // Drop the record with the smallest step index (the build step).
  std::vector<StepRecord> used = records;
  if (used.size() > 1) {
    const auto first = std::min_element(used.begin(), used.end(), [](const auto& a, const auto& b) {
      return a.timing.step < b.timing.step;
    });
    used.erase(first);
  }
  ReportSummary summary;
  summary.steps_used = used.size();
  for (const auto& category : ReportSummary::categories()) {
    double mean = 0.0;
    for (const auto& r : used) mean += category_value(r, category);
    mean /= static_cast<double>(used.size());
    double var = 0.0;
    if (used.size() > 1) {
      for (const auto& r : used) {
        const double d = category_value(r, category) - mean;
        var += d * d;
      }
      var /= static_cast<double>(used.size() - 1);
    }
    summary.stats[category] = {mean, std::sqrt(var)};
  }
  return summary;
}

std::string render_report(const ReportSummary& summary) {
  std::ostringstream os;
  os << "time per step in seconds (std.), mean of " << summary.steps_used
     << " steps after the first step\n";
  os << std::left << std::setw(24) << "category" << "mean (std.)\n";
  for (const auto& category : ReportSummary::categories()) {
    const auto& s = summary.stats.at(category);
    os << std::left << std::setw(24) << category << std::fixed << std::setprecision(4) << s.mean
       << " (" << s.std_dev << ")\n";
  }
  return os.str();
}

std::string render_comparison(const ReportSummary& baseline, const ReportSummary& comparison) {
  std::ostringstream os;
  os << std::left << std::setw(24) << "category" << std::setw(18) << "baseline"
     << std::setw(18) << "comparison" << "speedup\n";
  for (const auto& category : ReportSummary::categories()) {
    const auto& a = baseline.stats.at(category);
    const auto& b = comparison.stats.at(category);
    os << std::left << std::setw(24) << category << std::setw(18) << std::fixed
       << std::setprecision(4) << a.mean << std::setw(18) << b.mean;
    if (b.mean > 0.0) {
      os << std::setprecision(2) << a.mean / b.mean << "x";
    } else {
      os << "-";
    }
    os << "\n";
  }
  return os.str();
}

void write_plot_data(const std::string& path, const std::vector<StepRecord>& records) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw PpoError("plot data: cannot open for write: " + path);
  os << "category\tstep\tvalue\n";
  os.precision(17);
  for (const auto& category : ReportSummary::categories()) {
    for (const auto& r : records) {
      os << category << "\t" << r.timing.step << "\t" << category_value(r, category) << "\n";
    }
  }
}

}  // namespace aligner
