// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_REPORT_HPP_
#define ALIGNER_REPORT_HPP_

#include <map>
#include <string>
#include <vector>

#include "aligner/ppo.hpp"

namespace aligner {

struct CategoryStats {
  double mean = 0.0;
  double std_dev = 0.0;
};

struct ReportSummary {
  std::map<std::string, CategoryStats> stats;  // keyed by category name
  std::size_t steps_used = 0;
  // Categories in presentation order.
  static const std::vector<std::string>& categories();
};

/// Mean and sample standard deviation per category, excluding the first step
/// (engine build makes it an outlier by convention).
ReportSummary summarize_metrics(const std::vector<StepRecord>& records);

std::string render_report(const ReportSummary& summary);

/// Side-by-side table with a relative-speedup column (baseline mean over
/// comparison mean).
std::string render_comparison(const ReportSummary& baseline, const ReportSummary& comparison);

/// Plot-friendly long format: category <tab> step <tab> value.
void write_plot_data(const std::string& path, const std::vector<StepRecord>& records);

}  // namespace aligner

#endif  // ALIGNER_REPORT_HPP_
