// SPDX-License-Identifier: Apache-2.0

#ifndef ALIGNER_DATA_HPP_
#define ALIGNER_DATA_HPP_

#include <string>
#include <vector>

#include "aligner/losses.hpp"
#include "aligner/model.hpp"

namespace aligner {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class DatasetKind { kSft, kPreference, kSteerlm, kPrompts };

DatasetKind dataset_kind_from_name(const std::string& name);
std::string dataset_kind_name(DatasetKind kind);

struct DataRecord {
  std::string prompt;
  std::string response;  // sft / steerlm
  std::string chosen;    // preference
  std::string rejected;  // preference
  AttributeSpec attributes;  // steerlm
};

struct Dataset {
  DatasetKind kind = DatasetKind::kSft;
  std::vector<DataRecord> records;
};

/// One JSON object per line; field set depends on the dataset kind. Throws
/// DataError naming the first offending line.
Dataset load_dataset(const std::string& path, DatasetKind kind);

struct LineIssue {
  std::size_t line = 0;  // 1-based
  std::string message;
};

struct DatasetValidation {
  std::size_t valid_records = 0;
  std::vector<LineIssue> issues;
  bool ok() const { return issues.empty(); }
};

/// Non-throwing whole-file check used by the data-validation command.
DatasetValidation validate_dataset_file(const std::string& path, DatasetKind kind);

/// Teacher-forcing view of prompt ⊕ response ⊕ end-of-text: inputs feed the
/// model, targets are inputs shifted by one, and the loss mask selects
/// response targets only. Over-length sequences are truncated from the
/// response side; a response that no longer fits is a contract error.
struct BuiltSequence {
  TokenSeq inputs;
  TokenSeq targets;
  std::vector<double> loss_mask;
  std::size_t response_start = 0;  // index of the first response token in `full`
  TokenSeq full;                   // prompt ⊕ response ⊕ eot (possibly truncated)
};

BuiltSequence build_sft_sequence(const ModelConfig& config, const TokenSeq& prompt,
                                 const TokenSeq& response);

}  // namespace aligner

#endif  // ALIGNER_DATA_HPP_
