// SPDX-License-Identifier: Apache-2.0

#include "aligner/data.hpp"

#include <fstream>
#include <set>

#include <json.hpp>

namespace aligner {

DatasetKind dataset_kind_from_name(const std::string& name) {
  if (name == "sft") return DatasetKind::kSft;
  if (name == "preference") return DatasetKind::kPreference;
  if (name == "steerlm") return DatasetKind::kSteerlm;
  if (name == "prompts") return DatasetKind::kPrompts;
  throw DataError("unknown dataset kind: " + name);
}

std::string dataset_kind_name(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kSft: return "sft";
    case DatasetKind::kPreference: return "preference";
    case DatasetKind::kSteerlm: return "steerlm";
    case DatasetKind::kPrompts: return "prompts";
  }
  return "sft";
}

namespace {

std::set<std::string> required_fields(DatasetKind kind) {
  switch (kind) {
    case DatasetKind::kSft: return {"prompt", "response"};
    case DatasetKind::kPreference: return {"prompt", "chosen", "rejected"};
    case DatasetKind::kSteerlm: return {"prompt", "response", "attributes"};
    case DatasetKind::kPrompts: return {"prompt"};
  }
  return {};
}

DataRecord parse_line(const std::string& line, DatasetKind kind) {
  // ordered_json keeps attribute order as written.
  const auto obj = nlohmann::ordered_json::parse(line, nullptr, false);
  if (obj.is_discarded()) throw DataError("invalid JSON");
  if (!obj.is_object()) throw DataError("record must be a JSON object");

  const auto required = required_fields(kind);
  for (const auto& field : required) {
    if (!obj.contains(field)) throw DataError("missing field \"" + field + "\"");
  }
  for (const auto& [key, value] : obj.items()) {
    if (!required.count(key)) throw DataError("unknown field \"" + key + "\"");
  }

  DataRecord rec;
  auto get_string = [&](const char* field) {
    if (!obj[field].is_string()) {
      throw DataError(std::string("field \"") + field + "\" must be a string");
    }
    return obj[field].get<std::string>();
  };
  rec.prompt = get_string("prompt");
  if (rec.prompt.empty()) throw DataError("field \"prompt\" must be nonempty");
  switch (kind) {
    case DatasetKind::kSft:
      rec.response = get_string("response");
      if (rec.response.empty()) throw DataError("field \"response\" must be nonempty");
      break;
    case DatasetKind::kPreference:
      rec.chosen = get_string("chosen");
      rec.rejected = get_string("rejected");
      if (rec.chosen.empty() || rec.rejected.empty()) {
        throw DataError("chosen/rejected must be nonempty");
      }
      if (rec.chosen == rec.rejected) throw DataError("chosen equals rejected");
      break;
    case DatasetKind::kSteerlm: {
      rec.response = get_string("response");
      if (rec.response.empty()) throw DataError("field \"response\" must be nonempty");
      if (!obj["attributes"].is_object()) throw DataError("field \"attributes\" must be an object");
      for (const auto& [name, value] : obj["attributes"].items()) {
        if (!value.is_number_integer()) {
          throw DataError("attribute \"" + name + "\" must be an integer");
        }
        rec.attributes.entries.emplace_back(name, value.get<int>());
      }
      rec.attributes.validate();
      break;
    }
    case DatasetKind::kPrompts:
      break;
  }
  return rec;
}

}  // namespace

Dataset load_dataset(const std::string& path, DatasetKind kind) {
  std::ifstream is(path);
  if (!is) throw DataError("cannot open dataset: " + path);
  Dataset out;
  out.kind = kind;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      out.records.push_back(parse_line(line, kind));
    } catch (const std::exception& e) {
      throw DataError(path + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  if (out.records.empty()) throw DataError(path + ": dataset has no records");
  return out;
}

DatasetValidation validate_dataset_file(const std::string& path, DatasetKind kind) {
  DatasetValidation report;
  std::ifstream is(path);
  if (!is) {
    report.issues.push_back({0, "cannot open dataset: " + path});
    return report;
  }
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      parse_line(line, kind);
      ++report.valid_records;
    } catch (const std::exception& e) {
      report.issues.push_back({line_no, e.what()});
    }
  }
  if (line_no == 0) report.issues.push_back({0, "dataset is empty"});
  return report;
}

BuiltSequence build_sft_sequence(const ModelConfig& config, const TokenSeq& prompt,
                                 const TokenSeq& response) {
  if (prompt.empty() || response.empty()) {
    throw ContractError("build_sft_sequence: prompt and response must be nonempty");
  }
  BuiltSequence out;
  out.full = prompt;
  out.full.insert(out.full.end(), response.begin(), response.end());
  out.full.push_back(kEotToken);
  if (out.full.size() > config.max_seq_len) {
    if (prompt.size() + 2 > config.max_seq_len) {
      throw ContractError("build_sft_sequence: prompt of " + std::to_string(prompt.size()) +
                          " tokens leaves no room for a response within max_seq_len " +
                          std::to_string(config.max_seq_len));
    }
    out.full.resize(config.max_seq_len);
  }
  out.response_start = prompt.size();
  out.inputs.assign(out.full.begin(), out.full.end() - 1);
  out.targets.assign(out.full.begin() + 1, out.full.end());
  out.loss_mask.assign(out.targets.size(), 0.0);
  for (std::size_t i = 0; i < out.targets.size(); ++i) {
    if (i + 1 >= out.response_start) out.loss_mask[i] = 1.0;
  }
  return out;
}

}  // namespace aligner
