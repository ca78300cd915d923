// Copyright 2026 The ISALux Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <memory>
#include <string>
#include <vector>

#include "isalux/config.hpp"
#include "isalux/isat.hpp"
#include "isalux/model.hpp"

namespace isalux {

inline constexpr const char* kConfigRecord = "config";

/// Parameter records of a model followed by its configuration.
template <class T>
std::vector<isat::Record> model_records(const IsaT<T>& model, const RunConfig& cfg) {
  std::vector<isat::Record> records;
  for (const auto& p : model.parameters().all()) records.push_back(isat::to_record(p.name, p.tensor));
  records.push_back(isat::text_record(kConfigRecord, serialize_config(cfg)));
  return records;
}

struct Checkpoint {
  RunConfig config;
  std::vector<isat::Record> records;
};

inline Checkpoint read_checkpoint(const std::string& path) {
  Checkpoint ck;
  ck.records = isat::read_file(path);
  const auto* cfg = isat::find(ck.records, kConfigRecord);
  if (!cfg) throw DataError(path + ": no '" + std::string(kConfigRecord) + "' record; not a checkpoint");
  ck.config = parse_config(isat::record_text(*cfg), RunConfig::desk(), path + "[config]");
  return ck;
}

/// Copies every named parameter from `records` into the model.
template <class T>
void load_weights(IsaT<T>& model, const std::vector<isat::Record>& records, const std::string& source) {
  for (auto& p : model.parameters().all()) {
    const auto* rec = isat::find(records, p.name);
    if (!rec) throw DataError(source + ": missing parameter " + p.name);
    if (rec->shape != p.tensor.shape()) {
      throw DataError(source + ": parameter " + p.name + " has shape " + shape_str(rec->shape) + ", model expects " +
                      shape_str(p.tensor.shape()));
    }
    for (std::size_t i = 0; i < rec->data.size(); ++i) p.tensor[i] = static_cast<T>(rec->data[i]);
  }
}

/// Builds the model described by a checkpoint and loads its weights.
inline std::unique_ptr<IsaT<float>> load_model(const std::string& path, RunConfig* config = nullptr) {
  auto ck = read_checkpoint(path);
  auto model = std::make_unique<IsaT<float>>(ck.config.model);
  load_weights(*model, ck.records, path);
  if (config) *config = ck.config;
  return model;
}

}  // namespace isalux
