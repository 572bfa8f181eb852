#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "distill.hpp"
#include "scoring.hpp"
#include "tasks.hpp"

namespace stark {

inline constexpr int kConfigVersion = 1;

struct TaskConfig {
  std::string kind = "synthetic";  // synthetic | tsv
  SyntheticSpec synthetic;
  std::string train_path;
  std::string dev_path;
  TsvSchema schema;
  TaskSpec spec;  // for tsv; the synthetic task fixes its own
  std::size_t max_vocab = 1000;
};

struct ScoringConfig {
  std::size_t batch_size = 1;  // examples per gradient; 1 averages |dL/dgate| per example
  NormGrouping grouping = NormGrouping::per_layer;
  std::size_t bins = 50;
  std::size_t window = 3;
  UnitKind auto_kind = UnitKind::neuron;  // score population the auto estimate reads
  std::string split = "train";            // train | dev
};

struct PilotConfig {
  std::vector<double> sparsities{0.0, 0.05, 0.10, 0.15};
  std::size_t trials = 10;
};

struct Config {
  int version = kConfigVersion;
  std::uint64_t seed = 42;
  TaskConfig task;
  ModelDims model;
  TrainSettings teacher;
  DistillConfig distill;
  ScoringConfig scoring;
  PilotConfig pilot;

  void validate() const;
};

Config default_config();

// Strict parse: unknown keys, wrong types and version mismatches are config errors.
Config config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const Config& c);
nlohmann::json to_json(const DistillConfig& c);

Config load_config(const std::string& path);

// Sets a dotted key ("distill.tau", "seed") in a config document. The value
// is parsed as JSON when possible, otherwise taken as a string.
void set_override(nlohmann::json& doc, const std::string& key, const std::string& value);

// FNV-1a of the canonical (sorted-key) JSON text.
std::uint64_t distill_digest(const DistillConfig& c);
std::uint64_t config_digest(const Config& c);

}  // namespace stark
