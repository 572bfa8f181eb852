#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "checkpoint.hpp"
#include "config.hpp"
#include "distill.hpp"
#include "scoring.hpp"
#include "sparsifier.hpp"
#include "tasks.hpp"

namespace stark {

struct PreparedData {
  Vocab vocab;
  Dataset train;
  Dataset dev;
  std::size_t skipped_rows = 0;
};

// Synthetic generation or TSV loading, then vocabulary + encoding.
PreparedData prepare_data(const Config& cfg, SeedLedger& seeds);

ModelDims model_dims(const Config& cfg, const PreparedData& data);

TrainResult run_finetune(const Config& cfg, const PreparedData& data, SeedLedger& seeds);

// The distillation settings of a run, with the shared shuffling seed filled in.
DistillConfig distill_config(const Config& cfg, SeedLedger& seeds);

ScoringOptions scoring_options(const Config& cfg);
const Dataset& scoring_split(const Config& cfg, const PreparedData& data);

// drop-layers keeps evenly spaced teacher layers; prune-params removes the
// lowest-expressiveness heads and neurons at the configured fraction.
ModelParams init_student(const ModelParams& teacher, const StudentInit& init, const Dataset& score_data,
                         const ScoringOptions& opts);

struct TrialResult {
  ModelParams student;
  TrainReport report;
  Checkpoint init;  // saved before the first update
};

TrialResult trial_distillation(const DistillConfig& cfg, const ModelParams& teacher, const Dataset& train,
                               const Dataset& dev, const Dataset& score_data, const ScoringOptions& opts);

struct Sparsification {
  ScoreReport scores;
  std::vector<SparsityMask> masks;  // one per grid value
};

Sparsification parameter_sparsification(const DistillConfig& cfg, const ModelParams& teacher,
                                         const ModelParams& trial_student, const Dataset& score_data,
                                         const ScoringOptions& opts, NormGrouping grouping);

// Restores the trial init from `init` (rewind error on a digest mismatch),
// masks the teacher and distills.
TrainResult actual_distillation(const DistillConfig& cfg, const ModelParams& teacher, const SparsityMask& mask,
                                const Checkpoint& init, const Dataset& train, const Dataset& dev);

enum class Mode { grid, automatic, random };
const char* to_string(Mode m);
Mode parse_mode(const std::string& s);

struct GridEntry {
  double sparsity = 0.0;
  bool ok = false;
  double dev_metric = 0.0;
  std::string error;
  std::size_t removed_heads = 0;
  std::size_t removed_neurons = 0;
  TrainReport report;
};

struct PipelineReport {
  Mode mode = Mode::grid;
  std::string metric = "accuracy";
  double teacher_dev_metric = 0.0;
  double trial_dev_metric = 0.0;  // the plain-KD student
  std::uint64_t score_digest = 0;
  double lambda = 0.5;
  std::vector<GridEntry> grid;  // actual distillations in run order
  std::optional<AutoEstimate> auto_estimate;
  double chosen_sparsity = 0.0;
  double final_dev_metric = 0.0;
  std::uint64_t random_seed = 0;

  std::size_t actual_runs() const { return grid.size(); }
};

struct RunArtifacts {
  PipelineReport report;
  TrialResult trial;
  Sparsification sparsification;
  ModelParams final_student;
  std::map<std::string, double> stage_seconds;
};

RunArtifacts run_stark(const Config& cfg, const PreparedData& data, const ModelParams& teacher, Mode mode,
                       SeedLedger& seeds);

struct PilotRow {
  double sparsity = 0.0;
  std::size_t trials = 0;
  double mean_metric = 0.0;
  double std_metric = 0.0;
  double mean_variance = 0.0;
  double std_variance = 0.0;
};

// Mean output-distribution variance (sum form) over the data.
double mean_output_variance(const ModelParams& model, const Dataset& data);

// Random unstructured masks on the teacher at each sparsity, `trials` seeds each.
std::vector<PilotRow> pilot_study(const ModelParams& teacher, const Dataset& dev,
                                  const std::vector<double>& sparsities, std::size_t trials, std::uint64_t seed);

}  // namespace stark
