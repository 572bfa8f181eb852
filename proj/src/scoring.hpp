#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "tasks.hpp"

namespace stark {

enum class LossKind { task, distill };
enum class NormGrouping { per_layer, global };

const char* to_string(LossKind k);
const char* to_string(NormGrouping g);
NormGrouping parse_norm_grouping(const std::string& s);

// Mean absolute gate gradient per unit. `units` is sorted and `scores` is
// parallel to it.
struct RawScoreTable {
  std::vector<UnitId> units;
  std::vector<double> scores;
  LossKind loss = LossKind::task;
  std::size_t batches = 0;
  std::uint64_t data_digest = 0;

  double score(const UnitId& u) const;
};

struct ScoringOptions {
  std::size_t batch_size = 32;
  double tau = 2.0;
};

// For each batch (in data order): the teacher's loss under all-ones gates,
// |dL/dgate| for every head and neuron, averaged over batches. For
// LossKind::distill the loss is L_KD(teacher, frozen student) and gradients run
// through the teacher's softened distribution.
RawScoreTable accumulate_gate_grads(const ModelParams& teacher, const GateSet& gates, LossKind kind,
                                    const Dataset& data, const ModelParams* student,
                                    const ScoringOptions& opts);

// P: task-loss sensitivities of the teacher.
RawScoreTable expressiveness(const ModelParams& teacher, const Dataset& data, const ScoringOptions& opts);
// Q: distillation-loss sensitivities against a frozen trial student.
RawScoreTable friendliness(const ModelParams& teacher, const ModelParams& student, const Dataset& data,
                           const ScoringOptions& opts);

struct NormalizedScores {
  std::vector<UnitId> units;
  std::vector<double> values;
  std::vector<std::string> zero_groups;  // groups left at zero rather than divided
};

// Scales each group (kind x layer, or kind) to unit l2 norm.
NormalizedScores normalize_l2(const RawScoreTable& table, NormGrouping grouping);

// lambda * p + (1 - lambda) * q, unit by unit.
std::vector<double> interpolate(const NormalizedScores& p, const NormalizedScores& q, double lambda);

struct ScoreEntry {
  UnitId unit;
  double p_raw = 0.0;
  double q_raw = 0.0;
  double p = 0.0;
  double q = 0.0;
  double i = 0.0;
  std::size_t rank = 0;  // within kind; 0 is the first unit to remove
};

struct ScoreReport {
  std::vector<ScoreEntry> entries;  // sorted by unit
  double lambda = 0.5;
  NormGrouping grouping = NormGrouping::per_layer;
  std::vector<std::string> zero_groups;

  std::vector<const ScoreEntry*> of_kind(UnitKind kind) const;
  std::uint64_t digest() const;
};

ScoreReport build_score_report(const RawScoreTable& p, const RawScoreTable& q, double lambda,
                               NormGrouping grouping);

// Re-interpolates an existing report at another lambda (normalized P and Q kept).
ScoreReport with_lambda(const ScoreReport& report, double lambda);

// Assigns ranks: I ascending, ties by unit order.
void assign_ranks(ScoreReport& report);

// Per-parameter first-order saliency |w * dL/dw| of every prunable weight,
// for L_TK (P) and L_KD (Q), combined as in the structured path.
ScoreReport unstructured_scores(const ModelParams& teacher, const ModelParams& student,
                                const Dataset& data, double lambda, NormGrouping grouping,
                                const ScoringOptions& opts);

// Mean loss over the data (per example) for the given gates.
double mean_loss(const ModelParams& model, const GateSet& gates, LossKind kind, const Dataset& data,
                 const Tensor* student_logits, const ScoringOptions& opts);

// Mean over the scoring batches of |L_b(unit present) - L_b(unit removed)|,
// computed by plain forward passes.
double ablation_oracle(const ModelParams& model, const UnitId& unit, const Dataset& data,
                       LossKind kind, const ModelParams* student, const ScoringOptions& opts);

}  // namespace stark
