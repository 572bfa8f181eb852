#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "pipeline.hpp"

namespace stark {

// One JSON object per epoch: {epoch, kd, tk, total, dev_metric}.
std::string train_report_jsonl(const TrainReport& r);
TrainReport train_report_from_jsonl(const std::string& text);

// One JSON object per unit: {layer, kind, index, p_raw, q_raw, p, q, i, rank}
// (plus "tensor" for parameter units).
std::string score_report_jsonl(const ScoreReport& r);
ScoreReport score_report_from_jsonl(const std::string& text, double lambda, NormGrouping grouping);

nlohmann::json mask_to_json(const SparsityMask& m);
SparsityMask mask_from_json(const nlohmann::json& j);

// Per-kind density table over a range shared by P, Q and I:
// bin_center,density_P,density_Q,density_I,cumulative_I
std::string density_csv(const ScoreReport& r, UnitKind kind, std::size_t bins, std::size_t window);

nlohmann::json pipeline_to_json(const PipelineReport& r);
nlohmann::json pilot_to_json(const std::vector<PilotRow>& rows);

// Plain-text comparison of KD, StarK, StarK-Rand and StarK-Auto from any
// subset of pipeline reports (JSON documents as written by pipeline_to_json).
std::string render_comparison(const std::vector<nlohmann::json>& reports);

// Shortest round-trip decimal form of a double.
std::string format_double(double v);

void write_text(const std::string& path, const std::string& text);
std::string read_text(const std::string& path);

}  // namespace stark
