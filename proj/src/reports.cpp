#include "reports.hpp"

#include <charconv>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

#include "error.hpp"

namespace stark {

using nlohmann::json;

std::string format_double(double v) {
  char buf[64];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof buf, v);
  if (ec != std::errc()) fail(ErrorCode::numeric, "cannot format number");
  return std::string(buf, ptr);
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write '" + path + "'");
  out << text;
  if (!out) fail(ErrorCode::io, "failed writing '" + path + "'");
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::input, "cannot read '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

namespace {

std::vector<json> parse_lines(const std::string& text, const char* what) {
  std::vector<json> out;
  std::istringstream in(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(in, line)) {
    ++n;
    if (line.empty()) continue;
    json j = json::parse(line, nullptr, false);
    if (j.is_discarded() || !j.is_object()) {
      fail(ErrorCode::input, std::string(what) + " line " + std::to_string(n) + " is not a JSON object");
    }
    out.push_back(std::move(j));
  }
  return out;
}

template <typename T>
T field(const json& j, const char* key, const char* what) {
  auto it = j.find(key);
  if (it == j.end()) fail(ErrorCode::input, std::string(what) + " record lacks '" + key + "'");
  try {
    return it->get<T>();
  } catch (const json::exception&) {
    fail(ErrorCode::input, std::string(what) + " field '" + key + "' has the wrong type");
  }
}

}  // namespace

// ---- train reports ------------------------------------------------------------------

std::string train_report_jsonl(const TrainReport& r) {
  std::string out;
  for (const auto& e : r.epochs) {
    json j{{"epoch", e.epoch}, {"kd", e.kd}, {"tk", e.tk}, {"total", e.total}, {"dev_metric", e.dev_metric}};
    out += j.dump() + "\n";
  }
  return out;
}

TrainReport train_report_from_jsonl(const std::string& text) {
  TrainReport r;
  for (const json& j : parse_lines(text, "train report")) {
    EpochRecord e;
    e.epoch = field<std::size_t>(j, "epoch", "train report");
    e.kd = field<double>(j, "kd", "train report");
    e.tk = field<double>(j, "tk", "train report");
    e.total = field<double>(j, "total", "train report");
    e.dev_metric = field<double>(j, "dev_metric", "train report");
    if (r.epochs.empty() || e.dev_metric > r.best_dev_metric) {
      r.best_dev_metric = e.dev_metric;
      r.best_epoch = e.epoch;
    }
    r.epochs.push_back(e);
  }
  return r;
}

// ---- score reports --------------------------------------------------------------------

std::string score_report_jsonl(const ScoreReport& r) {
  std::string out;
  for (const auto& e : r.entries) {
    json j{{"layer", e.unit.layer}, {"kind", to_string(e.unit.kind)}, {"index", e.unit.index},
           {"p_raw", e.p_raw},      {"q_raw", e.q_raw},               {"p", e.p},
           {"q", e.q},              {"i", e.i},                       {"rank", e.rank}};
    if (e.unit.kind == UnitKind::parameter) j["tensor"] = e.unit.tensor;
    out += j.dump() + "\n";
  }
  return out;
}

ScoreReport score_report_from_jsonl(const std::string& text, double lambda, NormGrouping grouping) {
  ScoreReport r;
  r.lambda = lambda;
  r.grouping = grouping;
  for (const json& j : parse_lines(text, "score report")) {
    ScoreEntry e;
    e.unit.layer = field<std::size_t>(j, "layer", "score report");
    e.unit.kind = parse_unit_kind(field<std::string>(j, "kind", "score report"));
    e.unit.index = field<std::size_t>(j, "index", "score report");
    if (e.unit.kind == UnitKind::parameter) e.unit.tensor = field<std::string>(j, "tensor", "score report");
    e.p_raw = field<double>(j, "p_raw", "score report");
    e.q_raw = field<double>(j, "q_raw", "score report");
    e.p = field<double>(j, "p", "score report");
    e.q = field<double>(j, "q", "score report");
    e.i = field<double>(j, "i", "score report");
    e.rank = field<std::size_t>(j, "rank", "score report");
    r.entries.push_back(std::move(e));
  }
  if (r.entries.empty()) fail(ErrorCode::input, "score report is empty");
  std::sort(r.entries.begin(), r.entries.end(),
            [](const ScoreEntry& a, const ScoreEntry& b) { return a.unit < b.unit; });
  return r;
}

// ---- masks --------------------------------------------------------------------------------

json mask_to_json(const SparsityMask& m) {
  json removed = json::array();
  for (const auto& u : m.removed) {
    json ju{{"layer", u.layer}, {"kind", to_string(u.kind)}, {"index", u.index}};
    if (u.kind == UnitKind::parameter) ju["tensor"] = u.tensor;
    removed.push_back(std::move(ju));
  }
  return json{{"kind", m.kind == MaskKind::structured ? "structured" : "unstructured"},
              {"sparsity", m.sparsity},
              {"provenance",
               {{"source", to_string(m.provenance.source)},
                {"lambda", m.provenance.lambda},
                {"seed", m.provenance.seed}}},
              {"removed", removed}};
}

SparsityMask mask_from_json(const json& j) {
  if (!j.is_object()) fail(ErrorCode::input, "mask must be a JSON object");
  SparsityMask m;
  const std::string kind = field<std::string>(j, "kind", "mask");
  if (kind != "structured" && kind != "unstructured") fail(ErrorCode::input, "unknown mask kind '" + kind + "'");
  m.kind = kind == "structured" ? MaskKind::structured : MaskKind::unstructured;
  m.sparsity = field<double>(j, "sparsity", "mask");
  if (auto it = j.find("provenance"); it != j.end()) {
    const std::string src = field<std::string>(*it, "source", "mask provenance");
    using S = MaskProvenance::Source;
    m.provenance.source = src == "ranked" ? S::ranked : src == "random" ? S::random : src == "auto" ? S::automatic : S::none;
    m.provenance.lambda = field<double>(*it, "lambda", "mask provenance");
    m.provenance.seed = field<std::uint64_t>(*it, "seed", "mask provenance");
  }
  for (const json& ju : field<json>(j, "removed", "mask")) {
    UnitId u;
    u.layer = field<std::size_t>(ju, "layer", "mask unit");
    u.kind = parse_unit_kind(field<std::string>(ju, "kind", "mask unit"));
    u.index = field<std::size_t>(ju, "index", "mask unit");
    if (u.kind == UnitKind::parameter) u.tensor = field<std::string>(ju, "tensor", "mask unit");
    m.removed.push_back(std::move(u));
  }
  std::sort(m.removed.begin(), m.removed.end());
  m.removed.erase(std::unique(m.removed.begin(), m.removed.end()), m.removed.end());
  return m;
}

// ---- density ---------------------------------------------------------------------------------

std::string density_csv(const ScoreReport& r, UnitKind kind, std::size_t bins, std::size_t window) {
  std::vector<double> p, q, i;
  for (const ScoreEntry* e : r.of_kind(kind)) {
    p.push_back(e->p);
    q.push_back(e->q);
    i.push_back(e->i);
  }
  if (p.empty()) fail(ErrorCode::input, std::string("score report has no ") + to_string(kind) + " units");
  double lo = p[0], hi = p[0];
  for (const auto* v : {&p, &q, &i}) {
    for (double x : *v) {
      lo = std::min(lo, x);
      hi = std::max(hi, x);
    }
  }
  const DensityProfile dp = density_profile(p, bins, window, lo, hi);
  const DensityProfile dq = density_profile(q, bins, window, lo, hi);
  const DensityProfile di = density_profile(i, bins, window, lo, hi);
  std::string out = "bin_center,density_P,density_Q,density_I,cumulative_I\n";
  for (std::size_t b = 0; b < di.bins(); ++b) {
    out += format_double(di.center(b)) + "," + format_double(dp.density[b]) + "," + format_double(dq.density[b]) +
           "," + format_double(di.density[b]) + "," + format_double(di.cumulative[b]) + "\n";
  }
  return out;
}

// ---- pipeline ----------------------------------------------------------------------------------

json pipeline_to_json(const PipelineReport& r) {
  json grid = json::array();
  for (const auto& e : r.grid) {
    json je{{"sparsity", e.sparsity},
            {"ok", e.ok},
            {"dev_metric", e.dev_metric},
            {"best_epoch", e.report.best_epoch},
            {"epochs", e.report.epochs.size()},
            {"removed_heads", e.removed_heads},
            {"removed_neurons", e.removed_neurons}};
    if (!e.ok) je["error"] = e.error;
    grid.push_back(std::move(je));
  }
  char digest[17];
  std::snprintf(digest, sizeof digest, "%016llx", static_cast<unsigned long long>(r.score_digest));
  json j{{"mode", to_string(r.mode)},
         {"metric", r.metric},
         {"teacher_dev_metric", r.teacher_dev_metric},
         {"trial_dev_metric", r.trial_dev_metric},
         {"score_digest", digest},
         {"lambda", r.lambda},
         {"actual_runs", r.actual_runs()},
         {"grid", grid},
         {"chosen_sparsity", r.chosen_sparsity},
         {"final_dev_metric", r.final_dev_metric}};
  if (r.auto_estimate) {
    const auto& a = *r.auto_estimate;
    j["auto"] = json{{"fallback", a.fallback},
                     {"reason", a.reason},
                     {"estimate", a.sparsity},
                     {"peak_bin", a.peak_bin},
                     {"peak_center", a.peak_center},
                     {"peak_mass", a.peak_mass}};
  }
  if (r.mode == Mode::random) j["random_seed"] = r.random_seed;
  return j;
}

json pilot_to_json(const std::vector<PilotRow>& rows) {
  json out = json::array();
  for (const auto& r : rows) {
    out.push_back(json{{"sparsity", r.sparsity},
                       {"trials", r.trials},
                       {"mean_metric", r.mean_metric},
                       {"std_metric", r.std_metric},
                       {"mean_variance", r.mean_variance},
                       {"std_variance", r.std_variance}});
  }
  return out;
}

std::string render_comparison(const std::vector<json>& reports) {
  struct Row {
    std::string name;
    std::string metric = "-";
    std::string sparsity = "-";
  };
  auto fmt = [](double v, int prec) {
    std::ostringstream ss;
    ss << std::fixed << std::setprecision(prec) << v;
    return ss.str();
  };
  Row teacher{"Teacher"}, kd{"KD"}, grid{"StarK"}, rnd{"StarK-Rand"}, aut{"StarK-Auto"};
  std::string metric = "metric";
  for (const json& j : reports) {
    const std::string mode = field<std::string>(j, "mode", "pipeline report");
    metric = field<std::string>(j, "metric", "pipeline report");
    teacher.metric = fmt(100.0 * field<double>(j, "teacher_dev_metric", "pipeline report"), 2);
    kd.metric = fmt(100.0 * field<double>(j, "trial_dev_metric", "pipeline report"), 2);
    Row* row = mode == "grid" ? &grid : mode == "random" ? &rnd : mode == "auto" ? &aut : nullptr;
    if (row == nullptr) fail(ErrorCode::input, "unknown pipeline mode '" + mode + "'");
    row->metric = fmt(100.0 * field<double>(j, "final_dev_metric", "pipeline report"), 2);
    row->sparsity = fmt(field<double>(j, "chosen_sparsity", "pipeline report"), 3);
  }
  std::ostringstream out;
  out << std::left << std::setw(12) << "method" << std::right << std::setw(12) << ("dev " + metric)
      << std::setw(10) << "sparsity" << "\n";
  out << std::string(34, '-') << "\n";
  for (const Row* r : {&teacher, &kd, &grid, &rnd, &aut}) {
    out << std::left << std::setw(12) << r->name << std::right << std::setw(12) << r->metric << std::setw(10)
        << r->sparsity << "\n";
  }
  return out.str();
}

}  // namespace stark
