#include "scoring.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>

#include "distill.hpp"
#include "error.hpp"
#include "rng.hpp"

namespace stark {

const char* to_string(LossKind k) { return k == LossKind::task ? "task" : "distill"; }

const char* to_string(NormGrouping g) { return g == NormGrouping::per_layer ? "per-layer" : "global"; }

NormGrouping parse_norm_grouping(const std::string& s) {
  if (s == "per-layer") return NormGrouping::per_layer;
  if (s == "global") return NormGrouping::global;
  fail(ErrorCode::config, "unknown normalization grouping '" + s + "'");
}

double RawScoreTable::score(const UnitId& u) const {
  auto it = std::lower_bound(units.begin(), units.end(), u);
  if (it == units.end() || *it != u) fail(ErrorCode::contract, "no score for unit " + to_string(u));
  return scores[static_cast<std::size_t>(it - units.begin())];
}

namespace {

Tensor student_logits_for(const ModelParams& student, const Dataset& data) {
  const auto seqs = data.sequences();
  return predict_logits(student, GateSet::ones(student), seqs);
}

Tensor slice_rows(const Tensor& t, std::size_t start, std::size_t n) {
  const std::size_t k = t.cols();
  std::vector<double> out(t.data().begin() + static_cast<std::ptrdiff_t>(start * k),
                          t.data().begin() + static_cast<std::ptrdiff_t>((start + n) * k));
  return Tensor({n, k}, std::move(out));
}

// Loss of one batch of teacher logits.
Var batch_loss(Graph& g, Var logits, LossKind kind, const Dataset& data, std::size_t start,
               std::size_t n, const Tensor* student_logits, double tau) {
  if (kind == LossKind::task) {
    std::vector<int> y;
    y.reserve(n);
    for (std::size_t i = 0; i < n; ++i) y.push_back(data.examples[start + i].label);
    return task_loss(logits, y);
  }
  return kd_loss(logits, g.constant(slice_rows(*student_logits, start, n)), tau);
}

void check_scoring_inputs(const ModelParams& teacher, LossKind kind, const Dataset& data,
                          const ModelParams* student, const ScoringOptions& opts) {
  if (data.examples.empty()) fail(ErrorCode::input, "scoring needs nonempty data");
  if (opts.batch_size == 0) fail(ErrorCode::parameter, "scoring batch size must be positive");
  if (!(opts.tau > 0.0)) fail(ErrorCode::parameter, "scoring temperature must be positive");
  if (kind == LossKind::distill) {
    if (student == nullptr) fail(ErrorCode::contract, "distill-loss scoring needs a trial student");
    if (student->classes() != teacher.classes()) {
      fail(ErrorCode::contract, "teacher and student class counts differ");
    }
  }
}

}  // namespace

RawScoreTable accumulate_gate_grads(const ModelParams& teacher, const GateSet& gates, LossKind kind,
                                    const Dataset& data, const ModelParams* student,
                                    const ScoringOptions& opts) {
  check_scoring_inputs(teacher, kind, data, student, opts);
  if (!gates.matches(teacher)) fail(ErrorCode::contract, "gates do not match the teacher");
  if (!gates.all_ones()) fail(ErrorCode::contract, "sensitivity scoring requires all gates equal to 1");

  Tensor zs;
  if (kind == LossKind::distill) zs = student_logits_for(*student, data);

  const std::size_t layers = teacher.layer_count();
  std::vector<std::vector<double>> head_acc(layers), neuron_acc(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    head_acc[l].assign(teacher.layers[l].heads.size(), 0.0);
    neuron_acc[l].assign(teacher.layers[l].ffn_dim(), 0.0);
  }

  const auto seqs = data.sequences();
  std::size_t batches = 0;
  for (std::size_t start = 0; start < seqs.size(); start += opts.batch_size) {
    const std::size_t n = std::min(opts.batch_size, seqs.size() - start);
    Graph g;
    BoundModel m = bind(g, teacher, gates, BindOptions{.params_grad = false, .gates_grad = true});
    Batch b = make_batch(std::span<const TokenSeq>(seqs).subspan(start, n), teacher);
    Var logits = encoder_forward(m, b);
    Var loss = batch_loss(g, logits, kind, data, start, n, &zs, opts.tau);
    g.backward(loss);
    for (std::size_t l = 0; l < layers; ++l) {
      const Tensor gx = g.grad(m.layers[l].xi);
      const Tensor gn = g.grad(m.layers[l].nu);
      for (std::size_t i = 0; i < gx.size(); ++i) head_acc[l][i] += std::abs(gx[i]);
      for (std::size_t i = 0; i < gn.size(); ++i) neuron_acc[l][i] += std::abs(gn[i]);
    }
    ++batches;
  }

  RawScoreTable t;
  t.loss = kind;
  t.batches = batches;
  t.data_digest = data.digest();
  const double inv = 1.0 / static_cast<double>(batches);
  // Sorted order: per layer, heads then neurons.
  for (std::size_t l = 0; l < layers; ++l) {
    for (std::size_t i = 0; i < head_acc[l].size(); ++i) {
      t.units.push_back({l, UnitKind::head, {}, i});
      t.scores.push_back(head_acc[l][i] * inv);
    }
    for (std::size_t i = 0; i < neuron_acc[l].size(); ++i) {
      t.units.push_back({l, UnitKind::neuron, {}, i});
      t.scores.push_back(neuron_acc[l][i] * inv);
    }
  }
  return t;
}

RawScoreTable expressiveness(const ModelParams& teacher, const Dataset& data, const ScoringOptions& opts) {
  return accumulate_gate_grads(teacher, GateSet::ones(teacher), LossKind::task, data, nullptr, opts);
}

RawScoreTable friendliness(const ModelParams& teacher, const ModelParams& student, const Dataset& data,
                           const ScoringOptions& opts) {
  return accumulate_gate_grads(teacher, GateSet::ones(teacher), LossKind::distill, data, &student, opts);
}

// ---- normalization / interpolation ------------------------------------------------

namespace {

std::string group_key(const UnitId& u, NormGrouping grouping) {
  std::string key = to_string(u.kind);
  if (grouping == NormGrouping::per_layer) key += ".L" + std::to_string(u.layer);
  return key;
}

}  // namespace

NormalizedScores normalize_l2(const RawScoreTable& table, NormGrouping grouping) {
  if (table.units.empty()) fail(ErrorCode::input, "cannot normalize an empty score table");
  if (table.units.size() != table.scores.size()) fail(ErrorCode::contract, "score table is ragged");
  std::map<std::string, double> sq;
  for (std::size_t i = 0; i < table.units.size(); ++i) {
    if (table.scores[i] < 0.0) fail(ErrorCode::contract, "raw scores must be nonnegative");
    sq[group_key(table.units[i], grouping)] += table.scores[i] * table.scores[i];
  }
  NormalizedScores out;
  out.units = table.units;
  out.values.resize(table.scores.size());
  for (std::size_t i = 0; i < table.units.size(); ++i) {
    const double norm = std::sqrt(sq[group_key(table.units[i], grouping)]);
    out.values[i] = norm > 0.0 ? table.scores[i] / norm : 0.0;
  }
  for (const auto& [key, s] : sq) {
    if (s == 0.0) out.zero_groups.push_back(key);
  }
  return out;
}

std::vector<double> interpolate(const NormalizedScores& p, const NormalizedScores& q, double lambda) {
  if (p.units != q.units) fail(ErrorCode::contract, "interpolate: P and Q cover different units");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::parameter, "lambda must lie in [0, 1]");
  std::vector<double> out(p.values.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = lambda * p.values[i] + (1.0 - lambda) * q.values[i];
  return out;
}

std::vector<const ScoreEntry*> ScoreReport::of_kind(UnitKind kind) const {
  std::vector<const ScoreEntry*> out;
  for (const auto& e : entries) {
    if (e.unit.kind == kind) out.push_back(&e);
  }
  return out;
}

std::uint64_t ScoreReport::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* p, std::size_t n) {
    h = fnv1a(std::span<const unsigned char>(static_cast<const unsigned char*>(p), n), h);
  };
  for (const auto& e : entries) {
    const std::uint64_t layer = e.unit.layer, kind = static_cast<std::uint64_t>(e.unit.kind),
                        index = e.unit.index, rank = e.rank;
    mix(&layer, 8);
    mix(&kind, 8);
    mix(e.unit.tensor.data(), e.unit.tensor.size());
    mix(&index, 8);
    for (double v : {e.p_raw, e.q_raw, e.p, e.q, e.i}) mix(&v, 8);
    mix(&rank, 8);
  }
  mix(&lambda, 8);
  return h;
}

void assign_ranks(ScoreReport& report) {
  for (UnitKind kind : {UnitKind::head, UnitKind::neuron, UnitKind::parameter}) {
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < report.entries.size(); ++i) {
      if (report.entries[i].unit.kind == kind) idx.push_back(i);
    }
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
      const auto& ea = report.entries[a];
      const auto& eb = report.entries[b];
      if (ea.i != eb.i) return ea.i < eb.i;
      return ea.unit < eb.unit;
    });
    for (std::size_t r = 0; r < idx.size(); ++r) report.entries[idx[r]].rank = r;
  }
}

ScoreReport build_score_report(const RawScoreTable& p, const RawScoreTable& q, double lambda,
                               NormGrouping grouping) {
  if (p.units != q.units) fail(ErrorCode::contract, "P and Q tables cover different units");
  const NormalizedScores ph = normalize_l2(p, grouping);
  const NormalizedScores qh = normalize_l2(q, grouping);
  const std::vector<double> i = interpolate(ph, qh, lambda);
  ScoreReport r;
  r.lambda = lambda;
  r.grouping = grouping;
  for (const auto& z : ph.zero_groups) r.zero_groups.push_back("p:" + z);
  for (const auto& z : qh.zero_groups) r.zero_groups.push_back("q:" + z);
  r.entries.reserve(p.units.size());
  for (std::size_t k = 0; k < p.units.size(); ++k) {
    r.entries.push_back({p.units[k], p.scores[k], q.scores[k], ph.values[k], qh.values[k], i[k], 0});
  }
  assign_ranks(r);
  return r;
}

ScoreReport with_lambda(const ScoreReport& report, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::parameter, "lambda must lie in [0, 1]");
  ScoreReport r = report;
  r.lambda = lambda;
  for (auto& e : r.entries) e.i = lambda * e.p + (1.0 - lambda) * e.q;
  assign_ranks(r);
  return r;
}

// ---- unstructured -------------------------------------------------------------------

namespace {

RawScoreTable parameter_saliency(const ModelParams& teacher, LossKind kind, const Dataset& data,
                                 const Tensor* zs, const ScoringOptions& opts) {
  const std::size_t layers = teacher.layer_count();
  // Per layer: prunable tensors sorted by name, with their bound leaf position.
  struct Slot {
    std::string name;
    const Tensor* value;
    std::vector<double> acc;
  };
  std::vector<std::vector<Slot>> slots(layers);
  for (std::size_t l = 0; l < layers; ++l) {
    teacher.for_each_prunable(l, [&](const std::string& name, const Tensor& t) {
      slots[l].push_back({name, &t, std::vector<double>(t.size(), 0.0)});
    });
  }
  const GateSet ones = GateSet::ones(teacher);
  const auto seqs = data.sequences();
  std::size_t batches = 0;
  for (std::size_t start = 0; start < seqs.size(); start += opts.batch_size) {
    const std::size_t n = std::min(opts.batch_size, seqs.size() - start);
    Graph g;
    BoundModel m = bind(g, teacher, ones, BindOptions{.params_grad = true, .gates_grad = false});
    Batch b = make_batch(std::span<const TokenSeq>(seqs).subspan(start, n), teacher);
    Var logits = encoder_forward(m, b);
    g.backward(batch_loss(g, logits, kind, data, start, n, zs, opts.tau));
    for (std::size_t l = 0; l < layers; ++l) {
      const BoundLayer& bl = m.layers[l];
      std::vector<Var> vars;
      for (const auto& h : bl.heads) {
        vars.push_back(h.wq);
        vars.push_back(h.wk);
        vars.push_back(h.wv);
        vars.push_back(h.wo);
      }
      vars.push_back(bl.w1);
      vars.push_back(bl.w2);
      for (std::size_t s = 0; s < vars.size(); ++s) {
        const Tensor gr = g.grad(vars[s]);
        const Tensor& w = *slots[l][s].value;
        auto& acc = slots[l][s].acc;
        for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += std::abs(w[i] * gr[i]);
      }
    }
    ++batches;
  }
  RawScoreTable t;
  t.loss = kind;
  t.batches = batches;
  t.data_digest = data.digest();
  const double inv = 1.0 / static_cast<double>(batches);
  for (std::size_t l = 0; l < layers; ++l) {
    std::sort(slots[l].begin(), slots[l].end(), [](const Slot& a, const Slot& b) { return a.name < b.name; });
    for (const Slot& s : slots[l]) {
      for (std::size_t i = 0; i < s.acc.size(); ++i) {
        t.units.push_back({l, UnitKind::parameter, s.name, i});
        t.scores.push_back(s.acc[i] * inv);
      }
    }
  }
  return t;
}

}  // namespace

ScoreReport unstructured_scores(const ModelParams& teacher, const ModelParams& student,
                                const Dataset& data, double lambda, NormGrouping grouping,
                                const ScoringOptions& opts) {
  check_scoring_inputs(teacher, LossKind::distill, data, &student, opts);
  const Tensor zs = student_logits_for(student, data);
  const RawScoreTable p = parameter_saliency(teacher, LossKind::task, data, nullptr, opts);
  const RawScoreTable q = parameter_saliency(teacher, LossKind::distill, data, &zs, opts);
  return build_score_report(p, q, lambda, grouping);
}

// ---- ablation oracle -------------------------------------------------------------------

namespace {

std::vector<double> example_losses(const ModelParams& model, const GateSet& gates, LossKind kind,
                                   const Dataset& data, const Tensor* student_logits, const ScoringOptions& opts) {
  if (data.examples.empty()) fail(ErrorCode::input, "loss over empty data");
  if (kind == LossKind::distill && student_logits == nullptr) {
    fail(ErrorCode::contract, "distill loss needs student logits");
  }
  const auto seqs = data.sequences();
  const Tensor z = predict_logits(model, gates, seqs);
  const std::size_t k = z.cols();
  std::vector<double> out(seqs.size());
  for (std::size_t r = 0; r < seqs.size(); ++r) {
    std::span<const double> row(z.data().data() + r * k, k);
    if (kind == LossKind::task) {
      std::vector<double> y(k, 0.0), p(k);
      y[static_cast<std::size_t>(data.examples[r].label)] = 1.0;
      double mx = row[0];
      for (double v : row) mx = std::max(mx, v);
      double s = 0.0;
      for (std::size_t j = 0; j < k; ++j) s += p[j] = std::exp(row[j] - mx);
      for (double& v : p) v /= s;
      out[r] = task_loss(y, p);
    } else {
      std::span<const double> srow(student_logits->data().data() + r * k, k);
      out[r] = kd_loss(row, srow, opts.tau);
    }
  }
  return out;
}

}  // namespace

double mean_loss(const ModelParams& model, const GateSet& gates, LossKind kind, const Dataset& data,
                 const Tensor* student_logits, const ScoringOptions& opts) {
  const std::vector<double> losses = example_losses(model, gates, kind, data, student_logits, opts);
  double total = 0.0;
  for (double v : losses) total += v;
  return total / static_cast<double>(losses.size());
}

double ablation_oracle(const ModelParams& model, const UnitId& unit, const Dataset& data,
                       LossKind kind, const ModelParams* student, const ScoringOptions& opts) {
  check_scoring_inputs(model, kind, data, student, opts);
  Tensor zs;
  if (kind == LossKind::distill) zs = student_logits_for(*student, data);
  const GateSet ones = GateSet::ones(model);
  const std::vector<double> base = example_losses(model, ones, kind, data, &zs, opts);
  std::vector<double> ablated;
  SparsityMask m;
  m.removed = {unit};
  if (unit.kind == UnitKind::parameter) {
    m.kind = MaskKind::unstructured;
    ablated = example_losses(apply_unstructured(model, m), ones, kind, data, &zs, opts);
  } else {
    ablated = example_losses(model, gates_with_mask(model, m), kind, data, &zs, opts);
  }
  // Same batches as the gate-gradient accumulation: mean over batches of |L_b - L0_b|.
  double total = 0.0;
  std::size_t batches = 0;
  for (std::size_t start = 0; start < base.size(); start += opts.batch_size) {
    const std::size_t end = std::min(base.size(), start + opts.batch_size);
    double diff = 0.0;
    for (std::size_t r = start; r < end; ++r) diff += base[r] - ablated[r];
    total += std::abs(diff / static_cast<double>(end - start));
    ++batches;
  }
  return total / static_cast<double>(batches);
}

}  // namespace stark
