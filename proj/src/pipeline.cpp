#include "pipeline.hpp"

#include <chrono>
#include <cmath>

#include "error.hpp"
#include "metrics.hpp"
#include "rng.hpp"

namespace stark {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<double> softmax_row(std::span<const double> z) {
  double mx = z[0];
  for (double v : z) mx = std::max(mx, v);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] - mx);
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

PreparedData prepare_data(const Config& cfg, SeedLedger& seeds) {
  PreparedData d;
  std::vector<RawExample> train_rows, dev_rows;
  TaskSpec task;
  if (cfg.task.kind == "synthetic") {
    SyntheticData syn = make_synthetic(cfg.task.synthetic, seeds.seed("data"));
    train_rows = std::move(syn.train);
    dev_rows = std::move(syn.dev);
    task = synthetic_task(cfg.task.synthetic);
  } else {
    TsvLoadReport tr = load_tsv(cfg.task.train_path, cfg.task.schema);
    TsvLoadReport dv = load_tsv(cfg.task.dev_path, cfg.task.schema);
    d.skipped_rows = tr.skipped + dv.skipped;
    train_rows = std::move(tr.rows);
    dev_rows = std::move(dv.rows);
    task = cfg.task.spec;
  }
  d.vocab = Vocab::build(train_rows, cfg.task.max_vocab);
  d.train = encode_all(train_rows, d.vocab, task);
  d.dev = encode_all(dev_rows, d.vocab, task);
  return d;
}

ModelDims model_dims(const Config& cfg, const PreparedData& data) {
  ModelDims dims = cfg.model;
  dims.vocab = data.vocab.size();
  dims.max_len = data.train.task.max_len;
  dims.classes = data.train.task.classes;
  return dims;
}

TrainResult run_finetune(const Config& cfg, const PreparedData& data, SeedLedger& seeds) {
  Rng rng(seeds.seed("teacher.init"));
  const ModelParams init = init_model(model_dims(cfg, data), rng);
  return finetune_teacher(init, data.train, data.dev, cfg.teacher, seeds.seed("teacher.train"));
}

DistillConfig distill_config(const Config& cfg, SeedLedger& seeds) {
  DistillConfig d = cfg.distill;
  d.seed = seeds.seed("distill.train");
  return d;
}

ScoringOptions scoring_options(const Config& cfg) {
  return ScoringOptions{cfg.scoring.batch_size, cfg.distill.tau};
}

const Dataset& scoring_split(const Config& cfg, const PreparedData& data) {
  return cfg.scoring.split == "dev" ? data.dev : data.train;
}

ModelParams init_student(const ModelParams& teacher, const StudentInit& init, const Dataset& score_data,
                         const ScoringOptions& opts) {
  if (init.kind == StudentInitKind::drop_layers) {
    if (init.keep_layers == 0) fail(ErrorCode::parameter, "drop-layers student must keep at least one layer");
    return drop_layers(teacher, init.keep_layers);
  }
  if (!(init.prune_sparsity > 0.0 && init.prune_sparsity < 1.0)) {
    fail(ErrorCode::parameter, "prune-params sparsity must lie in (0, 1)");
  }
  const RawScoreTable p = expressiveness(teacher, score_data, opts);
  const ScoreReport report = build_score_report(p, p, 1.0, NormGrouping::per_layer);
  return compact(teacher, rank_mask(report, init.prune_sparsity));
}

TrialResult trial_distillation(const DistillConfig& cfg, const ModelParams& teacher, const Dataset& train,
                               const Dataset& dev, const Dataset& score_data, const ScoringOptions& opts) {
  cfg.validate();
  const ModelParams student = init_student(teacher, cfg.student_init, score_data, opts);
  TrialResult t;
  t.init = make_checkpoint(student, nullptr, cfg.seed, distill_digest(cfg));
  TrainResult r = distill(teacher, GateSet::ones(teacher), student, train, dev, cfg);
  t.student = std::move(r.params);
  t.report = std::move(r.report);
  return t;
}

Sparsification parameter_sparsification(const DistillConfig& cfg, const ModelParams& teacher,
                                         const ModelParams& trial_student, const Dataset& score_data,
                                         const ScoringOptions& opts, NormGrouping grouping) {
  cfg.validate();
  const RawScoreTable p = expressiveness(teacher, score_data, opts);
  const RawScoreTable q = friendliness(teacher, trial_student, score_data, opts);
  Sparsification s;
  s.scores = build_score_report(p, q, cfg.lambda, grouping);
  for (double level : cfg.grid) s.masks.push_back(rank_mask(s.scores, level));
  return s;
}

TrainResult actual_distillation(const DistillConfig& cfg, const ModelParams& teacher, const SparsityMask& mask,
                                const Checkpoint& init, const Dataset& train, const Dataset& dev) {
  if (init.config_digest != distill_digest(cfg)) {
    fail(ErrorCode::rewind, "init checkpoint was written under a different distillation config");
  }
  const ModelParams student = params_from_checkpoint(init);
  if (mask.kind == MaskKind::unstructured) {
    const ModelParams sparse = apply_unstructured(teacher, mask);
    return distill(sparse, GateSet::ones(sparse), student, train, dev, cfg);
  }
  return distill(teacher, gates_with_mask(teacher, mask), student, train, dev, cfg);
}

const char* to_string(Mode m) {
  switch (m) {
    case Mode::grid: return "grid";
    case Mode::automatic: return "auto";
    case Mode::random: return "random";
  }
  return "?";
}

Mode parse_mode(const std::string& s) {
  if (s == "grid") return Mode::grid;
  if (s == "auto") return Mode::automatic;
  if (s == "random") return Mode::random;
  fail(ErrorCode::config, "unknown mode '" + s + "'");
}

RunArtifacts run_stark(const Config& cfg, const PreparedData& data, const ModelParams& teacher, Mode mode,
                       SeedLedger& seeds) {
  cfg.validate();
  RunArtifacts art;
  PipelineReport& rep = art.report;
  rep.mode = mode;
  rep.metric = to_string(data.dev.task.metric);
  rep.lambda = cfg.distill.lambda;
  const DistillConfig dcfg = distill_config(cfg, seeds);
  const ScoringOptions opts = scoring_options(cfg);
  const Dataset& score_data = scoring_split(cfg, data);

  rep.teacher_dev_metric = evaluate(teacher, GateSet::ones(teacher), data.dev);

  auto t0 = Clock::now();
  art.trial = trial_distillation(dcfg, teacher, data.train, data.dev, score_data, opts);
  art.stage_seconds["trial"] = seconds_since(t0);
  rep.trial_dev_metric = art.trial.report.best_dev_metric;

  if (mode != Mode::random) {
    t0 = Clock::now();
    art.sparsification =
        parameter_sparsification(dcfg, teacher, art.trial.student, score_data, opts, cfg.scoring.grouping);
    art.stage_seconds["sparsify"] = seconds_since(t0);
    rep.score_digest = art.sparsification.scores.digest();
  }

  t0 = Clock::now();
  bool have_best = false;
  double best_metric = 0.0;
  auto run_one = [&](const SparsityMask& mask) {
    GridEntry e;
    e.sparsity = mask.sparsity;
    e.removed_heads = mask.count(UnitKind::head);
    e.removed_neurons = mask.count(UnitKind::neuron);
    try {
      TrainResult r = actual_distillation(dcfg, teacher, mask, art.trial.init, data.train, data.dev);
      e.ok = true;
      e.dev_metric = r.report.best_dev_metric;
      e.report = std::move(r.report);
      // Ties go to the sparser teacher, which comes later in the grid.
      if (!have_best || e.dev_metric >= best_metric) {
        have_best = true;
        best_metric = e.dev_metric;
        art.final_student = std::move(r.params);
      }
    } catch (const Error& err) {
      e.error = err.what();
    }
    rep.grid.push_back(std::move(e));
    if (!rep.grid.back().ok) fail(ErrorCode::stage, rep.grid.back().error);
    return rep.grid.back().dev_metric;
  };

  auto grid_search = [&](auto make_mask) {
    std::size_t i = 0;
    const SearchResult sr = search(dcfg.grid, [&](double s) { return run_one(make_mask(s, i++)); });
    rep.chosen_sparsity = sr.best_sparsity;
    rep.final_dev_metric = sr.best_metric;
  };

  if (mode == Mode::grid) {
    grid_search([&](double, std::size_t i) { return art.sparsification.masks[i]; });
  } else if (mode == Mode::random) {
    rep.random_seed = seeds.seed("stark-rand.mask");
    std::vector<UnitId> units = enumerate_units(teacher, UnitKind::head);
    const auto neurons = enumerate_units(teacher, UnitKind::neuron);
    units.insert(units.end(), neurons.begin(), neurons.end());
    grid_search([&](double s, std::size_t i) {
      return random_mask(units, s, derive_seed(rep.random_seed, "grid." + std::to_string(i)));
    });
  } else {
    std::vector<double> values;
    for (const ScoreEntry* e : art.sparsification.scores.of_kind(cfg.scoring.auto_kind)) values.push_back(e->i);
    const DensityProfile profile = density_profile(values, cfg.scoring.bins, cfg.scoring.window);
    rep.auto_estimate = auto_sparsity(profile, dcfg.grid.front(), dcfg.grid.back());
    if (rep.auto_estimate->fallback) {
      grid_search([&](double, std::size_t i) { return art.sparsification.masks[i]; });
    } else {
      SparsityMask mask = rank_mask(art.sparsification.scores, rep.auto_estimate->sparsity);
      mask.provenance.source = MaskProvenance::Source::automatic;
      rep.chosen_sparsity = rep.auto_estimate->sparsity;
      rep.final_dev_metric = run_one(mask);
    }
  }
  art.stage_seconds["actual"] = seconds_since(t0);
  return art;
}

// ---- pilot ---------------------------------------------------------------------------

double mean_output_variance(const ModelParams& model, const Dataset& data) {
  if (data.examples.empty()) fail(ErrorCode::input, "variance over empty data");
  const auto seqs = data.sequences();
  const Tensor z = predict_logits(model, GateSet::ones(model), seqs);
  const std::size_t k = z.cols();
  double total = 0.0;
  for (std::size_t r = 0; r < z.rows(); ++r) {
    const auto p = softmax_row(std::span<const double>(z.data().data() + r * k, k));
    total += variance_confidence(p);
  }
  return total / static_cast<double>(z.rows());
}

std::vector<PilotRow> pilot_study(const ModelParams& teacher, const Dataset& dev,
                                  const std::vector<double>& sparsities, std::size_t trials, std::uint64_t seed) {
  if (trials == 0) fail(ErrorCode::parameter, "pilot needs at least one trial");
  const std::vector<UnitId> units = enumerate_units(teacher, UnitKind::parameter);
  const GateSet ones = GateSet::ones(teacher);
  std::vector<PilotRow> rows;
  for (std::size_t si = 0; si < sparsities.size(); ++si) {
    const double s = sparsities[si];
    std::vector<double> metrics, variances;
    for (std::size_t t = 0; t < trials; ++t) {
      const std::uint64_t mseed = derive_seed(seed, "pilot." + std::to_string(si) + "." + std::to_string(t));
      const SparsityMask mask = random_mask(units, s, mseed);
      const ModelParams pruned = mask.empty() ? teacher : apply_unstructured(teacher, mask);
      metrics.push_back(evaluate(pruned, ones, dev));
      variances.push_back(mean_output_variance(pruned, dev));
    }
    auto moments = [](const std::vector<double>& v, double& mean, double& sd) {
      // Shifted by the first value so identical trials give that value exactly.
      double shift = 0.0;
      for (double x : v) shift += x - v[0];
      mean = v[0] + shift / static_cast<double>(v.size());
      double ss = 0.0;
      for (double x : v) ss += (x - mean) * (x - mean);
      sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
    };
    PilotRow row;
    row.sparsity = s;
    row.trials = trials;
    moments(metrics, row.mean_metric, row.std_metric);
    moments(variances, row.mean_variance, row.std_variance);
    rows.push_back(row);
  }
  return rows;
}

}  // namespace stark
