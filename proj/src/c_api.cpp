#include "stark/stark.h"

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <new>
#include <optional>
#include <string>

#include "checkpoint.hpp"
#include "config.hpp"
#include "error.hpp"
#include "pipeline.hpp"
#include "reports.hpp"

using nlohmann::json;

struct stark_config {
  stark::Config cfg;
  stark::SeedLedger seeds;
};

struct stark_data {
  stark::PreparedData data;
};

struct stark_model {
  stark::ModelParams params;
  stark::GateSet gates;
  std::uint64_t config_digest = 0;
};

struct stark_scores {
  stark::ScoreReport report;
};

struct stark_mask {
  stark::SparsityMask mask;
};

namespace {

thread_local std::string g_last_error;

stark_status status_of(stark::ErrorCode c) {
  using stark::ErrorCode;
  switch (c) {
    case ErrorCode::parameter: return STARK_ERR_PARAMETER;
    case ErrorCode::dimension:
    case ErrorCode::contract: return STARK_ERR_CONTRACT;
    case ErrorCode::input: return STARK_ERR_INPUT;
    case ErrorCode::mask: return STARK_ERR_MASK;
    case ErrorCode::rewind: return STARK_ERR_REWIND;
    case ErrorCode::io: return STARK_ERR_IO;
    case ErrorCode::numeric:
    case ErrorCode::unreliable_check: return STARK_ERR_NUMERIC;
    case ErrorCode::config: return STARK_ERR_CONFIG;
    case ErrorCode::stage: return STARK_ERR_STAGE;
  }
  return STARK_ERR_INTERNAL;
}

template <typename F>
stark_status guard(F&& f) {
  try {
    f();
    g_last_error.clear();
    return STARK_OK;
  } catch (const stark::Error& e) {
    g_last_error = e.what();
    return status_of(e.code());
  } catch (const json::exception& e) {
    g_last_error = std::string("input error: ") + e.what();
    return STARK_ERR_INPUT;
  } catch (const std::bad_alloc&) {
    g_last_error = "internal error: out of memory";
    return STARK_ERR_INTERNAL;
  } catch (const std::exception& e) {
    g_last_error = std::string("internal error: ") + e.what();
    return STARK_ERR_INTERNAL;
  }
}

void need(const void* p, const char* what) {
  if (p == nullptr) stark::fail(stark::ErrorCode::contract, std::string(what) + " must not be NULL");
}

char* dup_string(const std::string& s) {
  char* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (out == nullptr) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void hand_out(char** dst, const std::string& s) {
  if (dst != nullptr) *dst = dup_string(s);
}

stark::UnitKind kind_arg(const char* kind) {
  need(kind, "kind");
  try {
    return stark::parse_unit_kind(kind);
  } catch (const stark::Error&) {
    stark::fail(stark::ErrorCode::parameter, std::string("unknown unit kind '") + kind + "'");
  }
}

std::string sparsity_tag(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", s);
  return buf;
}

}  // namespace

extern "C" {

const char* stark_version(void) { return "0.1.0"; }

const char* stark_last_error(void) { return g_last_error.c_str(); }

const char* stark_status_name(stark_status s) {
  switch (s) {
    case STARK_OK: return "ok";
    case STARK_ERR_STAGE: return "stage";
    case STARK_ERR_CONFIG: return "config";
    case STARK_ERR_INPUT: return "input";
    case STARK_ERR_CONTRACT: return "contract";
    case STARK_ERR_MASK: return "mask";
    case STARK_ERR_REWIND: return "rewind";
    case STARK_ERR_IO: return "io";
    case STARK_ERR_NUMERIC: return "numeric";
    case STARK_ERR_PARAMETER: return "parameter";
    case STARK_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void stark_free_string(char* s) { std::free(s); }

void stark_free_doubles(double* p) { std::free(p); }

// ---- configuration ----------------------------------------------------------------------

stark_status stark_config_default(stark_config** out) {
  return guard([&] {
    need(out, "out");
    stark::Config c = stark::default_config();
    *out = new stark_config{c, stark::SeedLedger(c.seed)};
  });
}

stark_status stark_config_load(const char* path, stark_config** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    stark::Config c = stark::load_config(path);
    *out = new stark_config{c, stark::SeedLedger(c.seed)};
  });
}

stark_status stark_config_from_json(const char* text, stark_config** out) {
  return guard([&] {
    need(text, "json");
    need(out, "out");
    json j = json::parse(text, nullptr, false);
    if (j.is_discarded()) stark::fail(stark::ErrorCode::config, "config is not valid JSON");
    stark::Config c = stark::config_from_json(j);
    *out = new stark_config{c, stark::SeedLedger(c.seed)};
  });
}

stark_status stark_config_set(stark_config* cfg, const char* key, const char* value) {
  return guard([&] {
    need(cfg, "config");
    need(key, "key");
    need(value, "value");
    json doc = stark::to_json(cfg->cfg);
    stark::set_override(doc, key, value);
    // Validate before touching the handle, so a bad override leaves it unchanged.
    stark::Config next = stark::config_from_json(doc);
    cfg->cfg = next;
    cfg->seeds = stark::SeedLedger(next.seed);
  });
}

stark_status stark_config_to_json(const stark_config* cfg, char** out_json) {
  return guard([&] {
    need(cfg, "config");
    need(out_json, "out_json");
    hand_out(out_json, stark::to_json(cfg->cfg).dump(2));
  });
}

stark_status stark_config_digest(const stark_config* cfg, uint64_t* out) {
  return guard([&] {
    need(cfg, "config");
    need(out, "out");
    *out = stark::config_digest(cfg->cfg);
  });
}

stark_status stark_config_seed_ledger(const stark_config* cfg, char** out_json) {
  return guard([&] {
    need(cfg, "config");
    need(out_json, "out_json");
    json j = json::object();
    for (const auto& [name, seed] : cfg->seeds.entries()) j[name] = seed;
    hand_out(out_json, j.dump());
  });
}

void stark_config_free(stark_config* cfg) { delete cfg; }

// ---- data -----------------------------------------------------------------------------------

stark_status stark_data_load(stark_config* cfg, stark_data** out) {
  return guard([&] {
    need(cfg, "config");
    need(out, "out");
    *out = new stark_data{stark::prepare_data(cfg->cfg, cfg->seeds)};
  });
}

stark_status stark_data_info(const stark_data* data, char** out_json) {
  return guard([&] {
    need(data, "data");
    need(out_json, "out_json");
    const auto& d = data->data;
    json j{{"task", d.train.task.name},
           {"train", d.train.size()},
           {"dev", d.dev.size()},
           {"vocab", d.vocab.size()},
           {"classes", d.train.task.classes},
           {"metric", stark::to_string(d.train.task.metric)},
           {"skipped_rows", d.skipped_rows},
           {"train_digest", d.train.digest()},
           {"dev_digest", d.dev.digest()}};
    hand_out(out_json, j.dump());
  });
}

stark_status stark_data_write_tsv(const stark_data* data, const char* dir) {
  return guard([&] {
    need(data, "data");
    need(dir, "dir");
    std::filesystem::create_directories(dir);
    const auto& d = data->data;
    const bool pair = d.train.task.arity == stark::Arity::pair;
    auto decode = [&](const stark::Dataset& ds) {
      std::vector<stark::RawExample> rows;
      for (const auto& e : ds.examples) {
        stark::RawExample r;
        r.label = e.label;
        std::string* cur = &r.text_a;
        for (std::size_t i = 1; i < e.ids.size(); ++i) {
          if (e.ids[i] == stark::Vocab::kSep) {
            cur = &r.text_b;
            continue;
          }
          if (!cur->empty()) *cur += ' ';
          *cur += d.vocab.token(e.ids[i]);
        }
        rows.push_back(std::move(r));
      }
      return rows;
    };
    const std::string base(dir);
    stark::write_tsv(base + "/train.tsv", decode(d.train), pair);
    stark::write_tsv(base + "/dev.tsv", decode(d.dev), pair);
  });
}

void stark_data_free(stark_data* data) { delete data; }

// ---- models ------------------------------------------------------------------------------------

stark_status stark_finetune(stark_config* cfg, const stark_data* data, stark_model** out_teacher,
                            char** out_report_jsonl) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(out_teacher, "out_teacher");
    stark::TrainResult r = stark::run_finetune(cfg->cfg, data->data, cfg->seeds);
    auto* m = new stark_model{std::move(r.params), {}, stark::config_digest(cfg->cfg)};
    m->gates = stark::GateSet::ones(m->params);
    *out_teacher = m;
    hand_out(out_report_jsonl, stark::train_report_jsonl(r.report));
  });
}

stark_status stark_model_save(const stark_model* model, const char* path) {
  return guard([&] {
    need(model, "model");
    need(path, "path");
    stark::save_checkpoint(path, stark::make_checkpoint(model->params, &model->gates, 0, model->config_digest));
  });
}

stark_status stark_model_load(const char* path, stark_model** out) {
  return guard([&] {
    need(path, "path");
    need(out, "out");
    const stark::Checkpoint c = stark::load_checkpoint(path);
    auto* m = new stark_model{stark::params_from_checkpoint(c), {}, c.config_digest};
    auto gates = stark::gates_from_checkpoint(c, m->params);
    m->gates = gates ? *gates : stark::GateSet::ones(m->params);
    *out = m;
  });
}

stark_status stark_model_info(const stark_model* model, char** out_json) {
  return guard([&] {
    need(model, "model");
    need(out_json, "out_json");
    const auto& p = model->params;
    json heads = json::array(), ffn = json::array();
    for (const auto& l : p.layers) {
      heads.push_back(l.heads.size());
      ffn.push_back(l.ffn_dim());
    }
    const auto mask = stark::mask_from_gates(model->gates);
    json j{{"layers", p.layer_count()},
           {"d_model", p.d_model()},
           {"vocab", p.vocab()},
           {"max_len", p.max_len()},
           {"classes", p.classes()},
           {"heads_per_layer", heads},
           {"ffn_per_layer", ffn},
           {"masked_heads", mask.count(stark::UnitKind::head)},
           {"masked_neurons", mask.count(stark::UnitKind::neuron)}};
    hand_out(out_json, j.dump());
  });
}

stark_status stark_model_evaluate(const stark_model* model, const stark_data* data, double* out) {
  return guard([&] {
    need(model, "model");
    need(data, "data");
    need(out, "out");
    *out = stark::evaluate(model->params, model->gates, data->data.dev);
  });
}

stark_status stark_model_dev_logits(const stark_model* model, const stark_data* data, double** out, size_t* rows,
                                    size_t* cols) {
  return guard([&] {
    need(model, "model");
    need(data, "data");
    need(out, "out");
    const auto seqs = data->data.dev.sequences();
    const stark::Tensor z = stark::predict_logits(model->params, model->gates, seqs);
    double* buf = static_cast<double*>(std::malloc(std::max<std::size_t>(1, z.size()) * sizeof(double)));
    if (buf == nullptr) throw std::bad_alloc();
    std::memcpy(buf, z.data().data(), z.size() * sizeof(double));
    *out = buf;
    if (rows != nullptr) *rows = z.rows();
    if (cols != nullptr) *cols = z.cols();
  });
}

void stark_model_free(stark_model* model) { delete model; }

// ---- stages ----------------------------------------------------------------------------------------

stark_status stark_trial(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                         const char* init_checkpoint_path, stark_model** out_student, char** out_report_jsonl) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(out_student, "out_student");
    const stark::DistillConfig dcfg = stark::distill_config(cfg->cfg, cfg->seeds);
    const stark::ModelParams student =
        stark::init_student(teacher->params, dcfg.student_init, stark::scoring_split(cfg->cfg, data->data),
                            stark::scoring_options(cfg->cfg));
    // The init goes to disk before any update happens.
    const stark::Checkpoint init = stark::make_checkpoint(student, nullptr, dcfg.seed, stark::distill_digest(dcfg));
    if (init_checkpoint_path != nullptr) stark::save_checkpoint(init_checkpoint_path, init);
    stark::TrainResult r = stark::distill(teacher->params, stark::GateSet::ones(teacher->params), student,
                                          data->data.train, data->data.dev, dcfg);
    auto* m = new stark_model{std::move(r.params), {}, stark::distill_digest(dcfg)};
    m->gates = stark::GateSet::ones(m->params);
    *out_student = m;
    hand_out(out_report_jsonl, stark::train_report_jsonl(r.report));
  });
}

stark_status stark_score(const stark_config* cfg, const stark_data* data, const stark_model* teacher,
                         const stark_model* trial_student, stark_scores** out) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(trial_student, "trial_student");
    need(out, "out");
    const auto& c = cfg->cfg;
    const auto opts = stark::scoring_options(c);
    const auto& split = stark::scoring_split(c, data->data);
    const auto p = stark::expressiveness(teacher->params, split, opts);
    const auto q = stark::friendliness(teacher->params, trial_student->params, split, opts);
    *out = new stark_scores{stark::build_score_report(p, q, c.distill.lambda, c.scoring.grouping)};
  });
}

stark_status stark_score_unstructured(const stark_config* cfg, const stark_data* data, const stark_model* teacher,
                                      const stark_model* trial_student, stark_scores** out) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(trial_student, "trial_student");
    need(out, "out");
    const auto& c = cfg->cfg;
    *out = new stark_scores{stark::unstructured_scores(teacher->params, trial_student->params,
                                                       stark::scoring_split(c, data->data), c.distill.lambda,
                                                       c.scoring.grouping, stark::scoring_options(c))};
  });
}

stark_status stark_scores_to_jsonl(const stark_scores* scores, char** out) {
  return guard([&] {
    need(scores, "scores");
    need(out, "out");
    hand_out(out, stark::score_report_jsonl(scores->report));
  });
}

stark_status stark_scores_from_jsonl(const char* text, double lambda, stark_scores** out) {
  return guard([&] {
    need(text, "text");
    need(out, "out");
    const auto r = stark::score_report_from_jsonl(text, lambda, stark::NormGrouping::per_layer);
    *out = new stark_scores{stark::with_lambda(r, lambda)};
  });
}

stark_status stark_scores_with_lambda(const stark_scores* scores, double lambda, stark_scores** out) {
  return guard([&] {
    need(scores, "scores");
    need(out, "out");
    *out = new stark_scores{stark::with_lambda(scores->report, lambda)};
  });
}

stark_status stark_scores_density_csv(const stark_scores* scores, const char* kind, size_t bins, size_t window,
                                      char** out_csv) {
  return guard([&] {
    need(scores, "scores");
    need(out_csv, "out_csv");
    hand_out(out_csv, stark::density_csv(scores->report, kind_arg(kind), bins, window));
  });
}

stark_status stark_scores_auto_sparsity(const stark_config* cfg, const stark_scores* scores, char** out_json) {
  return guard([&] {
    need(cfg, "config");
    need(scores, "scores");
    need(out_json, "out_json");
    const auto& c = cfg->cfg;
    std::vector<double> values;
    for (const auto* e : scores->report.of_kind(c.scoring.auto_kind)) values.push_back(e->i);
    const auto profile = stark::density_profile(values, c.scoring.bins, c.scoring.window);
    const auto est = stark::auto_sparsity(profile, c.distill.grid.front(), c.distill.grid.back());
    json j{{"fallback", est.fallback},   {"reason", est.reason},           {"estimate", est.sparsity},
           {"peak_bin", est.peak_bin},   {"peak_center", est.peak_center}, {"peak_mass", est.peak_mass},
           {"kind", stark::to_string(c.scoring.auto_kind)}};
    hand_out(out_json, j.dump());
  });
}

void stark_scores_free(stark_scores* scores) { delete scores; }

stark_status stark_mask_rank(const stark_scores* scores, double sparsity, stark_mask** out) {
  return guard([&] {
    need(scores, "scores");
    need(out, "out");
    *out = new stark_mask{stark::rank_mask(scores->report, sparsity)};
  });
}

stark_status stark_mask_random(const stark_model* model, double sparsity, uint64_t seed, stark_mask** out) {
  return guard([&] {
    need(model, "model");
    need(out, "out");
    auto units = stark::enumerate_units(model->params, stark::UnitKind::head);
    const auto neurons = stark::enumerate_units(model->params, stark::UnitKind::neuron);
    units.insert(units.end(), neurons.begin(), neurons.end());
    *out = new stark_mask{stark::random_mask(units, sparsity, seed)};
  });
}

stark_status stark_mask_to_json(const stark_mask* mask, char** out_json) {
  return guard([&] {
    need(mask, "mask");
    need(out_json, "out_json");
    hand_out(out_json, stark::mask_to_json(mask->mask).dump());
  });
}

stark_status stark_mask_from_json(const char* text, stark_mask** out) {
  return guard([&] {
    need(text, "json");
    need(out, "out");
    *out = new stark_mask{stark::mask_from_json(json::parse(text))};
  });
}

stark_status stark_mask_count(const stark_mask* mask, const char* kind, size_t* out) {
  return guard([&] {
    need(mask, "mask");
    need(out, "out");
    *out = mask->mask.count(kind_arg(kind));
  });
}

void stark_mask_free(stark_mask* mask) { delete mask; }

stark_status stark_distill(stark_config* cfg, const stark_data* data, const stark_model* teacher,
                           const stark_mask* mask, const char* init_checkpoint_path, stark_model** out_student,
                           char** out_report_jsonl) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(init_checkpoint_path, "init_checkpoint_path");
    need(out_student, "out_student");
    const stark::DistillConfig dcfg = stark::distill_config(cfg->cfg, cfg->seeds);
    const stark::Checkpoint init = stark::load_checkpoint(init_checkpoint_path);
    const stark::SparsityMask empty;
    stark::TrainResult r = stark::actual_distillation(dcfg, teacher->params, mask ? mask->mask : empty, init,
                                                      data->data.train, data->data.dev);
    auto* m = new stark_model{std::move(r.params), {}, stark::distill_digest(dcfg)};
    m->gates = stark::GateSet::ones(m->params);
    *out_student = m;
    hand_out(out_report_jsonl, stark::train_report_jsonl(r.report));
  });
}

stark_status stark_run(stark_config* cfg, const stark_data* data, const stark_model* teacher, const char* mode,
                       const char* out_dir, char** out_report_json, char** out_run_json) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(mode, "mode");
    need(out_report_json, "out_report_json");
    const stark::Mode m = stark::parse_mode(mode);
    stark::RunArtifacts art = stark::run_stark(cfg->cfg, data->data, teacher->params, m, cfg->seeds);
    const std::string report = stark::pipeline_to_json(art.report).dump(2) + "\n";

    json artifacts = json::array();
    if (out_dir != nullptr) {
      namespace fs = std::filesystem;
      fs::create_directories(out_dir);
      const fs::path dir(out_dir);
      auto emit = [&](const std::string& name, const std::string& text) {
        stark::write_text((dir / name).string(), text);
        artifacts.push_back(name);
      };
      stark::save_checkpoint((dir / "trial_init.strk").string(), art.trial.init);
      artifacts.push_back("trial_init.strk");
      emit("trial_report.jsonl", stark::train_report_jsonl(art.trial.report));
      if (m != stark::Mode::random) {
        const auto& sc = art.sparsification.scores;
        emit("scores.jsonl", stark::score_report_jsonl(sc));
        emit("density_head.csv", stark::density_csv(sc, stark::UnitKind::head, cfg->cfg.scoring.bins,
                                                    cfg->cfg.scoring.window));
        emit("density_neuron.csv", stark::density_csv(sc, stark::UnitKind::neuron, cfg->cfg.scoring.bins,
                                                      cfg->cfg.scoring.window));
        for (const auto& mask : art.sparsification.masks) {
          emit("mask_" + sparsity_tag(mask.sparsity) + ".json", stark::mask_to_json(mask).dump() + "\n");
        }
      }
      for (const auto& e : art.report.grid) {
        if (e.ok) emit("actual_" + sparsity_tag(e.sparsity) + ".jsonl", stark::train_report_jsonl(e.report));
      }
      if (!art.report.grid.empty() && art.final_student.layer_count() > 0) {
        const auto ones = stark::GateSet::ones(art.final_student);
        stark::save_checkpoint((dir / "student.strk").string(),
                               stark::make_checkpoint(art.final_student, &ones, 0, art.trial.init.config_digest));
        artifacts.push_back("student.strk");
      }
      emit("pipeline_report.json", report);
    }
    hand_out(out_report_json, report);
    if (out_run_json != nullptr) {
      json seeds = json::object();
      for (const auto& [name, seed] : cfg->seeds.entries()) seeds[name] = seed;
      json run{{"stage_seconds", art.stage_seconds}, {"artifacts", artifacts}, {"seed_ledger", seeds}};
      hand_out(out_run_json, run.dump());
    }
  });
}

stark_status stark_pilot(stark_config* cfg, const stark_data* data, const stark_model* teacher, char** out_json) {
  return guard([&] {
    need(cfg, "config");
    need(data, "data");
    need(teacher, "teacher");
    need(out_json, "out_json");
    const auto rows = stark::pilot_study(teacher->params, data->data.dev, cfg->cfg.pilot.sparsities,
                                         cfg->cfg.pilot.trials, cfg->seeds.seed("pilot"));
    hand_out(out_json, stark::pilot_to_json(rows).dump(2) + "\n");
  });
}

stark_status stark_report_render(const char* const* report_jsons, size_t count, char** out_text) {
  return guard([&] {
    need(out_text, "out_text");
    if (count > 0) need(report_jsons, "report_jsons");
    std::vector<json> docs;
    for (size_t i = 0; i < count; ++i) {
      need(report_jsons[i], "report json");
      docs.push_back(json::parse(report_jsons[i]));
    }
    hand_out(out_text, stark::render_comparison(docs));
  });
}

}  // extern "C"
