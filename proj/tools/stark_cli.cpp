// Command-line front end. Everything goes through the C interface in stark/stark.h.
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "stark/stark.h"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr int kExitStage = 1;
constexpr int kExitConfig = 2;
constexpr int kExitInput = 3;

struct Failure {
  stark_status status;
  std::string message;
};

int exit_code_for(stark_status s) {
  switch (s) {
    case STARK_ERR_CONFIG:
    case STARK_ERR_PARAMETER: return kExitConfig;
    case STARK_ERR_INPUT: return kExitInput;
    default: return kExitStage;
  }
}

void check(stark_status s) {
  if (s != STARK_OK) throw Failure{s, stark_last_error()};
}

template <typename T, void (*Free)(T*)>
struct Deleter {
  void operator()(T* p) const { Free(p); }
};
using ConfigPtr = std::unique_ptr<stark_config, Deleter<stark_config, stark_config_free>>;
using DataPtr = std::unique_ptr<stark_data, Deleter<stark_data, stark_data_free>>;
using ModelPtr = std::unique_ptr<stark_model, Deleter<stark_model, stark_model_free>>;
using ScoresPtr = std::unique_ptr<stark_scores, Deleter<stark_scores, stark_scores_free>>;
using MaskPtr = std::unique_ptr<stark_mask, Deleter<stark_mask, stark_mask_free>>;

// Takes ownership of a string handed out by the library.
std::string take(char* s) {
  if (s == nullptr) return {};
  std::string out(s);
  stark_free_string(s);
  return out;
}

std::string read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Failure{STARK_ERR_INPUT, "cannot read '" + path + "'"};
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string tag(double s) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.3f", s);
  return buf;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

struct Options {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<double> sparsity, lambda, tau, alpha;
  std::string out_dir = "out";
  std::vector<std::string> sets;

  std::string teacher, student, init, mask, scores, mode = "grid";
  bool unstructured = false, random = false;
  std::vector<std::string> reports;
};

class Run {
 public:
  Run(std::string command, const Options& o) : cmd_(std::move(command)), o_(o) {}

  void prepare() {
    std::error_code ec;
    fs::create_directories(o_.out_dir, ec);
    if (ec) throw Failure{STARK_ERR_IO, "cannot create '" + o_.out_dir + "': " + ec.message()};
    stark_config* c = nullptr;
    if (o_.config_path.empty()) {
      check(stark_config_default(&c));
    } else {
      if (!fs::exists(o_.config_path)) throw Failure{STARK_ERR_INPUT, "config '" + o_.config_path + "' not found"};
      check(stark_config_load(o_.config_path.c_str(), &c));
    }
    cfg_.reset(c);
    // Overrides are applied and validated before any work starts.
    if (o_.seed) set("seed", std::to_string(*o_.seed));
    if (o_.lambda) set("distill.lambda", json(*o_.lambda).dump());
    if (o_.tau) set("distill.tau", json(*o_.tau).dump());
    if (o_.alpha) set("distill.alpha", json(*o_.alpha).dump());
    for (const auto& kv : o_.sets) {
      const auto eq = kv.find('=');
      if (eq == std::string::npos) throw Failure{STARK_ERR_CONFIG, "--set expects key=value, got '" + kv + "'"};
      set(kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (o_.sparsity && !(*o_.sparsity >= 0.0 && *o_.sparsity < 1.0)) {
      throw Failure{STARK_ERR_CONFIG, "--sparsity must lie in [0, 1)"};
    }
    for (const std::string* p : {&o_.teacher, &o_.student, &o_.init, &o_.mask, &o_.scores}) {
      if (!p->empty() && !fs::exists(*p)) throw Failure{STARK_ERR_INPUT, "input '" + *p + "' not found"};
    }
    for (const auto& p : o_.reports) {
      if (!fs::exists(p)) throw Failure{STARK_ERR_INPUT, "input '" + p + "' not found"};
    }
  }

  stark_config* cfg() { return cfg_.get(); }

  stark_data* data() {
    if (!data_) {
      stage("data", [&] {
        stark_data* d = nullptr;
        check(stark_data_load(cfg_.get(), &d));
        data_.reset(d);
      });
    }
    return data_.get();
  }

  ModelPtr load_model(const std::string& path, const char* what) {
    if (path.empty()) throw Failure{STARK_ERR_CONFIG, std::string("--") + what + " is required"};
    stark_model* m = nullptr;
    check(stark_model_load(path.c_str(), &m));
    inputs_[what] = path;
    return ModelPtr(m);
  }

  template <typename F>
  void stage(const std::string& name, F&& f) {
    const auto t0 = std::chrono::steady_clock::now();
    f();
    timings_[name] += std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  }

  std::string path(const std::string& name) const { return (fs::path(o_.out_dir) / name).string(); }

  void emit(const std::string& name, const std::string& text) {
    std::ofstream out(path(name), std::ios::binary);
    out << text;
    if (!out) throw Failure{STARK_ERR_IO, "cannot write '" + path(name) + "'"};
    listed(name);
  }

  void listed(const std::string& name) { artifacts_.push_back(path(name)); }

  void merge_timings(const json& t) {
    for (auto it = t.begin(); it != t.end(); ++it) timings_[it.key()] += it.value().get<double>();
  }

  void write_manifest() {
    std::uint64_t digest = 0;
    check(stark_config_digest(cfg_.get(), &digest));
    char* cfg_text = nullptr;
    check(stark_config_to_json(cfg_.get(), &cfg_text));
    char* seeds = nullptr;
    check(stark_config_seed_ledger(cfg_.get(), &seeds));
    json m{{"tool", "stark-cli"},
           {"version", stark_version()},
           {"command", cmd_},
           {"config", json::parse(take(cfg_text))},
           {"config_digest", hex64(digest)},
           {"seed_ledger", json::parse(take(seeds))},
           {"inputs", inputs_},
           {"artifacts", artifacts_},
           {"stage_seconds", timings_}};
    m["artifacts"].push_back(path("manifest.json"));
    std::ofstream out(path("manifest.json"));
    out << m.dump(2) << "\n";
    if (!out) throw Failure{STARK_ERR_IO, "cannot write manifest"};
  }

  const Options& opts() const { return o_; }

 private:
  void set(const std::string& key, const std::string& value) { check(stark_config_set(cfg_.get(), key.c_str(), value.c_str())); }

  std::string cmd_;
  const Options& o_;
  ConfigPtr cfg_;
  DataPtr data_;
  std::map<std::string, std::string> inputs_;
  std::vector<std::string> artifacts_;
  std::map<std::string, double> timings_;
};

std::vector<double> grid_of(stark_config* cfg) {
  char* text = nullptr;
  check(stark_config_to_json(cfg, &text));
  return json::parse(take(text))["distill"]["grid"].get<std::vector<double>>();
}

void save_model(Run& r, stark_model* m, const std::string& name) {
  check(stark_model_save(m, r.path(name).c_str()));
  r.listed(name);
}

void cmd_finetune(Run& r) {
  stark_data* data = r.data();
  r.stage("export", [&] {
    check(stark_data_write_tsv(data, r.opts().out_dir.c_str()));
    r.listed("train.tsv");
    r.listed("dev.tsv");
  });
  stark_model* teacher = nullptr;
  char* report = nullptr;
  r.stage("finetune", [&] { check(stark_finetune(r.cfg(), data, &teacher, &report)); });
  ModelPtr t(teacher);
  r.emit("teacher_report.jsonl", take(report));
  save_model(r, t.get(), "teacher.strk");
}

void cmd_trial(Run& r) {
  ModelPtr teacher = r.load_model(r.opts().teacher, "teacher");
  stark_model* student = nullptr;
  char* report = nullptr;
  const std::string init = r.path("trial_init.strk");
  r.stage("trial", [&] { check(stark_trial(r.cfg(), r.data(), teacher.get(), init.c_str(), &student, &report)); });
  ModelPtr s(student);
  r.listed("trial_init.strk");
  r.emit("trial_report.jsonl", take(report));
  save_model(r, s.get(), "trial_student.strk");
}

void cmd_score(Run& r) {
  ModelPtr teacher = r.load_model(r.opts().teacher, "teacher");
  ModelPtr student = r.load_model(r.opts().student, "student");
  stark_scores* sc = nullptr;
  r.stage("score", [&] {
    if (r.opts().unstructured) {
      check(stark_score_unstructured(r.cfg(), r.data(), teacher.get(), student.get(), &sc));
    } else {
      check(stark_score(r.cfg(), r.data(), teacher.get(), student.get(), &sc));
    }
  });
  ScoresPtr scores(sc);
  char* text = nullptr;
  check(stark_scores_to_jsonl(scores.get(), &text));
  r.emit("scores.jsonl", take(text));
  if (!r.opts().unstructured) {
    char* cfg_text = nullptr;
    check(stark_config_to_json(r.cfg(), &cfg_text));
    const json scoring = json::parse(take(cfg_text))["scoring"];
    for (const char* kind : {"head", "neuron"}) {
      char* csv = nullptr;
      check(stark_scores_density_csv(scores.get(), kind, scoring["bins"].get<size_t>(),
                                     scoring["window"].get<size_t>(), &csv));
      r.emit(std::string("density_") + kind + ".csv", take(csv));
    }
  }
}

void cmd_sparsify(Run& r) {
  const Options& o = r.opts();
  const std::vector<double> levels = o.sparsity ? std::vector<double>{*o.sparsity} : grid_of(r.cfg());
  std::uint64_t seed = 0;
  ScoresPtr scores;
  ModelPtr teacher;
  if (o.random) {
    teacher = r.load_model(o.teacher, "teacher");
    // Level i draws from root seed + i, so the masks are reproducible from the config alone.
    char* cfg_text = nullptr;
    check(stark_config_to_json(r.cfg(), &cfg_text));
    seed = json::parse(take(cfg_text))["seed"].get<std::uint64_t>();
  } else {
    if (o.scores.empty()) throw Failure{STARK_ERR_CONFIG, "--scores is required (or --random with --teacher)"};
    char* cfg_text = nullptr;
    check(stark_config_to_json(r.cfg(), &cfg_text));
    const double lambda = json::parse(take(cfg_text))["distill"]["lambda"].get<double>();
    stark_scores* sc = nullptr;
    check(stark_scores_from_jsonl(read_file(o.scores).c_str(), lambda, &sc));
    scores.reset(sc);
  }
  r.stage("sparsify", [&] {
    for (std::size_t i = 0; i < levels.size(); ++i) {
      stark_mask* m = nullptr;
      if (o.random) {
        check(stark_mask_random(teacher.get(), levels[i], seed + i, &m));
      } else {
        check(stark_mask_rank(scores.get(), levels[i], &m));
      }
      MaskPtr mask(m);
      char* text = nullptr;
      check(stark_mask_to_json(mask.get(), &text));
      r.emit("mask_" + tag(levels[i]) + ".json", take(text) + "\n");
    }
  });
}

void cmd_distill(Run& r) {
  const Options& o = r.opts();
  if (o.init.empty()) throw Failure{STARK_ERR_CONFIG, "--init is required"};
  ModelPtr teacher = r.load_model(o.teacher, "teacher");
  MaskPtr mask;
  if (!o.mask.empty()) {
    stark_mask* m = nullptr;
    check(stark_mask_from_json(read_file(o.mask).c_str(), &m));
    mask.reset(m);
  }
  stark_model* student = nullptr;
  char* report = nullptr;
  r.stage("distill", [&] {
    check(stark_distill(r.cfg(), r.data(), teacher.get(), mask.get(), o.init.c_str(), &student, &report));
  });
  ModelPtr s(student);
  r.emit("distill_report.jsonl", take(report));
  save_model(r, s.get(), "student.strk");
}

void run_pipeline(Run& r, const std::string& mode) {
  ModelPtr teacher;
  if (r.opts().teacher.empty()) {
    stark_model* t = nullptr;
    char* report = nullptr;
    r.stage("finetune", [&] { check(stark_finetune(r.cfg(), r.data(), &t, &report)); });
    teacher.reset(t);
    r.emit("teacher_report.jsonl", take(report));
    save_model(r, teacher.get(), "teacher.strk");
  } else {
    teacher = r.load_model(r.opts().teacher, "teacher");
  }
  char* report = nullptr;
  char* run = nullptr;
  check(stark_run(r.cfg(), r.data(), teacher.get(), mode.c_str(), r.opts().out_dir.c_str(), &report, &run));
  take(report);
  const json info = json::parse(take(run));
  for (const auto& a : info["artifacts"]) r.listed(a.get<std::string>());
  r.merge_timings(info["stage_seconds"]);
}

void cmd_pilot(Run& r) {
  ModelPtr teacher = r.load_model(r.opts().teacher, "teacher");
  char* out = nullptr;
  r.stage("pilot", [&] { check(stark_pilot(r.cfg(), r.data(), teacher.get(), &out)); });
  r.emit("pilot.json", take(out));
}

void cmd_report(Run& r) {
  std::vector<std::string> docs;
  for (const auto& p : r.opts().reports) docs.push_back(read_file(p));
  std::vector<const char*> ptrs;
  for (const auto& d : docs) ptrs.push_back(d.c_str());
  char* text = nullptr;
  check(stark_report_render(ptrs.data(), ptrs.size(), &text));
  const std::string table = take(text);
  std::cout << table;
  r.emit("report.txt", table);
}

void write_error(const Options& o, const std::string& command, stark_status s, const std::string& message) {
  const json rec{{"error", stark_status_name(s)},
                 {"exit_code", exit_code_for(s)},
                 {"command", command},
                 {"message", message}};
  std::cerr << rec.dump() << "\n";
  std::error_code ec;
  if (fs::is_directory(o.out_dir, ec)) {
    std::ofstream out(fs::path(o.out_dir) / "error.json");
    out << rec.dump(2) << "\n";
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Sparse-teacher knowledge distillation on a miniature encoder"};
  app.set_version_flag("--version", stark_version());
  app.require_subcommand(1);

  Options o;
  auto common = [&](CLI::App* s) {
    s->add_option("-c,--config", o.config_path, "JSON config file (defaults are used when omitted)");
    s->add_option("--seed", o.seed, "Root seed override");
    s->add_option("--sparsity", o.sparsity, "Sparsity level in [0, 1)");
    s->add_option("--lambda", o.lambda, "Interpolation weight between expressiveness and friendliness");
    s->add_option("--tau", o.tau, "Distillation temperature");
    s->add_option("--alpha", o.alpha, "Weight of the task loss");
    s->add_option("-o,--out-dir", o.out_dir, "Directory for all outputs")->capture_default_str();
    s->add_option("--set", o.sets, "Generic config override key=value (dotted key)");
  };

  std::map<std::string, std::function<void(Run&)>> handlers;
  auto add = [&](const std::string& name, const std::string& help, std::function<void(Run&)> fn) {
    CLI::App* s = app.add_subcommand(name, help);
    common(s);
    handlers[name] = std::move(fn);
    return s;
  };

  add("finetune", "Fine-tune the teacher and export the dataset", cmd_finetune);
  add("trial", "Trial distillation from the dense teacher", cmd_trial)
      ->add_option("--teacher", o.teacher, "Teacher checkpoint");
  {
    auto* s = add("score", "Score heads and neurons of the teacher", cmd_score);
    s->add_option("--teacher", o.teacher, "Teacher checkpoint");
    s->add_option("--student", o.student, "Trial student checkpoint");
    s->add_flag("--unstructured", o.unstructured, "Score individual parameters");
  }
  {
    auto* s = add("sparsify", "Build masks from scores (or random masks)", cmd_sparsify);
    s->add_option("--scores", o.scores, "Score report (JSONL)");
    s->add_flag("--random", o.random, "Random masks instead of ranked ones");
    s->add_option("--teacher", o.teacher, "Teacher checkpoint (for --random)");
  }
  {
    auto* s = add("distill", "Actual distillation from a masked teacher", cmd_distill);
    s->add_option("--teacher", o.teacher, "Teacher checkpoint");
    s->add_option("--init", o.init, "Student init checkpoint from the trial");
    s->add_option("--mask", o.mask, "Mask JSON (dense teacher when omitted)");
  }
  {
    auto* s = add("stark", "Full pipeline with a sparsity grid", [&](Run& r) { run_pipeline(r, o.mode); });
    s->add_option("--teacher", o.teacher, "Teacher checkpoint (fine-tuned first when omitted)");
    s->add_option("--mode", o.mode, "grid or random")->check(CLI::IsMember({"grid", "random"}));
  }
  add("auto", "Full pipeline with the automatic sparsity estimate", [](Run& r) { run_pipeline(r, "auto"); })
      ->add_option("--teacher", o.teacher, "Teacher checkpoint (fine-tuned first when omitted)");
  add("pilot", "Random unstructured sparsification of the teacher", cmd_pilot)
      ->add_option("--teacher", o.teacher, "Teacher checkpoint");
  add("report", "Render a comparison table from pipeline reports", cmd_report)
      ->add_option("reports", o.reports, "PipelineReport JSON files")
      ->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::Success& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << e.what() << "\n\n" << app.help();
    return kExitConfig;
  }

  CLI::App* sub = app.get_subcommands().front();
  const std::string command = sub->get_name();
  Run run(command, o);
  try {
    run.prepare();
    handlers.at(command)(run);
    run.write_manifest();
  } catch (const Failure& f) {
    write_error(o, command, f.status, f.message);
    return exit_code_for(f.status);
  } catch (const std::exception& e) {
    write_error(o, command, STARK_ERR_INTERNAL, e.what());
    return kExitStage;
  }
  return 0;
}
