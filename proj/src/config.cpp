#include "config.hpp"

#include <fstream>
#include <set>

#include "error.hpp"
#include "rng.hpp"

namespace stark {

using nlohmann::json;

namespace {

// Reads the optional members of one JSON object and rejects any it did not read.
class Section {
 public:
  Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) fail(ErrorCode::config, where() + " must be an object");
  }

  template <typename T>
  void get(const char* key, T& out) {
    seen_.insert(key);
    auto it = j_.find(key);
    if (it == j_.end()) return;
    try {
      out = it->template get<T>();
    } catch (const json::exception&) {
      fail(ErrorCode::config, where(key) + " has the wrong type");
    }
  }

  std::string get_string(const char* key, const std::string& fallback) {
    std::string s = fallback;
    get(key, s);
    return s;
  }

  const json* sub(const char* key) {
    seen_.insert(key);
    auto it = j_.find(key);
    return it == j_.end() ? nullptr : &*it;
  }

  std::string where(const std::string& key = "") const {
    std::string p = path_.empty() ? key : (key.empty() ? path_ : path_ + "." + key);
    return "'" + (p.empty() ? std::string("<root>") : p) + "'";
  }

  std::string child(const char* key) const { return path_.empty() ? key : path_ + "." + key; }

  void finish() const {
    for (auto it = j_.begin(); it != j_.end(); ++it) {
      if (!seen_.count(it.key())) fail(ErrorCode::config, "unknown key " + where(it.key()));
    }
  }

 private:
  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

OptimizerKind parse_optimizer(const std::string& s) {
  if (s == "sgd") return OptimizerKind::sgd;
  if (s == "adamw") return OptimizerKind::adamw;
  fail(ErrorCode::config, "unknown optimizer '" + s + "'");
}

StudentInitKind parse_student_init(const std::string& s) {
  if (s == "drop-layers") return StudentInitKind::drop_layers;
  if (s == "prune-params") return StudentInitKind::prune_params;
  fail(ErrorCode::config, "unknown student init '" + s + "'");
}

void read_train(const json& j, const std::string& path, TrainSettings& t) {
  Section s(j, path);
  t.optimizer = parse_optimizer(s.get_string("optimizer", to_string(t.optimizer)));
  s.get("lr", t.lr);
  s.get("weight_decay", t.weight_decay);
  s.get("batch_size", t.batch_size);
  s.get("max_epochs", t.max_epochs);
  s.get("patience", t.patience);
  s.get("dropout", t.dropout);
  s.finish();
}

json train_json(const TrainSettings& t) {
  return json{{"optimizer", to_string(t.optimizer)}, {"lr", t.lr},
              {"weight_decay", t.weight_decay},       {"batch_size", t.batch_size},
              {"max_epochs", t.max_epochs},           {"patience", t.patience},
              {"dropout", t.dropout}};
}

void read_distill(const json& j, const std::string& path, DistillConfig& d) {
  Section s(j, path);
  s.get("tau", d.tau);
  s.get("alpha", d.alpha);
  s.get("lambda", d.lambda);
  s.get("grid", d.grid);
  if (const json* t = s.sub("train")) read_train(*t, s.child("train"), d.train);
  if (const json* si = s.sub("student_init")) {
    Section ss(*si, s.child("student_init"));
    d.student_init.kind = parse_student_init(ss.get_string("kind", to_string(d.student_init.kind)));
    ss.get("keep_layers", d.student_init.keep_layers);
    ss.get("prune_sparsity", d.student_init.prune_sparsity);
    ss.finish();
  }
  s.finish();
}

}  // namespace

void Config::validate() const {
  if (version != kConfigVersion) {
    fail(ErrorCode::config, "unsupported config version " + std::to_string(version));
  }
  if (task.kind != "synthetic" && task.kind != "tsv") {
    fail(ErrorCode::config, "task.kind must be 'synthetic' or 'tsv'");
  }
  if (task.kind == "tsv") {
    if (task.train_path.empty() || task.dev_path.empty()) {
      fail(ErrorCode::config, "tsv task needs task.train and task.dev paths");
    }
    task.spec.validate();
    if (task.spec.regression) fail(ErrorCode::config, "regression tasks cannot be trained");
    if ((task.spec.arity == Arity::pair) != (task.schema.text_b_column >= 0)) {
      fail(ErrorCode::config, "pair tasks need text_b_column, single tasks must not set it");
    }
  } else if (task.synthetic.marker_classes < 2) {
    fail(ErrorCode::config, "synthetic task needs at least 2 marker classes");
  }
  if (model.d_model == 0 || model.heads == 0 || model.head_dim == 0 || model.ffn_dim == 0 ||
      model.layers == 0) {
    fail(ErrorCode::config, "model dimensions must be positive");
  }
  teacher.validate();
  distill.validate();
  if (distill.student_init.kind == StudentInitKind::drop_layers &&
      distill.student_init.keep_layers > model.layers) {
    fail(ErrorCode::config, "student cannot keep more layers than the teacher has");
  }
  if (scoring.batch_size == 0) fail(ErrorCode::config, "scoring.batch_size must be positive");
  if (scoring.bins < 2) fail(ErrorCode::config, "scoring.bins must be at least 2");
  if (scoring.window == 0 || scoring.window % 2 == 0) fail(ErrorCode::config, "scoring.window must be odd");
  if (scoring.auto_kind == UnitKind::parameter) fail(ErrorCode::config, "scoring.auto_kind must be head or neuron");
  if (scoring.split != "train" && scoring.split != "dev") fail(ErrorCode::config, "scoring.split must be train or dev");
  if (pilot.trials == 0) fail(ErrorCode::config, "pilot.trials must be positive");
  for (double s : pilot.sparsities) {
    if (!(s >= 0.0 && s < 1.0)) fail(ErrorCode::config, "pilot sparsities must lie in [0, 1)");
  }
}

Config default_config() {
  Config c;
  c.teacher.lr = 3e-4;
  c.teacher.max_epochs = 20;
  c.teacher.patience = 6;
  return c;
}

Config config_from_json(const json& j) {
  Config c = default_config();
  Section root(j, "");
  root.get("version", c.version);
  if (c.version != kConfigVersion) {
    fail(ErrorCode::config, "unsupported config version " + std::to_string(c.version));
  }
  root.get("seed", c.seed);
  if (const json* t = root.sub("task")) {
    Section s(*t, "task");
    s.get("kind", c.task.kind);
    if (const json* syn = s.sub("synthetic")) {
      Section ss(*syn, "task.synthetic");
      ss.get("marker_classes", c.task.synthetic.marker_classes);
      ss.get("markers_per_class", c.task.synthetic.markers_per_class);
      ss.get("filler_tokens", c.task.synthetic.filler_tokens);
      ss.get("sentence_len", c.task.synthetic.sentence_len);
      ss.get("train_size", c.task.synthetic.train_size);
      ss.get("dev_size", c.task.synthetic.dev_size);
      ss.finish();
    }
    s.get("train", c.task.train_path);
    s.get("dev", c.task.dev_path);
    s.get("label_column", c.task.schema.label_column);
    s.get("text_a_column", c.task.schema.text_a_column);
    s.get("text_b_column", c.task.schema.text_b_column);
    s.get("header", c.task.schema.header);
    s.get("name", c.task.spec.name);
    const std::string arity = s.get_string("arity", c.task.spec.arity == Arity::pair ? "pair" : "single");
    if (arity != "pair" && arity != "single") fail(ErrorCode::config, "task.arity must be pair or single");
    c.task.spec.arity = arity == "pair" ? Arity::pair : Arity::single;
    s.get("classes", c.task.spec.classes);
    s.get("regression", c.task.spec.regression);
    c.task.spec.metric = parse_metric_kind(s.get_string("metric", to_string(c.task.spec.metric)));
    s.get("max_len", c.task.spec.max_len);
    s.get("max_vocab", c.task.max_vocab);
    s.finish();
  }
  if (const json* m = root.sub("model")) {
    Section s(*m, "model");
    s.get("d_model", c.model.d_model);
    s.get("heads", c.model.heads);
    s.get("head_dim", c.model.head_dim);
    s.get("ffn_dim", c.model.ffn_dim);
    s.get("layers", c.model.layers);
    s.finish();
  }
  if (const json* t = root.sub("teacher")) read_train(*t, "teacher", c.teacher);
  if (const json* d = root.sub("distill")) read_distill(*d, "distill", c.distill);
  if (const json* sc = root.sub("scoring")) {
    Section s(*sc, "scoring");
    s.get("batch_size", c.scoring.batch_size);
    c.scoring.grouping = parse_norm_grouping(s.get_string("grouping", to_string(c.scoring.grouping)));
    s.get("bins", c.scoring.bins);
    s.get("window", c.scoring.window);
    c.scoring.auto_kind = parse_unit_kind(s.get_string("auto_kind", to_string(c.scoring.auto_kind)));
    s.get("split", c.scoring.split);
    s.finish();
  }
  if (const json* p = root.sub("pilot")) {
    Section s(*p, "pilot");
    s.get("sparsities", c.pilot.sparsities);
    s.get("trials", c.pilot.trials);
    s.finish();
  }
  root.finish();
  try {
    c.validate();
  } catch (const Error& e) {
    if (e.code() == ErrorCode::config) throw;
    fail(ErrorCode::config, e.what());
  }
  return c;
}

json to_json(const DistillConfig& d) {
  return json{{"tau", d.tau},
              {"alpha", d.alpha},
              {"lambda", d.lambda},
              {"grid", d.grid},
              {"train", train_json(d.train)},
              {"student_init",
               {{"kind", to_string(d.student_init.kind)},
                {"keep_layers", d.student_init.keep_layers},
                {"prune_sparsity", d.student_init.prune_sparsity}}}};
}

json to_json(const Config& c) {
  const auto& syn = c.task.synthetic;
  json task{{"kind", c.task.kind},
            {"synthetic",
             {{"marker_classes", syn.marker_classes},
              {"markers_per_class", syn.markers_per_class},
              {"filler_tokens", syn.filler_tokens},
              {"sentence_len", syn.sentence_len},
              {"train_size", syn.train_size},
              {"dev_size", syn.dev_size}}},
            {"train", c.task.train_path},
            {"dev", c.task.dev_path},
            {"label_column", c.task.schema.label_column},
            {"text_a_column", c.task.schema.text_a_column},
            {"text_b_column", c.task.schema.text_b_column},
            {"header", c.task.schema.header},
            {"name", c.task.spec.name},
            {"arity", c.task.spec.arity == Arity::pair ? "pair" : "single"},
            {"classes", c.task.spec.classes},
            {"regression", c.task.spec.regression},
            {"metric", to_string(c.task.spec.metric)},
            {"max_len", c.task.spec.max_len},
            {"max_vocab", c.task.max_vocab}};
  return json{{"version", c.version},
              {"seed", c.seed},
              {"task", task},
              {"model",
               {{"d_model", c.model.d_model},
                {"heads", c.model.heads},
                {"head_dim", c.model.head_dim},
                {"ffn_dim", c.model.ffn_dim},
                {"layers", c.model.layers}}},
              {"teacher", train_json(c.teacher)},
              {"distill", to_json(c.distill)},
              {"scoring",
               {{"batch_size", c.scoring.batch_size},
                {"grouping", to_string(c.scoring.grouping)},
                {"bins", c.scoring.bins},
                {"window", c.scoring.window},
                {"auto_kind", to_string(c.scoring.auto_kind)},
                {"split", c.scoring.split}}},
              {"pilot", {{"sparsities", c.pilot.sparsities}, {"trials", c.pilot.trials}}}};
}

Config load_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) fail(ErrorCode::input, "cannot read config '" + path + "'");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::config, "config '" + path + "' is not valid JSON: " + e.what());
  }
  return config_from_json(j);
}

void set_override(json& doc, const std::string& key, const std::string& value) {
  if (key.empty()) fail(ErrorCode::config, "empty override key");
  if (!doc.is_object()) doc = json::object();
  json* node = &doc;
  std::size_t start = 0;
  while (true) {
    const std::size_t dot = key.find('.', start);
    const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
    if (part.empty()) fail(ErrorCode::config, "malformed override key '" + key + "'");
    if (dot == std::string::npos) {
      json v = json::parse(value, nullptr, false);
      (*node)[part] = v.is_discarded() ? json(value) : v;
      return;
    }
    json& next = (*node)[part];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) fail(ErrorCode::config, "override '" + key + "' descends into a non-object");
    node = &next;
    start = dot + 1;
  }
}

std::uint64_t distill_digest(const DistillConfig& c) {
  json j = to_json(c);
  j["seed"] = c.seed;
  return fnv1a(j.dump());
}

std::uint64_t config_digest(const Config& c) { return fnv1a(to_json(c).dump()); }

}  // namespace stark
