#include "tasks.hpp"

#include <algorithm>
#include <cctype>
#include <charconv>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "error.hpp"
#include "rng.hpp"

namespace stark {

const char* to_string(MetricKind m) {
  switch (m) {
    case MetricKind::accuracy: return "accuracy";
    case MetricKind::f1: return "f1";
    case MetricKind::spearman: return "spearman";
  }
  return "?";
}

MetricKind parse_metric_kind(const std::string& s) {
  if (s == "accuracy") return MetricKind::accuracy;
  if (s == "f1") return MetricKind::f1;
  if (s == "spearman") return MetricKind::spearman;
  fail(ErrorCode::config, "unknown metric '" + s + "'");
}

void TaskSpec::validate() const {
  if (max_len < 3) fail(ErrorCode::config, "task max_len must be at least 3");
  if (regression != (metric == MetricKind::spearman)) {
    fail(ErrorCode::config, "spearman metric goes with regression tasks only");
  }
  if (!regression && classes < 2) fail(ErrorCode::config, "classification needs at least 2 classes");
  if (metric == MetricKind::f1 && classes != 2) fail(ErrorCode::config, "f1 requires a binary task");
}

std::vector<TokenSeq> Dataset::sequences() const {
  std::vector<TokenSeq> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.ids);
  return out;
}

std::vector<int> Dataset::labels() const {
  std::vector<int> out;
  out.reserve(examples.size());
  for (const auto& e : examples) out.push_back(e.label);
  return out;
}

std::uint64_t Dataset::digest() const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto& e : examples) {
    h = fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(e.ids.data()),
                                             e.ids.size() * sizeof(std::uint32_t)),
              h);
    const std::int64_t label = e.label;
    h = fnv1a(std::span<const unsigned char>(reinterpret_cast<const unsigned char*>(&label), sizeof label), h);
  }
  return h;
}

// ---- TSV ----------------------------------------------------------------------

namespace {

std::vector<std::string> split_tabs(const std::string& line) {
  std::vector<std::string> cols;
  std::size_t start = 0;
  while (true) {
    const std::size_t tab = line.find('\t', start);
    cols.push_back(line.substr(start, tab == std::string::npos ? std::string::npos : tab - start));
    if (tab == std::string::npos) break;
    start = tab + 1;
  }
  return cols;
}

bool parse_label(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* begin = s.data();
  const char* end = s.data() + s.size();
  auto [ptr, ec] = std::from_chars(begin, end, out);
  return ec == std::errc() && ptr == end && std::isfinite(out);
}

bool blank(const std::string& s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

}  // namespace

TsvLoadReport load_tsv(const std::string& path, const TsvSchema& schema) {
  if (schema.label_column < 0 || schema.text_a_column < 0) {
    fail(ErrorCode::config, "TSV schema needs a label and a text column");
  }
  std::ifstream in(path);
  if (!in) fail(ErrorCode::input, "cannot read TSV file '" + path + "'");
  TsvLoadReport report;
  std::string line;
  std::size_t lineno = 0;
  const int needed = std::max({schema.label_column, schema.text_a_column, schema.text_b_column});
  while (std::getline(in, line)) {
    ++lineno;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (lineno == 1 && schema.header) continue;
    if (line.empty()) continue;
    const auto cols = split_tabs(line);
    auto skip = [&](const std::string& why) {
      ++report.skipped;
      report.skip_reasons.push_back("line " + std::to_string(lineno) + ": " + why);
    };
    if (static_cast<int>(cols.size()) <= needed) {
      skip("expected at least " + std::to_string(needed + 1) + " columns");
      continue;
    }
    RawExample row;
    if (!parse_label(cols[schema.label_column], row.label)) {
      skip("missing or malformed label");
      continue;
    }
    row.text_a = cols[schema.text_a_column];
    if (schema.text_b_column >= 0) row.text_b = cols[schema.text_b_column];
    if (blank(row.text_a) || (schema.text_b_column >= 0 && blank(row.text_b))) {
      skip("empty text");
      continue;
    }
    report.rows.push_back(std::move(row));
  }
  if (report.rows.empty()) fail(ErrorCode::input, "no valid rows in '" + path + "'");
  return report;
}

void write_tsv(const std::string& path, const std::vector<RawExample>& rows, bool pair) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail(ErrorCode::io, "cannot write '" + path + "'");
  out << (pair ? "label\ttext_a\ttext_b\n" : "label\ttext_a\n");
  for (const auto& r : rows) {
    std::ostringstream label;
    label << r.label;
    out << label.str() << '\t' << r.text_a;
    if (pair) out << '\t' << r.text_b;
    out << '\n';
  }
  if (!out) fail(ErrorCode::io, "failed writing '" + path + "'");
}

// ---- vocabulary / encoding ------------------------------------------------------

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      if (!cur.empty()) out.push_back(std::move(cur));
      cur.clear();
    } else {
      cur.push_back(static_cast<char>(std::tolower(c)));
    }
  }
  if (!cur.empty()) out.push_back(std::move(cur));
  return out;
}

Vocab::Vocab() : tokens_{"[PAD]", "[UNK]", "[CLS]", "[SEP]"} {
  for (std::uint32_t i = 0; i < tokens_.size(); ++i) index_[tokens_[i]] = i;
}

Vocab Vocab::build(const std::vector<RawExample>& corpus, std::size_t max_vocab) {
  std::unordered_map<std::string, std::size_t> counts;
  for (const auto& row : corpus) {
    for (const auto& t : tokenize(row.text_a)) ++counts[t];
    for (const auto& t : tokenize(row.text_b)) ++counts[t];
  }
  std::vector<std::pair<std::string, std::size_t>> ranked(counts.begin(), counts.end());
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    return a.second != b.second ? a.second > b.second : a.first < b.first;
  });
  Vocab v;
  for (const auto& [tok, n] : ranked) {
    if (v.tokens_.size() - kReserved >= max_vocab) break;
    if (v.index_.count(tok)) continue;
    v.index_[tok] = static_cast<std::uint32_t>(v.tokens_.size());
    v.tokens_.push_back(tok);
  }
  return v;
}

std::uint32_t Vocab::id(const std::string& token) const {
  auto it = index_.find(token);
  return it == index_.end() ? kUnk : it->second;
}

Example encode(const RawExample& row, const Vocab& vocab, const TaskSpec& task) {
  Example e;
  e.ids.push_back(Vocab::kCls);
  for (const auto& t : tokenize(row.text_a)) e.ids.push_back(vocab.id(t));
  e.ids.push_back(Vocab::kSep);
  if (task.arity == Arity::pair) {
    for (const auto& t : tokenize(row.text_b)) e.ids.push_back(vocab.id(t));
    e.ids.push_back(Vocab::kSep);
  }
  if (e.ids.size() > task.max_len) e.ids.resize(task.max_len);
  e.label = static_cast<int>(std::lround(row.label));
  if (!task.regression && (e.label < 0 || static_cast<std::size_t>(e.label) >= task.classes)) {
    fail(ErrorCode::input, "label " + std::to_string(e.label) + " outside [0, " +
                               std::to_string(task.classes) + ")");
  }
  return e;
}

Dataset encode_all(const std::vector<RawExample>& rows, const Vocab& vocab, const TaskSpec& task) {
  Dataset d;
  d.task = task;
  d.examples.reserve(rows.size());
  for (const auto& r : rows) d.examples.push_back(encode(r, vocab, task));
  return d;
}

// ---- synthetic task ---------------------------------------------------------------

TaskSpec synthetic_task(const SyntheticSpec& spec) {
  TaskSpec t;
  t.name = "synthetic-pair";
  t.arity = Arity::pair;
  t.classes = 2;
  t.metric = MetricKind::accuracy;
  t.max_len = std::max<std::size_t>(64, 2 * spec.sentence_len + 3);
  return t;
}

namespace {

std::string make_sentence(std::size_t marker_class, const SyntheticSpec& spec, Rng& rng) {
  const std::size_t variant = rng.below(spec.markers_per_class);
  const std::size_t pos = rng.below(spec.sentence_len);
  std::string s;
  for (std::size_t i = 0; i < spec.sentence_len; ++i) {
    if (i) s += ' ';
    if (i == pos) {
      s += "m" + std::to_string(marker_class) + "_" + std::to_string(variant);
    } else {
      s += "w" + std::to_string(rng.below(spec.filler_tokens));
    }
  }
  return s;
}

std::vector<RawExample> generate(const SyntheticSpec& spec, std::size_t n, Rng& rng) {
  std::vector<RawExample> rows;
  rows.reserve(n);
  // Exactly floor(n / 2) positives, in shuffled order.
  std::vector<char> labels(n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n / 2), 1);
  rng.shuffle(std::span<char>(labels));
  for (std::size_t i = 0; i < n; ++i) {
    const bool same = labels[i] != 0;
    const std::size_t ca = rng.below(spec.marker_classes);
    std::size_t cb = ca;
    if (!same) {
      cb = rng.below(spec.marker_classes - 1);
      if (cb >= ca) ++cb;
    }
    RawExample r;
    r.text_a = make_sentence(ca, spec, rng);
    r.text_b = make_sentence(cb, spec, rng);
    r.label = same ? 1.0 : 0.0;
    rows.push_back(std::move(r));
  }
  return rows;
}

}  // namespace

SyntheticData make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.marker_classes < 2 || spec.markers_per_class == 0 || spec.sentence_len == 0 ||
      spec.filler_tokens == 0) {
    fail(ErrorCode::config, "synthetic task needs >= 2 marker classes and nonempty sentences");
  }
  Rng train_rng(derive_seed(seed, "synthetic.train"));
  Rng dev_rng(derive_seed(seed, "synthetic.dev"));
  SyntheticData d;
  d.train = generate(spec, spec.train_size, train_rng);
  d.dev = generate(spec, spec.dev_size, dev_rng);
  return d;
}

}  // namespace stark
