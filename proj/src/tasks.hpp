#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "encoder.hpp"

namespace stark {

enum class MetricKind { accuracy, f1, spearman };
enum class Arity { single, pair };

const char* to_string(MetricKind m);
MetricKind parse_metric_kind(const std::string& s);

struct TaskSpec {
  std::string name = "synthetic-pair";
  Arity arity = Arity::pair;
  std::size_t classes = 2;
  bool regression = false;  // metric-only; no training objective
  MetricKind metric = MetricKind::accuracy;
  std::size_t max_len = 64;

  void validate() const;
};

// Untokenized row as read from TSV or produced by the synthetic generator.
struct RawExample {
  std::string text_a;
  std::string text_b;  // empty for single-sentence tasks
  double label = 0.0;
};

struct Example {
  TokenSeq ids;  // [CLS] a [SEP] (b [SEP])
  int label = 0;
};

struct Dataset {
  TaskSpec task;
  std::vector<Example> examples;

  std::size_t size() const { return examples.size(); }
  std::vector<TokenSeq> sequences() const;
  std::vector<int> labels() const;
  std::uint64_t digest() const;
};

struct TsvSchema {
  int label_column = 0;
  int text_a_column = 1;
  int text_b_column = -1;  // -1 for single-sentence tasks
  bool header = false;
};

struct TsvLoadReport {
  std::vector<RawExample> rows;
  std::size_t skipped = 0;
  std::vector<std::string> skip_reasons;
};

// Parses a UTF-8 tab-separated file. Malformed rows are counted and skipped;
// an unreadable file or zero valid rows is an input error.
TsvLoadReport load_tsv(const std::string& path, const TsvSchema& schema);

void write_tsv(const std::string& path, const std::vector<RawExample>& rows, bool pair);

class Vocab {
 public:
  static constexpr std::uint32_t kPad = 0;
  static constexpr std::uint32_t kUnk = 1;
  static constexpr std::uint32_t kCls = 2;
  static constexpr std::uint32_t kSep = 3;
  static constexpr std::uint32_t kReserved = 4;

  Vocab();

  // Top max_vocab tokens by frequency; ties broken lexicographically.
  static Vocab build(const std::vector<RawExample>& corpus, std::size_t max_vocab);

  std::uint32_t id(const std::string& token) const;
  const std::string& token(std::uint32_t id) const { return tokens_.at(id); }
  std::size_t size() const { return tokens_.size(); }
  const std::vector<std::string>& tokens() const { return tokens_; }

 private:
  std::vector<std::string> tokens_;
  std::map<std::string, std::uint32_t> index_;
};

// Lowercase whitespace tokenization.
std::vector<std::string> tokenize(const std::string& text);

Example encode(const RawExample& row, const Vocab& vocab, const TaskSpec& task);
Dataset encode_all(const std::vector<RawExample>& rows, const Vocab& vocab, const TaskSpec& task);

struct SyntheticSpec {
  std::size_t marker_classes = 4;
  std::size_t markers_per_class = 3;
  std::size_t filler_tokens = 24;
  std::size_t sentence_len = 5;  // marker + fillers
  std::size_t train_size = 8000;
  std::size_t dev_size = 1000;
};

struct SyntheticData {
  std::vector<RawExample> train;
  std::vector<RawExample> dev;
};

// Sentence-pair agreement: each sentence hides one marker token drawn from
// one of `marker_classes` classes among filler tokens; the label says whether
// both markers share a class.
SyntheticData make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);
TaskSpec synthetic_task(const SyntheticSpec& spec);

}  // namespace stark
