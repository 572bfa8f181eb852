#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "error.hpp"

namespace stark {

namespace {

void require_pair(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size()) fail(ErrorCode::input, "metric: prediction/gold length mismatch");
  if (a.empty()) fail(ErrorCode::input, "metric: empty input");
}

bool is_binary(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return x == 0.0 || x == 1.0; });
}

}  // namespace

double accuracy(std::span<const double> preds, std::span<const double> golds) {
  require_pair(preds, golds);
  std::size_t hit = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) hit += preds[i] == golds[i];
  return static_cast<double>(hit) / static_cast<double>(preds.size());
}

double f1_binary(std::span<const double> preds, std::span<const double> golds) {
  require_pair(preds, golds);
  if (!is_binary(preds) || !is_binary(golds)) fail(ErrorCode::input, "f1: labels must be binary");
  double tp = 0, fp = 0, fn = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] == 1.0 && golds[i] == 1.0) ++tp;
    else if (preds[i] == 1.0) ++fp;
    else if (golds[i] == 1.0) ++fn;
  }
  if (tp == 0.0) return 0.0;
  const double precision = tp / (tp + fp);
  const double recall = tp / (tp + fn);
  return 2.0 * precision * recall / (precision + recall);
}

std::vector<double> average_ranks(std::span<const double> x) {
  std::vector<std::size_t> order(x.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return x[a] < x[b]; });
  std::vector<double> ranks(x.size());
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && x[order[j + 1]] == x[order[i]]) ++j;
    const double r = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t t = i; t <= j; ++t) ranks[order[t]] = r;
    i = j + 1;
  }
  return ranks;
}

double spearman(std::span<const double> x, std::span<const double> y) {
  require_pair(x, y);
  const auto rx = average_ranks(x);
  const auto ry = average_ranks(y);
  const double n = static_cast<double>(x.size());
  const double mx = std::accumulate(rx.begin(), rx.end(), 0.0) / n;
  const double my = std::accumulate(ry.begin(), ry.end(), 0.0) / n;
  double sxy = 0, sxx = 0, syy = 0;
  for (std::size_t i = 0; i < rx.size(); ++i) {
    sxy += (rx[i] - mx) * (ry[i] - my);
    sxx += (rx[i] - mx) * (rx[i] - mx);
    syy += (ry[i] - my) * (ry[i] - my);
  }
  if (sxx == 0.0 || syy == 0.0) return 0.0;
  return sxy / std::sqrt(sxx * syy);
}

double metric(MetricKind kind, std::span<const double> preds, std::span<const double> golds) {
  switch (kind) {
    case MetricKind::accuracy: return accuracy(preds, golds);
    case MetricKind::f1: return f1_binary(preds, golds);
    case MetricKind::spearman: return spearman(preds, golds);
  }
  fail(ErrorCode::contract, "unknown metric kind");
}

double variance_confidence(std::span<const double> probs) {
  if (probs.empty()) return 0.0;
  const double mean = std::accumulate(probs.begin(), probs.end(), 0.0) / static_cast<double>(probs.size());
  double v = 0.0;
  for (double p : probs) v += (p - mean) * (p - mean);
  return v;
}

double neg_entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs) {
    if (p > 0.0) h += p * std::log(p);
  }
  return h;
}

std::vector<double> argmax_rows(const Tensor& logits) {
  const std::size_t r = logits.rows(), c = logits.cols();
  std::vector<double> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j) {
      if (logits.at(i, j) > logits.at(i, best)) best = j;
    }
    out[i] = static_cast<double>(best);
  }
  return out;
}

}  // namespace stark
