#pragma once

#include <span>
#include <vector>

#include "tasks.hpp"

namespace stark {

double accuracy(std::span<const double> preds, std::span<const double> golds);
// Binary F1 on the positive class (label 1).
double f1_binary(std::span<const double> preds, std::span<const double> golds);
// Pearson correlation of average ranks (ties share the mean rank).
double spearman(std::span<const double> x, std::span<const double> y);
std::vector<double> average_ranks(std::span<const double> x);

double metric(MetricKind kind, std::span<const double> preds, std::span<const double> golds);

// Sum-form distribution variance sum_i (y_i - mean)^2.
double variance_confidence(std::span<const double> probs);
// sum_i y_i log y_i, with 0 log 0 = 0.
double neg_entropy(std::span<const double> probs);

// Row-wise argmax of a logits matrix.
std::vector<double> argmax_rows(const Tensor& logits);

}  // namespace stark
