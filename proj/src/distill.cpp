#include "distill.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <numeric>

#include "error.hpp"
#include "metrics.hpp"
#include "rng.hpp"

namespace stark {

const char* to_string(OptimizerKind k) {
  return k == OptimizerKind::sgd ? "sgd" : "adamw";
}

const char* to_string(StudentInitKind k) {
  return k == StudentInitKind::drop_layers ? "drop-layers" : "prune-params";
}

void TrainSettings::validate() const {
  if (!(lr > 0.0)) fail(ErrorCode::config, "learning rate must be positive");
  if (weight_decay < 0.0) fail(ErrorCode::config, "weight decay must be nonnegative");
  if (batch_size == 0) fail(ErrorCode::config, "batch size must be positive");
  if (patience == 0) fail(ErrorCode::config, "patience must be positive");
  if (dropout < 0.0 || dropout >= 1.0) fail(ErrorCode::config, "dropout must lie in [0, 1)");
}

void DistillConfig::validate() const {
  if (!(tau > 0.0) || !std::isfinite(tau)) fail(ErrorCode::config, "tau must be positive");
  if (!(alpha >= 0.0) || !std::isfinite(alpha)) fail(ErrorCode::config, "alpha must be nonnegative");
  if (!(lambda >= 0.0 && lambda <= 1.0)) fail(ErrorCode::config, "lambda must lie in [0, 1]");
  train.validate();
  if (grid.empty()) fail(ErrorCode::config, "sparsity grid must not be empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] > 0.0 && grid[i] < 1.0)) fail(ErrorCode::config, "grid values must lie in (0, 1)");
    if (i && !(grid[i] > grid[i - 1])) fail(ErrorCode::config, "grid must be strictly increasing");
  }
  if (student_init.kind == StudentInitKind::drop_layers && student_init.keep_layers == 0) {
    fail(ErrorCode::config, "drop-layers student must keep at least one layer");
  }
  if (student_init.kind == StudentInitKind::prune_params &&
      !(student_init.prune_sparsity > 0.0 && student_init.prune_sparsity < 1.0)) {
    fail(ErrorCode::config, "prune-params sparsity must lie in (0, 1)");
  }
}

// ---- losses -------------------------------------------------------------------

namespace {

std::vector<double> softmax_vec(std::span<const double> z, double tau) {
  if (!(tau > 0.0)) fail(ErrorCode::parameter, "temperature must be positive");
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : z) mx = std::max(mx, v / tau);
  std::vector<double> p(z.size());
  double s = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) s += p[i] = std::exp(z[i] / tau - mx);
  for (double& v : p) v /= s;
  return p;
}

}  // namespace

double kd_loss(std::span<const double> zt, std::span<const double> zs, double tau) {
  if (zt.size() != zs.size()) fail(ErrorCode::contract, "kd_loss: class counts differ");
  const auto pt = softmax_vec(zt, tau);
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : zs) mx = std::max(mx, v / tau);
  double z = 0.0;
  for (double v : zs) z += std::exp(v / tau - mx);
  const double lse = mx + std::log(z);
  double loss = 0.0;
  for (std::size_t i = 0; i < zs.size(); ++i) loss -= pt[i] * (zs[i] / tau - lse);
  return loss;
}

double task_loss(std::span<const double> y, std::span<const double> ys) {
  if (y.size() != ys.size()) fail(ErrorCode::contract, "task_loss: shapes differ");
  double loss = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    if (y[i] != 0.0) loss -= y[i] * std::log(ys[i]);
  }
  return loss;
}

double total_loss(double kd, double tk, double alpha) {
  if (alpha < 0.0) fail(ErrorCode::parameter, "alpha must be nonnegative");
  return kd + alpha * tk;
}

Var kd_loss(Var teacher_logits, Var student_logits, double tau) {
  if (teacher_logits.shape() != student_logits.shape()) {
    fail(ErrorCode::contract, "kd_loss: teacher and student class counts differ");
  }
  const double rows = static_cast<double>(student_logits.value().rows());
  Var pt = softmax_t(teacher_logits, tau);
  Var ls = log_softmax_t(student_logits, tau);
  return scale(sum(mul(pt, ls)), -1.0 / rows);
}

Var task_loss(Var logits, std::span<const int> labels) {
  const Tensor& z = logits.value();
  const std::size_t r = z.rows(), c = z.cols();
  if (labels.size() != r) fail(ErrorCode::contract, "task_loss: label count does not match rows");
  Tensor onehot({r, c});
  for (std::size_t i = 0; i < r; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      fail(ErrorCode::input, "task_loss: label outside class range");
    }
    onehot.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  Graph& g = logits.graph();
  Var ls = log_softmax_t(logits, 1.0);
  return scale(sum(mul(g.constant(std::move(onehot)), ls)), -1.0 / static_cast<double>(r));
}

Var total_loss(Var kd, Var tk, double alpha) {
  if (alpha < 0.0) fail(ErrorCode::parameter, "alpha must be nonnegative");
  return add(kd, scale(tk, alpha));
}

// ---- optimizer ----------------------------------------------------------------

Optimizer::Optimizer(const TrainSettings& settings, const ModelParams& shape_of) : settings_(settings) {
  if (settings_.optimizer == OptimizerKind::adamw) {
    shape_of.for_each_tensor([&](const std::string&, const Tensor& t) {
      m_.emplace_back(t.shape());
      v_.emplace_back(t.shape());
    });
  }
}

void Optimizer::step(ModelParams& params, std::span<const Tensor> grads) {
  ++t_;
  const double lr = settings_.lr;
  const double wd = settings_.weight_decay;
  std::size_t idx = 0;
  if (settings_.optimizer == OptimizerKind::sgd) {
    params.for_each_tensor([&](const std::string&, Tensor& p) {
      const Tensor& g = grads[idx++];
      for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr * (g[i] + wd * p[i]);
    });
    return;
  }
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  params.for_each_tensor([&](const std::string&, Tensor& p) {
    const Tensor& g = grads[idx];
    Tensor& m = m_[idx];
    Tensor& v = v_[idx];
    ++idx;
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= lr * (mhat / (std::sqrt(vhat) + eps) + wd * p[i]);
    }
  });
}

// ---- training loop ----------------------------------------------------------------

bool TrainReport::same_trajectory(const TrainReport& o) const {
  if (epochs.size() != o.epochs.size() || best_epoch != o.best_epoch ||
      best_dev_metric != o.best_dev_metric) {
    return false;
  }
  for (std::size_t i = 0; i < epochs.size(); ++i) {
    const auto& a = epochs[i];
    const auto& b = o.epochs[i];
    if (a.epoch != b.epoch || a.kd != b.kd || a.tk != b.tk || a.total != b.total ||
        a.dev_metric != b.dev_metric) {
      return false;
    }
  }
  return true;
}

double evaluate(const ModelParams& params, const GateSet& gates, const Dataset& data) {
  if (data.examples.empty()) fail(ErrorCode::input, "evaluation on empty data");
  const auto seqs = data.sequences();
  const Tensor logits = predict_logits(params, gates, seqs);
  const auto preds = argmax_rows(logits);
  std::vector<double> golds;
  golds.reserve(data.size());
  for (const auto& e : data.examples) golds.push_back(static_cast<double>(e.label));
  return metric(data.task.metric, preds, golds);
}

TrainResult train_loop(const ModelParams& init, const Dataset& train, const Dataset& dev,
                       const TrainSettings& settings, std::uint64_t seed, const BatchLoss& loss) {
  settings.validate();
  if (train.examples.empty() || dev.examples.empty()) fail(ErrorCode::input, "training needs nonempty train and dev data");
  if (train.task.regression) fail(ErrorCode::input, "regression tasks have no training objective");
  const auto start = std::chrono::steady_clock::now();

  TrainResult result;
  ModelParams params = init;
  ModelParams best = init;
  const GateSet ones = GateSet::ones(init);
  Optimizer opt(settings, init);
  Rng dropout_rng(derive_seed(seed, "dropout"));
  const std::uint64_t shuffle_root = derive_seed(seed, "shuffle");

  double best_metric = -std::numeric_limits<double>::infinity();
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());

  for (std::size_t epoch = 1; epoch <= settings.max_epochs; ++epoch) {
    std::iota(order.begin(), order.end(), 0);
    Rng shuffler(derive_seed(shuffle_root, "epoch." + std::to_string(epoch)));
    shuffler.shuffle(std::span<std::size_t>(order));

    double kd_sum = 0.0, tk_sum = 0.0, total_sum = 0.0;
    std::size_t batches = 0;
    for (std::size_t b0 = 0; b0 < order.size(); b0 += settings.batch_size) {
      const std::size_t n = std::min(settings.batch_size, order.size() - b0);
      std::span<const std::size_t> rows(order.data() + b0, n);
      std::vector<const TokenSeq*> seqs;
      seqs.reserve(n);
      for (std::size_t r : rows) seqs.push_back(&train.examples[r].ids);

      Graph g;
      BoundModel bound = bind(g, params, ones, BindOptions{.params_grad = true});
      Batch batch = make_batch(std::span<const TokenSeq* const>(seqs), params);
      ForwardOptions fo{settings.dropout, settings.dropout > 0.0 ? &dropout_rng : nullptr};
      Var logits = encoder_forward(bound, batch, fo);
      LossParts parts = loss(g, logits, rows);
      g.backward(parts.total);

      std::vector<Tensor> grads;
      grads.reserve(bound.param_leaves.size());
      for (Var v : bound.param_leaves) grads.push_back(g.grad(v));
      opt.step(params, grads);

      kd_sum += parts.kd;
      tk_sum += parts.tk;
      total_sum += parts.total.value().item();
      ++batches;
    }

    EpochRecord rec;
    rec.epoch = epoch;
    rec.kd = kd_sum / static_cast<double>(batches);
    rec.tk = tk_sum / static_cast<double>(batches);
    rec.total = total_sum / static_cast<double>(batches);
    rec.dev_metric = evaluate(params, ones, dev);
    result.report.epochs.push_back(rec);

    if (rec.dev_metric > best_metric) {
      best_metric = rec.dev_metric;
      best = params;
      result.report.best_epoch = epoch;
      since_best = 0;
    } else if (++since_best >= settings.patience) {
      break;
    }
  }

  if (result.report.epochs.empty()) best_metric = evaluate(init, ones, dev);
  result.report.best_dev_metric = best_metric;
  result.params = std::move(best);
  result.report.wall_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return result;
}

TrainResult finetune_teacher(const ModelParams& init, const Dataset& train, const Dataset& dev,
                             const TrainSettings& settings, std::uint64_t seed) {
  if (train.examples.empty()) fail(ErrorCode::input, "finetune: empty training data");
  const auto labels = train.labels();
  return train_loop(init, train, dev, settings, seed,
                    [&](Graph&, Var logits, std::span<const std::size_t> rows) {
                      std::vector<int> y;
                      y.reserve(rows.size());
                      for (std::size_t r : rows) y.push_back(labels[r]);
                      Var tk = task_loss(logits, y);
                      return LossParts{tk, 0.0, tk.value().item()};
                    });
}

TrainResult distill(const ModelParams& teacher, const GateSet& teacher_gates,
                    const ModelParams& student_init, const Dataset& train, const Dataset& dev,
                    const DistillConfig& cfg) {
  cfg.validate();
  if (teacher.classes() != student_init.classes()) {
    fail(ErrorCode::contract, "teacher and student class counts differ");
  }
  if (!teacher_gates.matches(teacher)) fail(ErrorCode::contract, "teacher gates do not match the teacher");
  if (!teacher_gates.binary()) fail(ErrorCode::contract, "teacher gates must be binary during distillation");
  if (train.examples.empty()) fail(ErrorCode::input, "distill: empty training data");

  // The teacher is frozen, so its logits are computed once.
  const auto seqs = train.sequences();
  const Tensor teacher_logits = predict_logits(teacher, teacher_gates, seqs);
  const auto labels = train.labels();
  const std::size_t k = teacher.classes();

  return train_loop(student_init, train, dev, cfg.train, cfg.seed,
                    [&](Graph& g, Var logits, std::span<const std::size_t> rows) {
                      Tensor zt({rows.size(), k});
                      std::vector<int> y;
                      y.reserve(rows.size());
                      for (std::size_t i = 0; i < rows.size(); ++i) {
                        for (std::size_t j = 0; j < k; ++j) zt.at(i, j) = teacher_logits.at(rows[i], j);
                        y.push_back(labels[rows[i]]);
                      }
                      Var kd = kd_loss(g.constant(std::move(zt)), logits, cfg.tau);
                      Var tk = task_loss(logits, y);
                      Var total = total_loss(kd, tk, cfg.alpha);
                      return LossParts{total, kd.value().item(), tk.value().item()};
                    });
}

}  // namespace stark
