#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "encoder.hpp"
#include "tasks.hpp"

namespace stark {

enum class OptimizerKind { sgd, adamw };
enum class StudentInitKind { drop_layers, prune_params };

const char* to_string(OptimizerKind k);
const char* to_string(StudentInitKind k);

struct TrainSettings {
  OptimizerKind optimizer = OptimizerKind::adamw;
  double lr = 1e-3;
  double weight_decay = 0.0;  // decoupled
  std::size_t batch_size = 32;
  std::size_t max_epochs = 10;
  std::size_t patience = 3;
  double dropout = 0.0;

  void validate() const;
};

struct StudentInit {
  StudentInitKind kind = StudentInitKind::drop_layers;
  std::size_t keep_layers = 2;
  double prune_sparsity = 0.7;
};

struct DistillConfig {
  double tau = 2.0;
  double alpha = 1.0;
  double lambda = 0.5;
  TrainSettings train;
  std::uint64_t seed = 42;
  std::vector<double> grid{0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9};
  StudentInit student_init;

  void validate() const;
};

// ---- losses -------------------------------------------------------------------

// -softmax(zt / tau) . log softmax(zs / tau); no tau^2 factor.
double kd_loss(std::span<const double> zt, std::span<const double> zs, double tau);
// -y . log ys
double task_loss(std::span<const double> y, std::span<const double> ys);
double total_loss(double kd, double tk, double alpha);

// Batched graph versions, averaged over rows. Gradients reach every
// differentiable operand, the teacher branch included.
Var kd_loss(Var teacher_logits, Var student_logits, double tau);
Var task_loss(Var logits, std::span<const int> labels);
Var total_loss(Var kd, Var tk, double alpha);

// ---- training -------------------------------------------------------------------

struct EpochRecord {
  std::size_t epoch = 0;
  double kd = 0.0;
  double tk = 0.0;
  double total = 0.0;
  double dev_metric = 0.0;
};

struct TrainReport {
  std::vector<EpochRecord> epochs;
  double best_dev_metric = 0.0;
  std::size_t best_epoch = 0;  // 0 = the initialization itself
  double wall_seconds = 0.0;

  bool same_trajectory(const TrainReport& other) const;
};

struct TrainResult {
  ModelParams params;
  TrainReport report;
};

class Optimizer {
 public:
  Optimizer(const TrainSettings& settings, const ModelParams& shape_of);
  // grads in ModelParams::for_each_tensor order
  void step(ModelParams& params, std::span<const Tensor> grads);

 private:
  TrainSettings settings_;
  std::vector<Tensor> m_, v_;
  std::size_t t_ = 0;
};

double evaluate(const ModelParams& params, const GateSet& gates, const Dataset& data);

struct LossParts {
  Var total;
  double kd = 0.0;
  double tk = 0.0;
};

// Builds the loss for one minibatch given the student's logits.
using BatchLoss = std::function<LossParts(Graph&, Var student_logits, std::span<const std::size_t> rows)>;

// Minibatch training with per-epoch dev evaluation and early stopping; returns
// the best-dev parameters. Shuffling derives from `seed` only.
TrainResult train_loop(const ModelParams& init, const Dataset& train, const Dataset& dev,
                       const TrainSettings& settings, std::uint64_t seed, const BatchLoss& loss);

// Task-loss-only training of the teacher.
TrainResult finetune_teacher(const ModelParams& init, const Dataset& train, const Dataset& dev,
                             const TrainSettings& settings, std::uint64_t seed);

// L = L_KD + alpha L_TK against a frozen (possibly gated) teacher.
TrainResult distill(const ModelParams& teacher, const GateSet& teacher_gates,
                    const ModelParams& student_init, const Dataset& train, const Dataset& dev,
                    const DistillConfig& cfg);

}  // namespace stark
