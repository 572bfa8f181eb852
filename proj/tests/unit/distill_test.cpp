#include <gtest/gtest.h>

#include <cmath>

#include "distill.hpp"
#include "grad_check.hpp"
#include "helpers.hpp"

using namespace stark;
using namespace stark::test;

namespace {

// Independent scalar evaluation of -sum_i p_i log q_i with p, q the softened distributions.
double kd_oracle(const std::vector<double>& zt, const std::vector<double>& zs, double tau) {
  auto soft = [&](const std::vector<double>& z) {
    std::vector<double> p(z.size());
    double s = 0.0;
    for (std::size_t i = 0; i < z.size(); ++i) s += (p[i] = std::exp(z[i] / tau));
    for (double& v : p) v /= s;
    return p;
  };
  const auto p = soft(zt), q = soft(zs);
  double loss = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) loss -= p[i] * std::log(q[i]);
  return loss;
}

struct Tiny {
  ModelParams teacher = tiny_model(31);
  ModelParams student = tiny_model(32, 1);
  Dataset train = random_dataset(40, teacher, 33);
  Dataset dev = random_dataset(20, teacher, 34);
};

DistillConfig small_cfg(std::size_t epochs) {
  DistillConfig c;
  c.train.max_epochs = epochs;
  c.train.batch_size = 8;
  c.seed = 5;
  return c;
}

std::vector<std::pair<std::string, Tensor>> tensors_of(const ModelParams& p) {
  std::vector<std::pair<std::string, Tensor>> out;
  p.for_each_tensor([&](const std::string& n, const Tensor& t) { out.emplace_back(n, t); });
  return out;
}

}  // namespace

TEST(KdLoss, TemperatureExample) {
  const std::vector<double> zt{1, 0}, zs{0, 1};
  EXPECT_NEAR(kd_loss(zt, zs, 2.0), kd_oracle(zt, zs, 2.0), 1e-14);
  // The exact value is 0.785307; the four-decimal literal is checked at its display precision.
  EXPECT_NEAR(kd_loss(zt, zs, 2.0), 0.7854, 1e-4);
}

TEST(KdLoss, EqualLogitsGiveEntropy) {
  const std::vector<double> z{0.3, -1.0, 2.0};
  const double tau = 1.5;
  double s = 0.0;
  std::vector<double> p(3);
  for (int i = 0; i < 3; ++i) s += (p[i] = std::exp(z[i] / tau));
  double h = 0.0;
  for (double& v : p) h -= (v / s) * std::log(v / s);
  EXPECT_NEAR(kd_loss(z, z, tau), h, 1e-14);
}

TEST(KdLoss, HighTemperatureApproachesLogK) {
  const std::vector<double> zt{5, -3, 1, 0}, zs{-2, 4, 0, 1};
  EXPECT_NEAR(kd_loss(zt, zs, 1e7), std::log(4.0), 1e-6);
}

TEST(KdLoss, GraphVersionAveragesScalarRows) {
  Rng rng(35);
  const Tensor zt = random_tensor({4, 3}, rng, 2.0), zs = random_tensor({4, 3}, rng, 2.0);
  Graph g;
  const double batched = kd_loss(g.constant(zt), g.constant(zs), 2.0).value().item();
  double ref = 0.0;
  for (std::size_t r = 0; r < 4; ++r) {
    std::vector<double> a(3), b(3);
    for (std::size_t c = 0; c < 3; ++c) a[c] = zt.at(r, c), b[c] = zs.at(r, c);
    ref += kd_oracle(a, b, 2.0) / 4.0;
  }
  EXPECT_NEAR(batched, ref, 1e-14);
}

TEST(KdLoss, GradientReachesBothBranches) {
  Rng rng(36);
  const std::vector<Tensor> params{random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)};
  const auto r = grad_check([](Graph&, std::span<const Var> p) { return kd_loss(p[0], p[1], 2.0); }, params, 1e-6);
  EXPECT_LT(r.max_rel_error, 1e-7);
}

TEST(TaskLoss, Examples) {
  const std::vector<double> y{0, 1};
  EXPECT_EQ(task_loss(y, std::vector<double>{0, 1}), 0.0);
  EXPECT_NEAR(task_loss(y, std::vector<double>{0.5, 0.5}), std::log(2.0), 1e-15);
  double prev = task_loss(y, std::vector<double>{0.9, 0.1});
  for (double m : {0.2, 0.4, 0.6, 0.8, 0.99}) {
    const double cur = task_loss(y, std::vector<double>{1 - m, m});
    EXPECT_LT(cur, prev);
    prev = cur;
  }
}

TEST(TaskLoss, GraphVersionMatchesScalar) {
  Graph g;
  const Tensor z = Tensor::matrix({{1.0, 2.0}, {0.5, -0.5}});
  const std::vector<int> labels{1, 0};
  const double got = task_loss(g.constant(z), labels).value().item();
  const double p0 = std::exp(2.0) / (std::exp(1.0) + std::exp(2.0));
  const double p1 = std::exp(0.5) / (std::exp(0.5) + std::exp(-0.5));
  EXPECT_NEAR(got, -(std::log(p0) + std::log(p1)) / 2.0, 1e-14);
  EXPECT_TRUE(throws_code(ErrorCode::input, [&] { task_loss(g.constant(z), std::vector<int>{2, 0}); }));
}

TEST(TotalLoss, Arithmetic) {
  EXPECT_EQ(total_loss(0.5, 0.3, 0.0), 0.5);
  EXPECT_NEAR(total_loss(0.5, 0.3, 1.0), 0.8, 1e-15);
  for (double a : {0.25, 1.0, 3.0}) {
    EXPECT_NEAR(total_loss(0.7, 0.2, 2 * a) - total_loss(0.7, 0.2, a), a * 0.2, 1e-14);
  }
}

TEST(Settings, InvalidValuesAreConfigErrors) {
  TrainSettings s;
  s.lr = 0.0;
  EXPECT_TRUE(throws_code(ErrorCode::config, [&] { s.validate(); }));
  s = TrainSettings{};
  s.dropout = 1.0;
  EXPECT_TRUE(throws_code(ErrorCode::config, [&] { s.validate(); }));
  DistillConfig c;
  c.tau = -1.0;
  EXPECT_TRUE(throws_code(ErrorCode::config, [&] { c.validate(); }));
  c = DistillConfig{};
  c.grid = {0.2, 0.1};
  EXPECT_TRUE(throws_code(ErrorCode::config, [&] { c.validate(); }));
  c = DistillConfig{};
  c.lambda = 1.5;
  EXPECT_TRUE(throws_code(ErrorCode::config, [&] { c.validate(); }));
}

TEST(Optimizer, SgdStepWithDecoupledDecay) {
  ModelParams p = tiny_model(37, 1);
  const ModelParams before = p;
  TrainSettings s;
  s.optimizer = OptimizerKind::sgd;
  s.lr = 0.1;
  s.weight_decay = 0.01;
  Optimizer opt(s, p);
  std::vector<Tensor> grads;
  p.for_each_tensor([&](const std::string&, const Tensor& t) { grads.push_back(Tensor::filled(t.shape(), 2.0)); });
  opt.step(p, grads);
  EXPECT_NEAR(p.cls_b[0], before.cls_b[0] - 0.1 * (2.0 + 0.01 * before.cls_b[0]), 1e-15);
  EXPECT_NEAR(p.tok_emb[5], before.tok_emb[5] - 0.1 * (2.0 + 0.01 * before.tok_emb[5]), 1e-15);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ModelParams p = tiny_model(38, 1);
  const ModelParams before = p;
  TrainSettings s;
  s.lr = 0.01;
  Optimizer opt(s, p);
  std::vector<Tensor> grads;
  p.for_each_tensor([&](const std::string&, const Tensor& t) { grads.push_back(Tensor::filled(t.shape(), -3.0)); });
  opt.step(p, grads);
  // Bias-corrected first step: m_hat = g, v_hat = g^2.
  EXPECT_NEAR(p.cls_w[0] - before.cls_w[0], 0.01 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(Finetune, ZeroEpochsLeavesParamsUnchanged) {
  Tiny t;
  TrainSettings s;
  s.max_epochs = 0;
  const TrainResult r = finetune_teacher(t.teacher, t.train, t.dev, s, 1);
  EXPECT_EQ(tensors_of(r.params), tensors_of(t.teacher));
  EXPECT_TRUE(r.report.epochs.empty());
  EXPECT_EQ(r.report.best_epoch, 0u);
}

TEST(Finetune, SameSeedSameTrajectory) {
  Tiny t;
  TrainSettings s;
  s.max_epochs = 2;
  s.batch_size = 8;
  s.dropout = 0.1;
  const TrainResult a = finetune_teacher(t.teacher, t.train, t.dev, s, 9);
  const TrainResult b = finetune_teacher(t.teacher, t.train, t.dev, s, 9);
  EXPECT_TRUE(a.report.same_trajectory(b.report));
  EXPECT_EQ(tensors_of(a.params), tensors_of(b.params));
  ASSERT_EQ(a.report.epochs.size(), 2u);
  EXPECT_EQ(a.report.epochs[0].kd, 0.0);
}

TEST(Finetune, LossDecreasesOnLearnableData) {
  // Label is the parity of the second token: easy to fit with a tiny model.
  ModelParams p = tiny_model(39, 1, 16);
  Rng rng(40);
  Dataset d;
  for (int i = 0; i < 128; ++i) {
    const std::uint32_t tok = static_cast<std::uint32_t>(Vocab::kReserved + rng.below(p.vocab() - Vocab::kReserved));
    d.examples.push_back({{Vocab::kCls, tok, Vocab::kSep}, static_cast<int>(tok % 2)});
  }
  TrainSettings s;
  s.max_epochs = 15;
  s.batch_size = 16;
  s.patience = 15;
  const TrainResult r = finetune_teacher(p, d, d, s, 3);
  EXPECT_LT(r.report.epochs.back().tk, r.report.epochs.front().tk);
  EXPECT_GE(r.report.best_dev_metric, 0.9);
}

TEST(Finetune, EmptyDataIsInputError) {
  Tiny t;
  EXPECT_TRUE(throws_code(ErrorCode::input, [&] { finetune_teacher(t.teacher, Dataset{}, t.dev, TrainSettings{}, 1); }));
}

TEST(Distill, OnesGatesEqualPlainKdAndDeterministic) {
  Tiny t;
  const DistillConfig c = small_cfg(2);
  const TrainResult a = distill(t.teacher, GateSet::ones(t.teacher), t.student, t.train, t.dev, c);
  const TrainResult b = distill(t.teacher, GateSet::ones(t.teacher), t.student, t.train, t.dev, c);
  EXPECT_TRUE(a.report.same_trajectory(b.report));
  ASSERT_EQ(a.report.epochs.size(), 2u);
  for (const auto& e : a.report.epochs) EXPECT_NEAR(e.total, e.kd + c.alpha * e.tk, 1e-12);
}

TEST(Distill, MaskedTeacherChangesTrajectory) {
  Tiny t;
  GateSet g = GateSet::ones(t.teacher);
  g.xi[0].fill(0.0);
  g.nu[1].fill(0.0);
  const DistillConfig c = small_cfg(1);
  const TrainResult a = distill(t.teacher, GateSet::ones(t.teacher), t.student, t.train, t.dev, c);
  const TrainResult b = distill(t.teacher, g, t.student, t.train, t.dev, c);
  EXPECT_NE(a.report.epochs[0].kd, b.report.epochs[0].kd);
}

TEST(Distill, ContractViolations) {
  Tiny t;
  GateSet soft = GateSet::ones(t.teacher);
  soft.xi[0][0] = 0.5;
  EXPECT_TRUE(throws_code(ErrorCode::contract,
                          [&] { distill(t.teacher, soft, t.student, t.train, t.dev, small_cfg(1)); }));
  GateSet wrong = GateSet::ones(t.student);
  EXPECT_TRUE(throws_code(ErrorCode::contract,
                          [&] { distill(t.teacher, wrong, t.student, t.train, t.dev, small_cfg(1)); }));
  ModelDims d = tiny_dims(1);
  d.classes = 3;
  Rng rng(41);
  const ModelParams three = init_model(d, rng);
  EXPECT_TRUE(throws_code(ErrorCode::contract, [&] {
    distill(t.teacher, GateSet::ones(t.teacher), three, t.train, t.dev, small_cfg(1));
  }));
}

TEST(Evaluate, MatchesArgmaxAccuracy) {
  Tiny t;
  const Tensor z = predict_logits(t.teacher, GateSet::ones(t.teacher), t.dev.sequences());
  double hits = 0.0;
  for (std::size_t i = 0; i < t.dev.size(); ++i) {
    const int pred = z.at(i, 1) > z.at(i, 0) ? 1 : 0;
    hits += pred == t.dev.examples[i].label;
  }
  EXPECT_DOUBLE_EQ(evaluate(t.teacher, GateSet::ones(t.teacher), t.dev), hits / t.dev.size());
}
