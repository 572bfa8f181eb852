#include <gtest/gtest.h>

#include <algorithm>

#include "helpers.hpp"
#include "pipeline.hpp"
#include "reports.hpp"

using namespace stark;
using namespace stark::test;

namespace {

Config small_config() {
  Config c = default_config();
  c.task.synthetic.train_size = 240;
  c.task.synthetic.dev_size = 80;
  c.model.d_model = 16;
  c.model.heads = 2;
  c.model.head_dim = 8;
  c.model.ffn_dim = 32;
  c.model.layers = 2;
  c.teacher.max_epochs = 2;
  c.distill.train.max_epochs = 2;
  c.distill.student_init.keep_layers = 1;
  c.distill.grid = {0.2, 0.5};
  c.pilot.trials = 3;
  return c;
}

std::string bytes_of(const ModelParams& p) { return serialize(make_checkpoint(p, nullptr, 0, 0)); }

class PipelineTest : public ::testing::Test {
 protected:
  static void SetUpTestSuite() {
    cfg_ = new Config(small_config());
    SeedLedger seeds(cfg_->seed);
    data_ = new PreparedData(prepare_data(*cfg_, seeds));
    teacher_ = new ModelParams(run_finetune(*cfg_, *data_, seeds).params);
  }
  static void TearDownTestSuite() {
    delete cfg_;
    delete data_;
    delete teacher_;
  }

  DistillConfig dcfg() const {
    SeedLedger seeds(cfg_->seed);
    return distill_config(*cfg_, seeds);
  }
  ScoringOptions opts() const { return scoring_options(*cfg_); }

  static Config* cfg_;
  static PreparedData* data_;
  static ModelParams* teacher_;
};

Config* PipelineTest::cfg_ = nullptr;
PreparedData* PipelineTest::data_ = nullptr;
ModelParams* PipelineTest::teacher_ = nullptr;

}  // namespace

TEST_F(PipelineTest, PreparedDataIsDeterministic) {
  SeedLedger a(cfg_->seed), b(cfg_->seed);
  const PreparedData x = prepare_data(*cfg_, a);
  const PreparedData y = prepare_data(*cfg_, b);
  ASSERT_EQ(x.train.examples.size(), 240u);
  ASSERT_EQ(x.dev.examples.size(), 80u);
  for (std::size_t i = 0; i < x.train.examples.size(); ++i) {
    EXPECT_EQ(x.train.examples[i].ids, y.train.examples[i].ids);
    EXPECT_EQ(x.train.examples[i].label, y.train.examples[i].label);
  }
}

TEST_F(PipelineTest, DropLayersStudent) {
  StudentInit init;
  init.keep_layers = 1;
  const ModelParams s = init_student(*teacher_, init, data_->train, opts());
  EXPECT_EQ(s.layer_count(), 1u);
  init.keep_layers = 0;
  EXPECT_TRUE(throws_code(ErrorCode::parameter, [&] { init_student(*teacher_, init, data_->train, opts()); }));
}

TEST_F(PipelineTest, PruneParamsStudentRemovesSeventyPercent) {
  StudentInit init;
  init.kind = StudentInitKind::prune_params;
  init.prune_sparsity = 0.7;
  const ModelParams s = init_student(*teacher_, init, data_->train, opts());
  EXPECT_EQ(s.layer_count(), teacher_->layer_count());
  EXPECT_EQ(teacher_->head_count() - s.head_count(), removal_count(0.7, teacher_->head_count()));
  EXPECT_EQ(teacher_->neuron_count() - s.neuron_count(), removal_count(0.7, teacher_->neuron_count()));

  // The kept neurons are the most expressive ones.
  const RawScoreTable p = expressiveness(*teacher_, data_->train, opts());
  const ScoreReport r = build_score_report(p, p, 1.0, NormGrouping::per_layer);
  const SparsityMask m = rank_mask(r, 0.7);
  EXPECT_EQ(bytes_of(s), bytes_of(compact(*teacher_, m)));
}

TEST_F(PipelineTest, TrialInitReloadsBitIdentically) {
  const DistillConfig d = dcfg();
  const TrialResult t = trial_distillation(d, *teacher_, data_->train, data_->dev, data_->train, opts());
  const ModelParams reloaded = params_from_checkpoint(t.init);
  EXPECT_EQ(checkpoint_hash(make_checkpoint(reloaded, nullptr, t.init.rng_state, t.init.config_digest)),
            checkpoint_hash(t.init));
  EXPECT_EQ(t.init.config_digest, distill_digest(d));
  EXPECT_FALSE(t.report.epochs.empty());
}

TEST_F(PipelineTest, EmptyMaskActualRepeatsTrial) {
  const DistillConfig d = dcfg();
  const TrialResult t = trial_distillation(d, *teacher_, data_->train, data_->dev, data_->train, opts());
  SparsityMask empty;
  const TrainResult a = actual_distillation(d, *teacher_, empty, t.init, data_->train, data_->dev);
  EXPECT_EQ(train_report_jsonl(a.report), train_report_jsonl(t.report));
  EXPECT_EQ(bytes_of(a.params), bytes_of(t.student));
}

TEST_F(PipelineTest, RewindChecksDigest) {
  DistillConfig d = dcfg();
  const TrialResult t = trial_distillation(d, *teacher_, data_->train, data_->dev, data_->train, opts());
  d.tau = 3.0;
  EXPECT_TRUE(throws_code(ErrorCode::rewind, [&] {
    actual_distillation(d, *teacher_, SparsityMask{}, t.init, data_->train, data_->dev);
  }));
}

TEST_F(PipelineTest, SparsificationMasksAreNested) {
  DistillConfig d = dcfg();
  d.grid = {0.1, 0.3, 0.5, 0.7, 0.9};
  const TrialResult t = trial_distillation(d, *teacher_, data_->train, data_->dev, data_->train, opts());
  const Sparsification s =
      parameter_sparsification(d, *teacher_, t.student, data_->train, opts(), NormGrouping::per_layer);
  EXPECT_EQ(s.scores.entries.size(), teacher_->head_count() + teacher_->neuron_count());
  ASSERT_EQ(s.masks.size(), 5u);
  for (std::size_t k = 1; k < s.masks.size(); ++k) {
    const auto& a = s.masks[k - 1].removed;
    const auto& b = s.masks[k].removed;
    EXPECT_TRUE(std::includes(b.begin(), b.end(), a.begin(), a.end()));
  }
}

TEST_F(PipelineTest, GridRunIsDeterministic) {
  auto run = [&] {
    SeedLedger seeds(cfg_->seed);
    return pipeline_to_json(run_stark(*cfg_, *data_, *teacher_, Mode::grid, seeds).report).dump();
  };
  const std::string a = run();
  EXPECT_EQ(a, run());
  const auto j = nlohmann::json::parse(a);
  EXPECT_EQ(j["actual_runs"], 2);
}

TEST_F(PipelineTest, AutoModeRunsOneDistillationOrFallsBack) {
  SeedLedger seeds(cfg_->seed);
  const RunArtifacts art = run_stark(*cfg_, *data_, *teacher_, Mode::automatic, seeds);
  ASSERT_TRUE(art.report.auto_estimate.has_value());
  EXPECT_EQ(art.report.actual_runs(), art.report.auto_estimate->fallback ? cfg_->distill.grid.size() : 1u);
}

TEST_F(PipelineTest, PilotZeroRowIsTheTeacher) {
  const auto rows = pilot_study(*teacher_, data_->dev, {0.0, 0.15}, 3, 5);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].mean_metric, evaluate(*teacher_, GateSet::ones(*teacher_), data_->dev));
  EXPECT_EQ(rows[0].mean_variance, mean_output_variance(*teacher_, data_->dev));
  EXPECT_EQ(rows[0].std_metric, 0.0);
  EXPECT_EQ(rows[1].trials, 3u);
  EXPECT_TRUE(throws_code(ErrorCode::parameter, [&] { pilot_study(*teacher_, data_->dev, {0.1}, 0, 5); }));
}
