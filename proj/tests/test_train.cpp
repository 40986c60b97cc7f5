#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "fer/model_store.hpp"
#include "fer/train.hpp"
#include "test_util.hpp"

namespace {

using fer::EpochRecord;
using fer::LayerSpec;
using fer::Model;
using fer::Monitor;
using fer::Rng;
using fer::StopDecision;
using fer::TrainConfig;

// Pool down to 12x12 and classify linearly: cheap enough for long schedules.
std::vector<LayerSpec> micro_specs() {
  return {LayerSpec::maxpool2d(4, 4), LayerSpec::flatten(), LayerSpec::dense(144, 7), LayerSpec::softmax()};
}

Model build(const std::vector<LayerSpec>& specs, std::uint64_t seed) {
  Rng rng(seed);
  return Model::build(specs, rng);
}

TEST(EarlyStop, RuleExamples) {
  // Strictly improving never stops.
  double best = 10.0;
  std::size_t stale = 0;
  for (int i = 0; i < 100; ++i) {
    const auto s = fer::early_stop_update(best, best - 0.01, stale, 3, Monitor::val_loss);
    EXPECT_EQ(s.decision, StopDecision::keep_going);
    best = s.best;
    stale = s.stale_epochs;
  }
  // Flat sequence, patience 3: stops on the third update.
  stale = 0;
  std::vector<StopDecision> decisions;
  for (int i = 0; i < 3; ++i) {
    const auto s = fer::early_stop_update(1.0, 1.0, stale, 3, Monitor::val_loss);
    stale = s.stale_epochs;
    decisions.push_back(s.decision);
  }
  EXPECT_EQ(decisions, (std::vector<StopDecision>{StopDecision::keep_going, StopDecision::keep_going, StopDecision::stop}));
  // An improvement of 1e-7 is stale; 1e-5 is not.
  EXPECT_EQ(fer::early_stop_update(1.0, 1.0 - 1e-7, 0, 5, Monitor::val_loss).stale_epochs, 1u);
  EXPECT_EQ(fer::early_stop_update(1.0, 1.0 - 1e-5, 4, 5, Monitor::val_loss).stale_epochs, 0u);
  EXPECT_EQ(fer::early_stop_update(0.5, 0.5 + 1e-7, 0, 5, Monitor::val_accuracy).stale_epochs, 1u);
  EXPECT_EQ(fer::early_stop_update(0.5, 0.6, 0, 5, Monitor::val_accuracy).best, 0.6);
}

TEST(EarlyStop, SyntheticCurveStopsAtFiftyAndKeepsEpochForty) {
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 2, 1);
  const auto validation = fer::testing::synthetic_split(fer::Usage::public_test, 1, 2);
  TrainConfig config;
  config.epochs = 100;
  config.patience = 10;
  config.batch_size = 7;
  config.augment = false;

  std::vector<Model> snapshots;
  fer::TrainHooks hooks;
  hooks.on_epoch = [&](const EpochRecord&, const Model& m) { snapshots.push_back(m); };
  // Improves through epoch 40, then rises.
  hooks.monitor_override = [](const EpochRecord& r) {
    const double e = static_cast<double>(r.epoch);
    return r.epoch <= 40 ? 2.0 - 0.02 * e : 1.2 + 0.01 * (e - 40);
  };
  const auto result = fer::train(build(micro_specs(), 3), training, validation, config, hooks);
  EXPECT_EQ(result.history.size(), 50u);
  EXPECT_TRUE(result.stopped_early);
  EXPECT_EQ(result.best_epoch, 40u);
  ASSERT_EQ(snapshots.size(), 50u);
  EXPECT_EQ(fer::serialize_model(result.best_model), fer::serialize_model(snapshots[39]));
  EXPECT_NE(fer::serialize_model(result.best_model), fer::serialize_model(snapshots[49]));
}

TEST(Train, BestModelIsHistoryArgmin) {
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 6, 4);
  const auto validation = fer::testing::synthetic_split(fer::Usage::public_test, 3, 5);
  TrainConfig config;
  config.epochs = 12;
  config.patience = 12;
  config.batch_size = 8;
  config.optimizer.learning_rate = 0.05;
  const auto result = fer::train(build(micro_specs(), 4), training, validation, config);
  std::size_t argmin = 0;
  for (std::size_t i = 1; i < result.history.size(); ++i)
    if (result.history[i].val_loss < result.history[argmin].val_loss - 1e-6) argmin = i;
  EXPECT_EQ(result.best_epoch, argmin + 1);
  EXPECT_NEAR(fer::evaluate(result.best_model, validation).loss, result.history[argmin].val_loss, 1e-9);
}

TEST(Train, OneOptimizerStepPerBatch) {
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 10, 6);  // 70 samples
  const auto validation = fer::testing::synthetic_split(fer::Usage::public_test, 1, 7);
  for (std::size_t batch : {1, 8, 64, 70, 100}) {
    TrainConfig config;
    config.epochs = 2;
    config.patience = 2;
    config.batch_size = batch;
    const auto result = fer::train(build(micro_specs(), 5), training, validation, config);
    EXPECT_EQ(result.optimizer_steps, 2 * ((70 + batch - 1) / batch)) << "batch " << batch;
  }
}

TEST(Train, SameConfigGivesIdenticalHistory) {
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 8, 8);
  const auto validation = fer::testing::synthetic_split(fer::Usage::public_test, 3, 9);
  TrainConfig config;
  config.epochs = 3;
  config.patience = 3;
  config.batch_size = 16;
  config.seed = 77;
  config.subset_fraction = 0.5;
  config.augment_workers = 1;
  const auto a = fer::train(build(fer::preset_layers("fer-tiny"), 1), training, validation, config);
  config.augment_workers = 4;
  const auto b = fer::train(build(fer::preset_layers("fer-tiny"), 1), training, validation, config);
  EXPECT_EQ(fer::history_csv_text(a.history), fer::history_csv_text(b.history));
  EXPECT_EQ(fer::serialize_model(a.best_model), fer::serialize_model(b.best_model));
  config.seed = 78;
  const auto c = fer::train(build(fer::preset_layers("fer-tiny"), 1), training, validation, config);
  EXPECT_NE(fer::history_csv_text(a.history), fer::history_csv_text(c.history));
}

TEST(Train, NonFiniteAbortNamesEpochAndBatch) {
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 2, 1);
  auto model = build(micro_specs(), 6);
  (*model.mutable_parameters()[0])[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig config;
  config.epochs = 1;
  config.patience = 1;
  try {
    fer::train(model, training, training, config);
    FAIL() << "expected TrainingError";
  } catch (const fer::TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch 1"), std::string::npos) << msg;
    EXPECT_NE(msg.find("batch 0"), std::string::npos) << msg;
  }
}

TEST(Train, CheckpointsAreWritten) {
  fer::testing::TempDir dir;
  const auto training = fer::testing::synthetic_split(fer::Usage::training, 2, 1);
  TrainConfig config;
  config.epochs = 2;
  config.patience = 2;
  config.checkpoint_prefix = dir / "run";
  fer::train(build(micro_specs(), 7), training, training, config);
  EXPECT_NO_THROW(fer::load_model(dir / "run.best_loss.ferm"));
  EXPECT_NO_THROW(fer::load_model(dir / "run.best_acc.ferm"));
}

TEST(TrainConfig, Validation) {
  TrainConfig config;
  config.epochs = 5;
  config.patience = 6;
  EXPECT_THROW(config.validate(), std::invalid_argument);
  config.patience = 5;
  config.subset_fraction = 0.0;
  EXPECT_THROW(config.validate(), std::invalid_argument);
  EXPECT_EQ(fer::parse_monitor("val_accuracy"), Monitor::val_accuracy);
}

TEST(Metrics, HandTabulatedExample) {
  const int labels[] = {0, 0, 1};
  const int preds[] = {0, 1, 1};
  const auto m = fer::metrics_from_predictions(labels, preds);
  EXPECT_DOUBLE_EQ(m.accuracy, 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(*m.recall[0], 0.5);
  EXPECT_DOUBLE_EQ(*m.recall[1], 1.0);
  EXPECT_DOUBLE_EQ(*m.precision[1], 0.5);
  EXPECT_DOUBLE_EQ(*m.precision[0], 1.0);
  EXPECT_FALSE(m.precision[2].has_value());
  EXPECT_FALSE(m.recall[2].has_value());
  EXPECT_EQ(m.confusion[0][1], 1u);
  EXPECT_EQ(m.total(), 3u);
}

TEST(Metrics, PerfectAndConstantHappyClassifiers) {
  std::vector<int> labels;
  for (int c = 0; c < 7; ++c) labels.insert(labels.end(), fer::kReferenceClassCounts[c], c);
  const auto perfect = fer::metrics_from_predictions(labels, labels);
  EXPECT_EQ(perfect.accuracy, 1.0);
  for (std::size_t r = 0; r < 7; ++r)
    for (std::size_t c = 0; c < 7; ++c) EXPECT_EQ(perfect.confusion[r][c], r == c ? fer::kReferenceClassCounts[r] : 0);

  const std::vector<int> happy(labels.size(), 3);
  const auto constant = fer::metrics_from_predictions(labels, happy);
  EXPECT_DOUBLE_EQ(constant.accuracy, 8989.0 / 35887.0);
  EXPECT_NEAR(constant.accuracy, 0.2505, 5e-5);
  EXPECT_EQ(constant.total(), 35887u);
}

TEST(Metrics, EvaluateMatchesTrace) {
  const auto split = fer::testing::synthetic_split(fer::Usage::public_test, 5, 11);
  const auto model = build(fer::preset_layers("fer-tiny"), 12);
  const auto m = fer::evaluate(model, split, 8);
  EXPECT_EQ(m.total(), split.size());
  std::size_t trace = 0;
  for (std::size_t c = 0; c < 7; ++c) trace += m.confusion[c][c];
  EXPECT_DOUBLE_EQ(m.accuracy, static_cast<double>(trace) / split.size());
  EXPECT_GT(m.loss, 0.0);
}

TEST(History, CsvFormat) {
  fer::testing::TempDir dir;
  fer::history_to_csv({}, dir / "empty.csv");
  EXPECT_EQ(fer::testing::read_file(dir / "empty.csv"), "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n");

  std::vector<EpochRecord> h{{1, 1.23456789, 0.5, 1.5, 0.25, 0.0}, {2, 0.987654321, 0.625, 1.25, 0.375, 12.5}};
  fer::history_to_csv(h, dir / "two.csv");
  const auto text = fer::testing::read_file(dir / "two.csv");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 3);
  const auto back = fer::parse_history_csv(dir / "two.csv");
  ASSERT_EQ(back.size(), 2u);
  for (std::size_t i = 0; i < 2; ++i) {
    EXPECT_EQ(back[i].epoch, h[i].epoch);
    EXPECT_NEAR(back[i].train_loss, h[i].train_loss, 1e-6 * h[i].train_loss);
    EXPECT_NEAR(back[i].val_loss, h[i].val_loss, 1e-6 * h[i].val_loss);
    EXPECT_NEAR(back[i].train_accuracy, h[i].train_accuracy, 1e-6);
    EXPECT_NEAR(back[i].val_accuracy, h[i].val_accuracy, 1e-6);
    EXPECT_NEAR(back[i].seconds, h[i].seconds, 1e-3);
  }
  EXPECT_THROW(fer::history_to_csv(h, dir / "no" / "such" / "dir.csv"), std::runtime_error);
}

TEST(History, ConfusionCsv) {
  fer::testing::TempDir dir;
  fer::ConfusionMatrix cm{};
  cm[3][3] = 5;
  cm[2][4] = 1;
  fer::confusion_to_csv(cm, dir / "cm.csv");
  const auto text = fer::testing::read_file(dir / "cm.csv");
  EXPECT_EQ(text.substr(0, text.find('\n')), "true\\predicted,angry,disgust,fear,happy,sad,surprise,neutral");
  EXPECT_EQ(std::count(text.begin(), text.end(), '\n'), 8);
  EXPECT_NE(text.find("happy,0,0,0,5,0,0,0"), std::string::npos);
  EXPECT_NE(text.find("fear,0,0,0,0,1,0,0"), std::string::npos);
}

}  // namespace
