#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fer/augment.hpp"
#include "fer/dataset.hpp"
#include "fer/model.hpp"
#include "fer/optim.hpp"

namespace fer {

enum class Monitor { val_loss, val_accuracy };
std::string_view to_string(Monitor monitor);
Monitor parse_monitor(std::string_view name);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainConfig {
  std::size_t epochs = 100;
  std::size_t batch_size = 64;
  OptimizerConfig optimizer{};
  std::size_t patience = 10;
  Monitor monitor = Monitor::val_loss;
  std::uint64_t seed = 0;
  double subset_fraction = 1.0;
  bool augment = true;
  AugmentPolicy augment_policy{};
  bool class_weighting = true;
  std::vector<LayerSpec> architecture = preset_layers("fer-tiny");
  /// Threads used for per-sample augmentation. Results do not depend on it.
  std::size_t augment_workers = 1;
  /// Record wall-clock seconds per epoch. Off keeps histories byte-identical
  /// across runs; the column is then written as 0.
  bool record_timing = false;
  /// When set, the best-by-val-loss and best-by-val-accuracy models are
  /// saved as <prefix>.best_loss.ferm and <prefix>.best_acc.ferm.
  std::optional<std::filesystem::path> checkpoint_prefix;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 1-based
  double train_loss = 0.0;
  double train_accuracy = 0.0;
  double val_loss = 0.0;
  double val_accuracy = 0.0;
  double seconds = 0.0;
};

using ConfusionMatrix = std::array<std::array<std::size_t, kNumClasses>, kNumClasses>;

struct Metrics {
  double accuracy = 0.0;
  /// Rows are true classes, columns predicted classes.
  ConfusionMatrix confusion{};
  /// Empty when the class was never predicted (precision) or never present (recall).
  std::array<std::optional<double>, kNumClasses> precision{};
  std::array<std::optional<double>, kNumClasses> recall{};
  /// Unweighted mean cross-entropy; filled by evaluate().
  double loss = 0.0;

  std::size_t total() const;
};

Metrics metrics_from_predictions(std::span<const int> labels, std::span<const int> predictions);

/// Infer-mode evaluation: argmax predictions, confusion matrix, per-class
/// precision/recall and mean (unweighted) cross-entropy.
Metrics evaluate(const Model& model, const DatasetSplit& split, std::size_t batch_size = 256);

enum class StopDecision { keep_going, stop };

struct EarlyStopping {
  Monitor monitor = Monitor::val_loss;
  std::size_t patience = 10;
  std::optional<double> best;
  std::size_t stale_epochs = 0;

  static constexpr double kMinDelta = 1e-6;

  /// Feeds one monitored value. Returns true if it is a new best.
  bool improved(double current) const;
  StopDecision update(double current);
};

/// Pure form of the stopping rule: improvement is strictly better than
/// `best` by more than 1e-6 and resets staleness; staleness reaching
/// `patience` stops.
struct EarlyStopState {
  double best;
  std::size_t stale_epochs;
  StopDecision decision;
};
EarlyStopState early_stop_update(double best, double current, std::size_t stale_epochs, std::size_t patience,
                                 Monitor direction);

struct TrainHooks {
  /// Called after each epoch's record is appended.
  std::function<void(const EpochRecord&, const Model&)> on_epoch;
  /// Replaces the monitored value for an epoch (synthetic curves in tests).
  std::function<double(const EpochRecord&)> monitor_override;
};

struct TrainResult {
  Model best_model;
  std::vector<EpochRecord> history;
  std::size_t best_epoch = 0;  // 1-based
  bool stopped_early = false;
  std::size_t optimizer_steps = 0;
};

/// Trains `model` on Training, validates on PublicTest after every epoch
/// and returns the best model under `config.monitor`.
TrainResult train(Model model, const DatasetSplit& training, const DatasetSplit& validation, const TrainConfig& config,
                  const TrainHooks& hooks = {});

/// Header `epoch,train_loss,train_acc,val_loss,val_acc,seconds`, one row per epoch.
void history_to_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path);
std::string history_csv_text(const std::vector<EpochRecord>& history);
std::vector<EpochRecord> parse_history_csv(const std::filesystem::path& path);

/// 7x7 CSV with class names on the header row and first column.
void confusion_to_csv(const ConfusionMatrix& cm, const std::filesystem::path& path);

}  // namespace fer
