#include "fer/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "fer/model_store.hpp"

namespace fer {

namespace {

constexpr std::uint64_t kShuffleStream = 0x5f1;
constexpr std::uint64_t kDropoutStream = 0xd40;

bool better(Monitor monitor, double candidate, double incumbent) {
  return monitor == Monitor::val_loss ? candidate < incumbent - EarlyStopping::kMinDelta
                                      : candidate > incumbent + EarlyStopping::kMinDelta;
}

double monitored(Monitor monitor, const EpochRecord& r) {
  return monitor == Monitor::val_loss ? r.val_loss : r.val_accuracy;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.9g", v);
  return buf;
}

}  // namespace

std::string_view to_string(Monitor monitor) { return monitor == Monitor::val_loss ? "val_loss" : "val_accuracy"; }

Monitor parse_monitor(std::string_view name) {
  if (name == "val_loss") return Monitor::val_loss;
  if (name == "val_accuracy") return Monitor::val_accuracy;
  throw std::invalid_argument("unknown monitor '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (epochs == 0) throw std::invalid_argument("epochs must be positive");
  if (batch_size == 0) throw std::invalid_argument("batch size must be positive");
  if (patience == 0) throw std::invalid_argument("patience must be positive");
  if (patience > epochs) throw std::invalid_argument("patience must not exceed epochs");
  if (!(subset_fraction > 0.0 && subset_fraction <= 1.0)) throw std::invalid_argument("subset must lie in (0,1]");
  optimizer.validate();
  augment_policy.validate();
}

std::size_t Metrics::total() const {
  std::size_t n = 0;
  for (const auto& row : confusion)
    for (auto v : row) n += v;
  return n;
}

Metrics metrics_from_predictions(std::span<const int> labels, std::span<const int> predictions) {
  if (labels.size() != predictions.size()) throw std::invalid_argument("labels and predictions differ in length");
  Metrics m;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const auto y = static_cast<std::size_t>(labels[i]);
    const auto p = static_cast<std::size_t>(predictions[i]);
    if (y >= kNumClasses || p >= kNumClasses) throw std::invalid_argument("class index outside 0..6");
    ++m.confusion[y][p];
  }
  std::size_t correct = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    correct += m.confusion[c][c];
    std::size_t predicted = 0, actual = 0;
    for (std::size_t k = 0; k < kNumClasses; ++k) {
      predicted += m.confusion[k][c];
      actual += m.confusion[c][k];
    }
    const auto tp = static_cast<double>(m.confusion[c][c]);
    if (predicted) m.precision[c] = tp / static_cast<double>(predicted);
    if (actual) m.recall[c] = tp / static_cast<double>(actual);
  }
  m.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(labels.size());
  return m;
}

Metrics evaluate(const Model& model, const DatasetSplit& split, std::size_t batch_size) {
  if (split.empty()) throw std::invalid_argument("cannot evaluate on an empty split");
  BatchIterator it(split, batch_size, 0, false);
  std::vector<int> labels, predictions;
  double loss_sum = 0.0;
  for (std::size_t b = 0; b < it.num_batches(); ++b) {
    const auto batch = it.batch(b);
    const auto logits = model.infer_logits(batch.images);
    const auto loss = weighted_softmax_cross_entropy(logits, batch.labels, ClassWeights::uniform());
    loss_sum += loss.loss * static_cast<double>(batch.labels.size());
    for (auto p : argmax(logits, 1)) predictions.push_back(static_cast<int>(p));
    labels.insert(labels.end(), batch.labels.begin(), batch.labels.end());
  }
  auto m = metrics_from_predictions(labels, predictions);
  m.loss = loss_sum / static_cast<double>(labels.size());
  return m;
}

EarlyStopState early_stop_update(double best, double current, std::size_t stale_epochs, std::size_t patience,
                                 Monitor direction) {
  if (patience == 0) throw std::invalid_argument("patience must be >= 1");
  if (better(direction, current, best)) return {current, 0, StopDecision::keep_going};
  const auto stale = stale_epochs + 1;
  return {best, stale, stale >= patience ? StopDecision::stop : StopDecision::keep_going};
}

bool EarlyStopping::improved(double current) const { return !best || better(monitor, current, *best); }

StopDecision EarlyStopping::update(double current) {
  if (!best) {
    best = current;
    stale_epochs = 0;
    return StopDecision::keep_going;
  }
  const auto next = early_stop_update(*best, current, stale_epochs, patience, monitor);
  best = next.best;
  stale_epochs = next.stale_epochs;
  return next.decision;
}

TrainResult train(Model model, const DatasetSplit& training_full, const DatasetSplit& validation,
                  const TrainConfig& config, const TrainHooks& hooks) {
  config.validate();
  if (training_full.empty() || validation.empty()) throw TrainingError("training and validation splits must be nonempty");

  const DatasetSplit training = config.subset_fraction < 1.0
                                    ? stratified_subset(training_full, config.subset_fraction, config.seed)
                                    : training_full;
  const ClassWeights weights =
      config.class_weighting ? compute_class_weights(training.class_counts()) : ClassWeights::uniform();

  Optimizer<float> optimizer(config.optimizer);
  EarlyStopping stopper{config.monitor, config.patience, std::nullopt, 0};
  std::optional<double> best_loss, best_acc;

  TrainResult result{model, {}, 0, false, 0};
  for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
    const auto started = std::chrono::steady_clock::now();
    BatchIterator batches(training, config.batch_size, mix64(config.seed ^ mix64(kShuffleStream + epoch)), true);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < batches.num_batches(); ++b) {
      try {
        auto batch = batches.batch(b);
        if (config.augment) {
          augment_batch(batch.images, batch.indices, config.augment_policy, config.seed, epoch,
                        config.augment_workers);
        }
        Rng dropout_rng = Rng::derive(config.seed, {kDropoutStream, epoch, b});
        auto pass = model.forward(batch.images, Mode::train, dropout_rng);
        const auto loss = weighted_softmax_cross_entropy(pass.logits, batch.labels, weights);
        const auto grads = model.backward(pass.caches, loss.dlogits);
        const auto params = model.mutable_parameters();
        optimizer.step(params, grads);
        ++result.optimizer_steps;
        loss_sum += loss.loss * static_cast<double>(batch.labels.size());
        const auto predicted = argmax(pass.logits, 1);
        for (std::size_t j = 0; j < predicted.size(); ++j)
          if (static_cast<int>(predicted[j]) == batch.labels[j]) ++correct;
      } catch (const NonFiniteError& e) {
        throw TrainingError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) +
                            ": non-finite value during training (" + e.what() + ")");
      }
    }

    const auto val = evaluate(model, validation);
    if (!std::isfinite(val.loss)) {
      throw TrainingError("epoch " + std::to_string(epoch) + ": non-finite validation loss");
    }
    EpochRecord record;
    record.epoch = epoch;
    record.train_loss = loss_sum / static_cast<double>(training.size());
    record.train_accuracy = static_cast<double>(correct) / static_cast<double>(training.size());
    record.val_loss = val.loss;
    record.val_accuracy = val.accuracy;
    if (config.record_timing) {
      record.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    }
    result.history.push_back(record);
    if (hooks.on_epoch) hooks.on_epoch(record, model);

    const double value = hooks.monitor_override ? hooks.monitor_override(record) : monitored(config.monitor, record);
    if (stopper.improved(value)) {
      result.best_model = model;
      result.best_epoch = epoch;
    }
    if (config.checkpoint_prefix) {
      if (!best_loss || better(Monitor::val_loss, record.val_loss, *best_loss)) {
        best_loss = record.val_loss;
        save_model(model, config.checkpoint_prefix->string() + ".best_loss.ferm");
      }
      if (!best_acc || better(Monitor::val_accuracy, record.val_accuracy, *best_acc)) {
        best_acc = record.val_accuracy;
        save_model(model, config.checkpoint_prefix->string() + ".best_acc.ferm");
      }
    }
    if (stopper.update(value) == StopDecision::stop) {
      result.stopped_early = epoch < config.epochs;
      break;
    }
  }
  return result;
}

std::string history_csv_text(const std::vector<EpochRecord>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,train_acc,val_loss,val_acc,seconds\n";
  for (const auto& r : history) {
    char seconds[32];
    std::snprintf(seconds, sizeof seconds, "%.3f", r.seconds);
    os << r.epoch << ',' << format_double(r.train_loss) << ',' << format_double(r.train_accuracy) << ','
       << format_double(r.val_loss) << ',' << format_double(r.val_accuracy) << ',' << seconds << '\n';
  }
  return os.str();
}

void history_to_csv(const std::vector<EpochRecord>& history, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write history to '" + path.string() + "'");
  out << history_csv_text(history);
  if (!out) throw std::runtime_error("write failed for '" + path.string() + "'");
}

std::vector<EpochRecord> parse_history_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read history '" + path.string() + "'");
  std::string line;
  std::getline(in, line);
  std::vector<EpochRecord> out;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    EpochRecord r;
    char comma;
    std::istringstream row(line);
    row >> r.epoch >> comma >> r.train_loss >> comma >> r.train_accuracy >> comma >> r.val_loss >> comma >>
        r.val_accuracy >> comma >> r.seconds;
    if (!row) throw std::runtime_error("malformed history row '" + line + "'");
    out.push_back(r);
  }
  return out;
}

void confusion_to_csv(const ConfusionMatrix& cm, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write confusion matrix to '" + path.string() + "'");
  out << "true\\predicted";
  for (auto name : class_names()) out << ',' << name;
  out << '\n';
  for (std::size_t r = 0; r < kNumClasses; ++r) {
    out << class_names()[r];
    for (std::size_t c = 0; c < kNumClasses; ++c) out << ',' << cm[r][c];
    out << '\n';
  }
}

}  // namespace fer
