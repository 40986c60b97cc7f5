// fer: train, evaluate, predict with and serve facial-expression models.

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "fer/dataset.hpp"
#include "fer/model_store.hpp"
#include "fer/serve.hpp"
#include "fer/train.hpp"

namespace {

constexpr int kUsageError = 2;

struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  const auto e = s.find_last_not_of(" \t\r\n");
  return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

// Expands `--config FILE` (flat key=value lines, '#' comments) into flags
// placed ahead of the command-line flags, so explicit flags win.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  std::vector<std::string> from_file;
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i), args.begin() + static_cast<std::ptrdiff_t>(i + 2));
    } else if (args[i].starts_with("--config=")) {
      path = args[i].substr(9);
      args.erase(args.begin() + static_cast<std::ptrdiff_t>(i));
    } else {
      continue;
    }
    std::ifstream in(path);
    if (!in) throw UsageError("cannot read config file '" + path + "'");
    std::string line;
    while (std::getline(in, line)) {
      line = trim(line);
      if (line.empty() || line[0] == '#') continue;
      const auto eq = line.find('=');
      const auto key = trim(line.substr(0, eq));
      const auto value = eq == std::string::npos ? std::string("true") : trim(line.substr(eq + 1));
      if (value == "true") {
        from_file.push_back("--" + key);
      } else if (value != "false") {
        from_file.push_back("--" + key);
        from_file.push_back(value);
      }
    }
    break;
  }
  // Subcommand name stays first.
  std::vector<std::string> out;
  std::size_t insert_at = args.empty() || args[0].starts_with("-") ? 0 : 1;
  out.insert(out.end(), args.begin(), args.begin() + static_cast<std::ptrdiff_t>(insert_at));
  out.insert(out.end(), from_file.begin(), from_file.end());
  out.insert(out.end(), args.begin() + static_cast<std::ptrdiff_t>(insert_at), args.end());
  return out;
}

std::filesystem::path resolve_dataset(const std::string& flag) {
  if (!flag.empty()) return flag;
  if (auto env = fer::default_dataset_path()) return *env;
  throw UsageError("--data is required (or set FER_DATA_DIR)");
}

std::string format_optional(const std::optional<double>& v) {
  if (!v) return "   n/a";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%6.4f", *v);
  return buf;
}

struct TrainArgs {
  std::string data, out, history, checkpoints, preset = "fer-ref-v1", optimizer = "nadam";
  std::string monitor = "val_loss", class_weights = "balanced";
  std::size_t epochs = 100, batch = 64, patience = 10, workers = 1;
  double lr = 1e-3, subset = 1.0;
  std::uint64_t seed = 0;
  bool no_augment = false, timing = false;
};

int run_train(const TrainArgs& a) {
  fer::TrainConfig config;
  config.epochs = a.epochs;
  config.batch_size = a.batch;
  config.optimizer.kind = fer::parse_optimizer_kind(a.optimizer);
  config.optimizer.learning_rate = a.lr;
  config.patience = std::min(a.patience, a.epochs);
  config.monitor = fer::parse_monitor(a.monitor);
  config.seed = a.seed;
  config.subset_fraction = a.subset;
  config.augment = !a.no_augment;
  config.class_weighting = a.class_weights == "balanced";
  config.architecture = fer::preset_layers(a.preset);
  config.augment_workers = a.workers;
  config.record_timing = a.timing;
  if (!a.checkpoints.empty()) config.checkpoint_prefix = a.checkpoints;
  config.validate();

  const auto data_path = resolve_dataset(a.data);
  const auto data = fer::load_fer2013(data_path);
  std::cerr << "loaded " << data.total() << " samples (training " << data.training.size() << ", public-test "
            << data.public_test.size() << ", private-test " << data.private_test.size() << ")\n";
  if (data.total() == fer::kReferenceTotal && data.class_counts() != fer::kReferenceClassCounts) {
    std::cerr << "warning: per-class totals differ from the published FER2013 counts; check the label mapping\n";
  }

  fer::Rng init_rng = fer::Rng::derive(a.seed, {0x1417});
  auto model = fer::Model::build(config.architecture, init_rng);
  fer::TrainHooks hooks;
  hooks.on_epoch = [](const fer::EpochRecord& r, const fer::Model&) {
    std::fprintf(stderr, "epoch %3zu  loss %.4f  acc %.4f  val_loss %.4f  val_acc %.4f\n", r.epoch, r.train_loss,
                 r.train_accuracy, r.val_loss, r.val_accuracy);
  };
  auto result = fer::train(std::move(model), data.training, data.public_test, config, hooks);

  fer::save_model(result.best_model, a.out);
  const std::filesystem::path history =
      a.history.empty() ? std::filesystem::path(a.out).replace_extension(".history.csv") : std::filesystem::path(a.history);
  fer::history_to_csv(result.history, history);
  std::cerr << "best epoch " << result.best_epoch << (result.stopped_early ? " (stopped early)" : "") << "; model -> "
            << a.out << ", history -> " << history.string() << "\n";
  return 0;
}

int run_eval(const std::string& model_path, const std::string& data_flag, const std::string& split_name,
             const std::string& confusion) {
  const auto split = fer::parse_usage_name(split_name);
  const auto model = fer::load_model(model_path);
  const auto data = fer::load_fer2013(resolve_dataset(data_flag));
  const auto metrics = fer::evaluate(model, data.split(split));
  std::printf("split: %s (%zu samples)\n", std::string(fer::usage_name(split)).c_str(), metrics.total());
  std::printf("accuracy: %.6f\n", metrics.accuracy);
  std::printf("%-9s precision  recall\n", "class");
  for (std::size_t c = 0; c < fer::kNumClasses; ++c) {
    std::printf("%-9s %s     %s\n", std::string(fer::class_names()[c]).c_str(),
                format_optional(metrics.precision[c]).c_str(), format_optional(metrics.recall[c]).c_str());
  }
  if (!confusion.empty()) fer::confusion_to_csv(metrics.confusion, confusion);
  return 0;
}

int run_predict(const std::string& model_path, const std::string& image) {
  const auto model = fer::load_model(model_path);
  const auto prediction = fer::predict(model, fer::load_image_pixels(image));
  for (std::size_t c = 0; c < fer::kNumClasses; ++c) {
    std::printf("%s: %.9g\n", std::string(fer::class_names()[c]).c_str(),
                static_cast<double>(prediction.probabilities[c]));
  }
  std::printf("label: %s\n", std::string(fer::class_names()[prediction.top]).c_str());
  return 0;
}

int run_serve(const std::string& model_path, const std::string& host, int port, const std::string& static_dir) {
  auto model = std::make_shared<const fer::Model>(fer::load_model(model_path));
  std::optional<std::filesystem::path> assets;
  if (!static_dir.empty()) assets = static_dir;
  fer::InferenceService service(model, assets);
  const int bound = service.bind(host, port);
  std::cerr << "serving on http://" << host << ":" << bound << "\n";
  service.listen();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Facial expression recognition: train, evaluate, predict and serve"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  std::string config_file;
  app.add_option("--config", config_file, "Flat key=value file of flags (flags given on the command line win)");

  const std::vector<std::string> presets{"fer-ref-v1", "fer-tiny"};
  const std::vector<std::string> optimizers{"sgd", "momentum", "adam", "nadam", "adamax"};
  const std::vector<std::string> splits{"training", "public-test", "private-test"};

  TrainArgs t;
  auto* train = app.add_subcommand("train", "Train a model on FER2013");
  train->add_option("--data", t.data, "FER2013 CSV (default $FER_DATA_DIR/fer2013.csv)");
  train->add_option("--out", t.out, "Output model file")->required();
  train->add_option("--history", t.history, "History CSV (default <out>.history.csv)");
  train->add_option("--checkpoints", t.checkpoints, "Save best-loss/best-accuracy checkpoints with this prefix");
  train->add_option("--preset", t.preset, "Architecture")->check(CLI::IsMember(presets))->capture_default_str();
  train->add_option("--epochs", t.epochs)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--batch", t.batch)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--lr", t.lr)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--optimizer", t.optimizer)->check(CLI::IsMember(optimizers))->capture_default_str();
  train->add_option("--patience", t.patience)->check(CLI::PositiveNumber)->capture_default_str();
  train->add_option("--monitor", t.monitor)->check(CLI::IsMember({"val_loss", "val_accuracy"}))->capture_default_str();
  train->add_option("--subset", t.subset, "Stratified fraction of Training to use")
      ->check(CLI::Range(0.0, 1.0))
      ->capture_default_str();
  train->add_option("--seed", t.seed)->capture_default_str();
  train->add_flag("--no-augment", t.no_augment, "Disable training-time augmentation");
  train->add_option("--class-weights", t.class_weights)
      ->check(CLI::IsMember({"balanced", "none"}))
      ->capture_default_str();
  train->add_option("--workers", t.workers, "Augmentation threads")->check(CLI::PositiveNumber)->capture_default_str();
  train->add_flag("--timing", t.timing, "Record wall-clock seconds in the history");

  std::string model_path, data, split = "private-test", confusion, image, host = "0.0.0.0", static_dir;
  int port = 8080;
  auto* eval = app.add_subcommand("eval", "Evaluate a model on one split");
  eval->add_option("--model", model_path)->required();
  eval->add_option("--data", data, "FER2013 CSV (default $FER_DATA_DIR/fer2013.csv)");
  eval->add_option("--split", split)->check(CLI::IsMember(splits))->capture_default_str();
  eval->add_option("--confusion", confusion, "Write the 7x7 confusion matrix CSV here");

  auto* predict = app.add_subcommand("predict", "Classify one 48x48 image (PGM or 2304-value CSV row)");
  predict->add_option("--model", model_path)->required();
  predict->add_option("image", image)->required();

  auto* serve = app.add_subcommand("serve", "Run the HTTP inference service");
  serve->add_option("--model", model_path)->required();
  serve->add_option("--port", port)->check(CLI::Range(0, 65535))->capture_default_str();
  serve->add_option("--host", host)->capture_default_str();
  serve->add_option("--static", static_dir, "Directory of web demo assets served at /");

  try {
    auto args = expand_config(argc, argv);
    std::reverse(args.begin(), args.end());
    app.parse(args);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : kUsageError;
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n" << app.help();
    return kUsageError;
  }

  try {
    if (*train) return run_train(t);
    if (*eval) return run_eval(model_path, data, split, confusion);
    if (*predict) return run_predict(model_path, image);
    if (*serve) return run_serve(model_path, host, port, static_dir);
  } catch (const UsageError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kUsageError;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
