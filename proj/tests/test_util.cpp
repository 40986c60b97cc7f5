#include "test_util.hpp"

#include <chrono>
#include <numbers>
#include <sstream>

#include <httplib.h>

#include "fer/optim.hpp"

namespace fer::testing {

namespace {

// ReLU/dropout masks and max-pool winners of one train-mode pass.
std::vector<double> activation_pattern(const std::vector<LayerCache<double>>& caches) {
  std::vector<double> pattern;
  for (const auto& cache : caches) {
    for (double m : cache.mask.data()) pattern.push_back(m > 0.0 ? 1.0 : 0.0);
    for (auto i : cache.argmax_index) pattern.push_back(static_cast<double>(i));
  }
  return pattern;
}

}  // namespace

GradCheckResult check_model_gradients(Model64& model, const Tensor64& input, const std::vector<int>& labels,
                                      const ClassWeights& weights, std::uint64_t seed, std::size_t per_tensor,
                                      double h) {
  Rng rng(seed);
  auto pass = model.forward(input, Mode::train, rng);
  const auto baseline = activation_pattern(pass.caches);
  const auto loss = weighted_softmax_cross_entropy(pass.logits, labels, weights);
  // Input gradient: push dlogits through every layer and keep the input term.
  Tensor64 upstream = loss.dlogits;
  for (std::size_t i = pass.caches.size(); i-- > 0;) {
    upstream = model.layer(i).backward(pass.caches[i], upstream).input;
  }
  const auto grads = model.backward(pass.caches, loss.dlogits);

  // Central difference at one coordinate; empty when either side changes the
  // activation pattern.
  auto central = [&](double& coord, const Tensor64& x) -> std::optional<double> {
    const double saved = coord;
    double side[2];
    bool smooth = true;
    for (int s = 0; s < 2; ++s) {
      coord = saved + (s == 0 ? h : -h);
      Rng r(seed);
      auto p = model.forward(x, Mode::train, r);
      smooth &= activation_pattern(p.caches) == baseline;
      side[s] = weighted_softmax_cross_entropy(p.logits, labels, weights).loss;
    }
    coord = saved;
    if (!smooth) return std::nullopt;
    return (side[0] - side[1]) / (2 * h);
  };

  GradCheckResult result;
  auto score = [&](double analytic, double numeric, double& max_error) {
    if (std::abs(analytic) < GradCheckResult::kZeroGradient) {
      result.max_zero_abs_error = std::max(result.max_zero_abs_error, std::abs(numeric));
      ++result.zero_checked;
    } else {
      max_error = std::max(max_error, relative_error(analytic, numeric));
    }
    ++result.checked;
  };
  Rng pick(seed ^ 0x51c3);
  const std::size_t max_attempts = 20;

  Tensor64 x = input;
  const std::size_t first_sample = input.size() / input.dim(0);
  const std::size_t input_checks = std::min(per_tensor * 4, first_sample);
  for (std::size_t done = 0, attempts = 0; done < input_checks && attempts < max_attempts * input_checks; ++attempts) {
    const auto i = pick.uniform_index(first_sample);
    const auto numeric = central(x[i], x);
    if (!numeric) {
      ++result.kink_crossings;
      continue;
    }
    score(upstream[i], *numeric, result.max_input_error);
    ++done;
  }

  auto params = model.mutable_parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = *params[p];
    const bool all = param.size() <= per_tensor;
    const std::size_t checks = all ? param.size() : per_tensor;
    for (std::size_t done = 0, attempts = 0; done < checks && attempts < max_attempts * checks; ++attempts) {
      const auto i = all ? done : pick.uniform_index(param.size());
      const auto numeric = central(param[i], input);
      if (!numeric) {
        ++result.kink_crossings;
        if (all) ++done;
        continue;
      }
      score(grads[p][i], *numeric, result.max_param_error);
      ++done;
    }
  }
  return result;
}

Sample synthetic_sample(int label, Rng& rng, double noise) {
  Sample s;
  s.label = label;
  const double angle = std::numbers::pi * label / 7.0;
  const double kx = std::cos(angle) * 0.35, ky = std::sin(angle) * 0.35;
  const double bx = 12.0 + 24.0 * ((label * 3) % 7) / 6.0;
  const double by = 12.0 + 24.0 * ((label * 5) % 7) / 6.0;
  const double phase = rng.uniform(0.0, 2.0 * std::numbers::pi);
  const double dx = rng.uniform(-2.0, 2.0), dy = rng.uniform(-2.0, 2.0);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double grating = 0.5 + 0.25 * std::sin(kx * xd + ky * yd + phase);
      const double r2 = (xd - bx - dx) * (xd - bx - dx) + (yd - by - dy) * (yd - by - dy);
      const double blob = 0.35 * std::exp(-r2 / 30.0);
      const double v = std::clamp(grating + blob + noise * rng.normal(), 0.0, 1.0);
      s.raw[y * kImageSide + x] = static_cast<std::uint8_t>(std::lround(v * 255.0));
    }
  }
  return s;
}

DatasetSplit synthetic_split(Usage usage, std::size_t per_class, std::uint64_t seed, double noise) {
  DatasetSplit split{usage, {}};
  Rng rng(seed);
  for (std::size_t i = 0; i < per_class; ++i)
    for (int c = 0; c < static_cast<int>(kNumClasses); ++c) split.samples.push_back(synthetic_sample(c, rng, noise));
  return split;
}

void write_synthetic_csv(const std::filesystem::path& path, std::size_t train_per_class, std::size_t public_per_class,
                         std::size_t private_per_class, std::uint64_t seed) {
  std::ofstream out(path, std::ios::binary);
  out << "emotion,pixels,Usage\n";
  std::uint64_t salt = 0;
  for (auto [usage, n] : {std::pair{Usage::training, train_per_class}, std::pair{Usage::public_test, public_per_class},
                          std::pair{Usage::private_test, private_per_class}}) {
    for (const auto& s : synthetic_split(usage, n, seed + (++salt)).samples) out << format_fer2013_row(s, usage) << '\n';
  }
}

TempDir::TempDir() {
  Rng rng(static_cast<std::uint64_t>(std::hash<std::string>{}(std::to_string(reinterpret_cast<std::uintptr_t>(this)))) ^
          static_cast<std::uint64_t>(std::chrono::steady_clock::now().time_since_epoch().count()));
  std::ostringstream name;
  name << "fer-test-" << std::hex << rng.next_u64();
  path_ = std::filesystem::temp_directory_path() / name.str();
  std::filesystem::create_directories(path_);
}

TempDir::~TempDir() {
  std::error_code ec;
  std::filesystem::remove_all(path_, ec);
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

RunningService::RunningService(std::shared_ptr<const Model> model, std::optional<std::filesystem::path> static_dir)
    : service_(std::make_unique<InferenceService>(std::move(model), std::move(static_dir))) {
  port_ = service_->bind("127.0.0.1", 0);
  if (port_ <= 0) throw std::runtime_error("cannot bind a loopback port");
  thread_ = std::thread([this] { service_->listen(); });
  httplib::Client client("127.0.0.1", port_);
  for (int attempt = 0; attempt < 500; ++attempt) {
    if (auto res = client.Get("/healthz"); res && res->status == 200) return;
    std::this_thread::sleep_for(std::chrono::milliseconds(10));
  }
  service_->stop();
  thread_.join();
  throw std::runtime_error("service did not come up");
}

RunningService::~RunningService() {
  service_->stop();
  if (thread_.joinable()) thread_.join();
}

}  // namespace fer::testing
