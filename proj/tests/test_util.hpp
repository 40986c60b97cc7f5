#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "fer/dataset.hpp"
#include "fer/layers.hpp"
#include "fer/model.hpp"
#include "fer/optim.hpp"
#include "fer/rng.hpp"
#include "fer/serve.hpp"

namespace fer::testing {

/// |a - n| / max(|a|, |n|, floor). The floor keeps components that are
/// numerically zero from turning round-off into large relative errors.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline Tensor64 random_tensor(Rng& rng, const Shape& shape, double lo = -1.0, double hi = 1.0) {
  Tensor64 t(shape);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Values bounded away from zero by `gap` (keeps ReLU kinks out of reach
/// of a finite-difference step).
inline Tensor64 random_nonzero_tensor(Rng& rng, const Shape& shape, double gap = 1e-2) {
  Tensor64 t(shape);
  for (auto& v : t.data()) {
    const double mag = rng.uniform(gap, 1.0);
    v = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

/// Distinct values spaced at least 1/size apart in random order, so every
/// pooling window has a unique maximum with margin.
inline Tensor64 random_distinct_tensor(Rng& rng, const Shape& shape) {
  Tensor64 t(shape);
  const auto order = seeded_permutation(t.size(), rng.next_u64());
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<double>(order[i]) / static_cast<double>(t.size()) - 0.5;
  return t;
}

struct GradCheckResult {
  double max_input_error = 0.0;
  double max_param_error = 0.0;
  std::size_t checked = 0;
  /// Coordinates skipped because a +-h step changed a ReLU mask or max-pool
  /// winner, where the loss is not differentiable.
  std::size_t kink_crossings = 0;
  /// Coordinates whose analytic gradient is numerically zero (below
  /// kZeroGradient) are scored by |numeric| here instead of relative error.
  double max_zero_abs_error = 0.0;
  std::size_t zero_checked = 0;

  static constexpr double kZeroGradient = 1e-12;

  double max_error() const { return std::max(max_input_error, max_param_error); }
};

/**
 * Central-difference check of a layer's backward pass in 64-bit.
 *
 * The scalar objective is sum(R * forward_train(x)) for a fixed random
 * projection R, so the upstream gradient is R. Every train-mode forward
 * reuses the same dropout stream.
 */
inline GradCheckResult check_layer_gradients(Layer<double>& layer, const Tensor64& input, std::uint64_t seed,
                                             double h = 1e-5) {
  Rng proj_rng(seed ^ 0x9e37);
  const auto out_shape = layer.output_shape(input.shape());
  const auto projection = random_tensor(proj_rng, out_shape);

  auto objective = [&](const Tensor64& x) {
    Rng rng(seed);
    LayerCache<double> cache;
    const auto y = layer.forward_train(x, rng, cache);
    double total = 0.0;
    for (std::size_t i = 0; i < y.size(); ++i) total += projection[i] * y[i];
    return total;
  };

  Rng rng(seed);
  LayerCache<double> cache;
  layer.forward_train(input, rng, cache);
  const auto grads = layer.backward(cache, projection);

  GradCheckResult result;
  Tensor64 x = input;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double saved = x[i];
    x[i] = saved + h;
    const double up = objective(x);
    x[i] = saved - h;
    const double down = objective(x);
    x[i] = saved;
    result.max_input_error = std::max(result.max_input_error, relative_error(grads.input[i], (up - down) / (2 * h)));
    ++result.checked;
  }
  auto params = layer.mutable_parameters();
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& param = *params[p];
    for (std::size_t i = 0; i < param.size(); ++i) {
      const double saved = param[i];
      param[i] = saved + h;
      const double up = objective(input);
      param[i] = saved - h;
      const double down = objective(input);
      param[i] = saved;
      result.max_param_error =
          std::max(result.max_param_error, relative_error(grads.params[p][i], (up - down) / (2 * h)));
      ++result.checked;
    }
  }
  return result;
}

/**
 * Central-difference check of a whole model under the class-weighted
 * cross-entropy. Checks 4 * `per_tensor` random input coordinates of the
 * first sample and up to `per_tensor` random coordinates of every
 * parameter tensor. Coordinates whose perturbation crosses a ReLU or
 * max-pool kink are redrawn and counted in `kink_crossings`.
 */
GradCheckResult check_model_gradients(Model64& model, const Tensor64& input, const std::vector<int>& labels,
                                      const ClassWeights& weights, std::uint64_t seed, std::size_t per_tensor,
                                      double h = 1e-5);

// Scalar reference for one parameter, written directly from the update rules.
struct ScalarOptimizerOracle {
  OptimizerConfig c;
  double m = 0, v = 0, u = 0, vel = 0;
  int t = 0;

  double step(double w, double g) {
    ++t;
    const double b1 = c.beta1, b2 = c.beta2, lr = c.learning_rate, eps = c.epsilon;
    switch (c.kind) {
      case OptimizerKind::sgd:
        return w - lr * g;
      case OptimizerKind::momentum:
        vel = c.momentum_coeff * vel + g;
        return w - lr * vel;
      case OptimizerKind::adam: {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
        return w - lr * mh / (std::sqrt(vh) + eps);
      }
      case OptimizerKind::nadam: {
        m = b1 * m + (1 - b1) * g;
        v = b2 * v + (1 - b2) * g * g;
        const double vh = v / (1 - std::pow(b2, t));
        const double num = b1 * m / (1 - std::pow(b1, t + 1)) + (1 - b1) * g / (1 - std::pow(b1, t));
        return w - lr * num / (std::sqrt(vh) + eps);
      }
      case OptimizerKind::adamax:
        m = b1 * m + (1 - b1) * g;
        u = std::max(b2 * u, std::abs(g));
        return w - (lr / (1 - std::pow(b1, t))) * m / (u + eps);
    }
    return w;
  }
};

/// Synthetic 48x48 "faces": each class has its own oriented grating and
/// blob position, plus noise. Learnable by a small CNN.
Sample synthetic_sample(int label, Rng& rng, double noise = 0.08);

/// Balanced synthetic split with `per_class` samples of every class.
DatasetSplit synthetic_split(Usage usage, std::size_t per_class, std::uint64_t seed, double noise = 0.08);

/// Writes a FER2013-format CSV with the given per-split class-balanced sizes.
void write_synthetic_csv(const std::filesystem::path& path, std::size_t train_per_class, std::size_t public_per_class,
                         std::size_t private_per_class, std::uint64_t seed);

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  TempDir();
  ~TempDir();
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

std::string read_file(const std::filesystem::path& path);

/// InferenceService on a free loopback port, listening on a background
/// thread until destruction. The constructor returns once /healthz answers.
class RunningService {
 public:
  explicit RunningService(std::shared_ptr<const Model> model,
                          std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~RunningService();
  RunningService(const RunningService&) = delete;
  RunningService& operator=(const RunningService&) = delete;
  int port() const { return port_; }

 private:
  std::unique_ptr<InferenceService> service_;
  std::thread thread_;
  int port_ = 0;
};

}  // namespace fer::testing
