#pragma once

#include <array>
#include <span>
#include <string_view>
#include <vector>

#include "fer/tensor.hpp"

namespace fer {

/// Per-class loss multipliers, indexed by label.
struct ClassWeights {
  std::array<double, 7> weights{1, 1, 1, 1, 1, 1, 1};

  static ClassWeights uniform() { return {}; }
};

template <typename T>
struct LossResult {
  double loss = 0.0;
  BasicTensor<T> dlogits;
};

/**
 * Class-weighted softmax cross-entropy on logits [N, 7].
 *
 * Per-sample loss is w_y * (logsumexp(z) - z_y); the batch loss is the plain
 * mean over samples. dlogits row b is (w_y / N) * (softmax(z_b) - onehot(y)).
 */
template <typename T>
LossResult<T> weighted_softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                                             const ClassWeights& weights);

enum class OptimizerKind { sgd, momentum, adam, nadam, adamax };

std::string_view to_string(OptimizerKind kind);
OptimizerKind parse_optimizer_kind(std::string_view name);

struct OptimizerConfig {
  OptimizerKind kind = OptimizerKind::nadam;
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double momentum_coeff = 0.9;

  void validate() const;
};

/// Moment accumulators for one parameter set. `second` holds v (adam,
/// nadam) or the infinity norm u (adamax); `first` holds m, or the velocity
/// for the momentum rule.
template <typename T>
struct OptimizerState {
  std::uint64_t t = 0;
  std::vector<BasicTensor<T>> first;
  std::vector<BasicTensor<T>> second;
};

/// Applies one update to every parameter. State is lazily zero-initialized
/// on the first step; afterwards shapes must match exactly.
template <typename T>
void optimizer_step(const OptimizerConfig& config, OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                    std::span<const BasicTensor<T>> grads);

template <typename T>
class Optimizer {
 public:
  explicit Optimizer(OptimizerConfig config) : config_(config) { config_.validate(); }

  void step(std::span<BasicTensor<T>* const> params, std::span<const BasicTensor<T>> grads) {
    optimizer_step(config_, state_, params, grads);
  }

  const OptimizerConfig& config() const { return config_; }
  const OptimizerState<T>& state() const { return state_; }

 private:
  OptimizerConfig config_;
  OptimizerState<T> state_;
};

}  // namespace fer
