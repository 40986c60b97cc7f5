#include "fer/optim.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>
#include <string>

namespace fer {

template <typename T>
LossResult<T> weighted_softmax_cross_entropy(const BasicTensor<T>& logits, std::span<const int> labels,
                                             const ClassWeights& weights) {
  if (logits.rank() != 2) throw TensorError("cross-entropy expects logits [N, K]");
  const auto n = logits.dim(0), k = logits.dim(1);
  if (k > weights.weights.size()) throw TensorError("cross-entropy: more classes than class weights");
  if (labels.size() != n) {
    throw TensorError("cross-entropy: " + std::to_string(labels.size()) + " labels for a batch of " +
                      std::to_string(n));
  }
  LossResult<T> result{0.0, BasicTensor<T>(logits.shape())};
  double total = 0.0;
  for (std::size_t b = 0; b < n; ++b) {
    const int y = labels[b];
    if (y < 0 || static_cast<std::size_t>(y) >= k) {
      throw TensorError("cross-entropy: label " + std::to_string(y) + " outside 0.." + std::to_string(k - 1));
    }
    const T* row = logits.data().data() + b * k;
    T* grad = result.dlogits.data().data() + b * k;
    const T peak = *std::max_element(row, row + k);
    T denom = T(0);
    for (std::size_t j = 0; j < k; ++j) denom += std::exp(row[j] - peak);
    const T log_denom = std::log(denom);
    const T w = static_cast<T>(weights.weights[static_cast<std::size_t>(y)]);
    total += static_cast<double>(w * (log_denom - (row[y] - peak)));
    const T coeff = w / static_cast<T>(n);
    for (std::size_t j = 0; j < k; ++j) {
      const T p = std::exp(row[j] - peak - log_denom);
      grad[j] = coeff * (p - (j == static_cast<std::size_t>(y) ? T(1) : T(0)));
    }
  }
  result.loss = total / static_cast<double>(n);
  if (!std::isfinite(result.loss)) throw NonFiniteError("cross-entropy: non-finite loss");
  result.dlogits.require_finite("cross-entropy gradient");
  return result;
}

std::string_view to_string(OptimizerKind kind) {
  switch (kind) {
    case OptimizerKind::sgd: return "sgd";
    case OptimizerKind::momentum: return "momentum";
    case OptimizerKind::adam: return "adam";
    case OptimizerKind::nadam: return "nadam";
    case OptimizerKind::adamax: return "adamax";
  }
  return "unknown";
}

OptimizerKind parse_optimizer_kind(std::string_view name) {
  for (auto k : {OptimizerKind::sgd, OptimizerKind::momentum, OptimizerKind::adam, OptimizerKind::nadam,
                 OptimizerKind::adamax}) {
    if (to_string(k) == name) return k;
  }
  throw std::invalid_argument("unknown optimizer '" + std::string(name) + "'");
}

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw std::invalid_argument("optimizer: learning rate must be positive");
  if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("optimizer: beta1 must lie in [0,1)");
  if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("optimizer: beta2 must lie in [0,1)");
  if (!(epsilon > 0.0)) throw std::invalid_argument("optimizer: epsilon must be positive");
  if (!(momentum_coeff >= 0.0 && momentum_coeff < 1.0)) {
    throw std::invalid_argument("optimizer: momentum coefficient must lie in [0,1)");
  }
}

template <typename T>
void optimizer_step(const OptimizerConfig& config, OptimizerState<T>& state, std::span<BasicTensor<T>* const> params,
                    std::span<const BasicTensor<T>> grads) {
  if (params.size() != grads.size()) {
    throw TensorError("optimizer: " + std::to_string(grads.size()) + " gradients for " +
                      std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (params[i]->shape() != grads[i].shape()) {
      throw TensorError("optimizer: gradient " + std::to_string(i) + " has shape " +
                        shape_string(grads[i].shape()) + ", parameter has " + shape_string(params[i]->shape()));
    }
    grads[i].require_finite("optimizer gradient");
  }
  if (state.t == 0 && state.first.empty()) {
    for (auto* p : params) {
      state.first.emplace_back(p->shape());
      state.second.emplace_back(p->shape());
    }
  }
  if (state.first.size() != params.size()) throw TensorError("optimizer: state does not match parameter set");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.first[i].shape() != params[i]->shape()) throw TensorError("optimizer: state shape mismatch");
  }

  state.t += 1;
  const T lr = static_cast<T>(config.learning_rate);
  const T b1 = static_cast<T>(config.beta1);
  const T b2 = static_cast<T>(config.beta2);
  const T eps = static_cast<T>(config.epsilon);
  const T mu = static_cast<T>(config.momentum_coeff);
  const auto t = static_cast<T>(state.t);
  const T bias1 = T(1) - std::pow(b1, t);
  const T bias1_next = T(1) - std::pow(b1, t + T(1));
  const T bias2 = T(1) - std::pow(b2, t);

  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i]->data();
    auto g = grads[i].data();
    auto m = state.first[i].data();
    auto v = state.second[i].data();
    const std::size_t n = w.size();
    switch (config.kind) {
      case OptimizerKind::sgd:
        for (std::size_t j = 0; j < n; ++j) w[j] -= lr * g[j];
        break;
      case OptimizerKind::momentum:
        for (std::size_t j = 0; j < n; ++j) {
          m[j] = mu * m[j] + g[j];
          w[j] -= lr * m[j];
        }
        break;
      case OptimizerKind::adam:
        for (std::size_t j = 0; j < n; ++j) {
          m[j] = b1 * m[j] + (T(1) - b1) * g[j];
          v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
          const T m_hat = m[j] / bias1;
          const T v_hat = v[j] / bias2;
          w[j] -= lr * m_hat / (std::sqrt(v_hat) + eps);
        }
        break;
      case OptimizerKind::nadam:
        for (std::size_t j = 0; j < n; ++j) {
          m[j] = b1 * m[j] + (T(1) - b1) * g[j];
          v[j] = b2 * v[j] + (T(1) - b2) * g[j] * g[j];
          const T v_hat = v[j] / bias2;
          const T nesterov = b1 * m[j] / bias1_next + (T(1) - b1) * g[j] / bias1;
          w[j] -= lr * nesterov / (std::sqrt(v_hat) + eps);
        }
        break;
      case OptimizerKind::adamax:
        for (std::size_t j = 0; j < n; ++j) {
          m[j] = b1 * m[j] + (T(1) - b1) * g[j];
          v[j] = std::max(b2 * v[j], std::abs(g[j]));
          w[j] -= (lr / bias1) * m[j] / (v[j] + eps);
        }
        break;
    }
    params[i]->require_finite("optimizer update");
  }
}

template LossResult<float> weighted_softmax_cross_entropy<float>(const BasicTensor<float>&, std::span<const int>,
                                                                 const ClassWeights&);
template LossResult<double> weighted_softmax_cross_entropy<double>(const BasicTensor<double>&, std::span<const int>,
                                                                   const ClassWeights&);
template void optimizer_step<float>(const OptimizerConfig&, OptimizerState<float>&, std::span<BasicTensor<float>* const>,
                                    std::span<const BasicTensor<float>>);
template void optimizer_step<double>(const OptimizerConfig&, OptimizerState<double>&,
                                     std::span<BasicTensor<double>* const>, std::span<const BasicTensor<double>>);

}  // namespace fer
