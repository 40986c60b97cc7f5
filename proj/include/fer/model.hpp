#pragma once

#include <memory>
#include <string_view>
#include <vector>

#include "fer/layers.hpp"

namespace fer {

inline constexpr std::size_t kNumClasses = 7;
inline constexpr std::size_t kImageSide = 48;
inline constexpr std::size_t kImagePixels = kImageSide * kImageSide;

/// Raised when a layer stack does not compose or a pass is misused.
class ModelError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Named layer stacks. "fer-ref-v1" is the full reference network,
/// "fer-tiny" a small network for tests and desk-scale runs.
std::vector<LayerSpec> preset_layers(std::string_view name);
std::vector<std::string_view> preset_names();

template <typename T>
struct ForwardPass {
  BasicTensor<T> logits;
  BasicTensor<T> probs;
  /// One cache per layer below the terminal softmax; empty in infer mode.
  std::vector<LayerCache<T>> caches;
};

/**
 * Ordered layer stack ending in a single softmax over kNumClasses.
 *
 * Construction checks that the layers compose for an input of
 * [N, input_shape...] and reports the first breaking layer by index. Copies
 * are deep.
 */
template <typename T>
class BasicModel {
 public:
  using TensorT = BasicTensor<T>;

  BasicModel(Shape input_shape, std::vector<std::unique_ptr<Layer<T>>> layers);
  /// He-normal initialized model from layer specs.
  static BasicModel build(const std::vector<LayerSpec>& specs, Rng& rng,
                          Shape input_shape = {1, kImageSide, kImageSide});

  BasicModel(const BasicModel& other);
  BasicModel& operator=(const BasicModel& other);
  BasicModel(BasicModel&&) noexcept = default;
  BasicModel& operator=(BasicModel&&) noexcept = default;

  const Shape& input_shape() const noexcept { return input_shape_; }
  std::size_t num_layers() const noexcept { return layers_.size(); }
  const Layer<T>& layer(std::size_t i) const { return *layers_.at(i); }
  Layer<T>& layer(std::size_t i) { return *layers_.at(i); }
  std::vector<LayerSpec> specs() const;

  /// Inference-mode class probabilities, [N, 7].
  TensorT infer(const TensorT& batch) const;
  /// Inference-mode pre-softmax scores, [N, 7].
  TensorT infer_logits(const TensorT& batch) const;

  /// Full forward pass. In train mode caches are kept, dropout draws from
  /// `rng` and batchnorm updates its running statistics.
  ForwardPass<T> forward(const TensorT& batch, Mode mode, Rng& rng);

  /// Gradients for every trainable tensor, aligned with parameters().
  std::vector<TensorT> backward(const std::vector<LayerCache<T>>& caches, const TensorT& dlogits) const;

  std::vector<const TensorT*> parameters() const;
  /// Invalidates outstanding caches.
  std::vector<TensorT*> mutable_parameters();
  std::size_t parameter_count() const;

  /// Same architecture and state converted to another scalar type.
  template <typename U>
  BasicModel<U> cast() const;

 private:
  void check_input(const TensorT& batch) const;

  Shape input_shape_;
  std::vector<std::unique_ptr<Layer<T>>> layers_;
};

using Model = BasicModel<float>;
using Model64 = BasicModel<double>;

template <typename T>
template <typename U>
BasicModel<U> BasicModel<T>::cast() const {
  Rng unused(0);
  std::vector<std::unique_ptr<Layer<U>>> layers;
  for (const auto& layer : layers_) {
    auto copy = make_layer<U>(layer->spec(), unused);
    auto dst = copy->mutable_state();
    auto src = layer->state();
    for (std::size_t i = 0; i < src.size(); ++i) *dst[i].second = tensor_cast<U>(*src[i].second);
    layers.push_back(std::move(copy));
  }
  return BasicModel<U>(input_shape_, std::move(layers));
}

}  // namespace fer
