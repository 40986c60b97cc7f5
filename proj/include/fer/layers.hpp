#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "fer/rng.hpp"
#include "fer/tensor.hpp"

namespace fer {

enum class Mode { train, infer };
enum class Padding { same, valid };
enum class LayerKind { conv2d, batchnorm, relu, maxpool2d, dropout, flatten, dense, softmax };

std::string_view to_string(LayerKind kind);
std::string_view to_string(Padding padding);
LayerKind parse_layer_kind(std::string_view name);
Padding parse_padding(std::string_view name);

/// Raised when a layer receives an input (or cache) it cannot process.
class LayerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Hyperparameters of one layer. Only the fields relevant to `kind` are used.
struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  // conv2d
  std::size_t in_channels = 0;
  std::size_t out_channels = 0;
  std::size_t kernel_h = 3;
  std::size_t kernel_w = 3;
  std::size_t stride = 1;  // conv2d and maxpool2d
  Padding padding = Padding::same;
  // batchnorm
  std::size_t channels = 0;
  double epsilon = 1e-5;
  double momentum = 0.9;
  // maxpool2d
  std::size_t window = 2;
  // dropout
  double rate = 0.0;
  // dense
  std::size_t in_features = 0;
  std::size_t out_features = 0;

  static LayerSpec conv2d(std::size_t in, std::size_t out, std::size_t kernel = 3,
                          std::size_t stride = 1, Padding padding = Padding::same);
  static LayerSpec batchnorm(std::size_t channels, double epsilon = 1e-5, double momentum = 0.9);
  static LayerSpec relu();
  static LayerSpec maxpool2d(std::size_t window = 2, std::size_t stride = 2);
  static LayerSpec dropout(double rate);
  static LayerSpec flatten();
  static LayerSpec dense(std::size_t in, std::size_t out);
  static LayerSpec softmax();

  bool operator==(const LayerSpec&) const = default;
};

/**
 * State captured by a train-mode forward pass and consumed by backward.
 *
 * A cache is tied to the layer instance that produced it and to that
 * layer's parameter version; backward rejects caches from another layer or
 * from before the last parameter update.
 */
template <typename T>
struct LayerCache {
  const void* owner = nullptr;
  std::uint64_t version = 0;
  Shape input_shape;
  Shape output_shape;
  BasicTensor<T> saved;  // conv/dense input, batchnorm x-hat, softmax output
  BasicTensor<T> mask;   // relu positivity mask, dropout scaled keep-mask
  std::vector<std::size_t> argmax_index;  // maxpool: flat input index per output
  std::vector<T> inv_std;                 // batchnorm: per-channel 1/sqrt(var+eps)
};

template <typename T>
struct LayerGradients {
  BasicTensor<T> input;
  std::vector<BasicTensor<T>> params;  // aligned with Layer::parameters()
};

template <typename T>
class Layer {
 public:
  using TensorT = BasicTensor<T>;
  using NamedTensor = std::pair<std::string, TensorT*>;
  using ConstNamedTensor = std::pair<std::string, const TensorT*>;

  virtual ~Layer() = default;

  virtual LayerSpec spec() const = 0;
  LayerKind kind() const { return spec().kind; }

  /// Output shape (batch dimension included) for an input of `input` shape.
  /// Throws LayerError when the shapes do not compose.
  virtual Shape output_shape(const Shape& input) const = 0;

  /// Inference-mode forward. Never mutates the layer.
  virtual TensorT infer(const TensorT& x) const = 0;

  /// Training-mode forward. Fills `cache`; batchnorm also updates its
  /// running statistics here.
  virtual TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) = 0;

  virtual LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const = 0;

  /// Trainable parameters.
  virtual std::vector<const TensorT*> parameters() const { return {}; }
  /// Trainable parameters for update. Invalidates outstanding caches.
  std::vector<TensorT*> mutable_parameters() {
    ++version_;
    return collect_mutable(parameters());
  }

  /// Every persisted tensor (parameters plus running statistics), named, in
  /// serialization order.
  virtual std::vector<ConstNamedTensor> state() const { return {}; }
  std::vector<NamedTensor> mutable_state() {
    ++version_;
    std::vector<NamedTensor> out;
    for (auto& [name, t] : state()) out.emplace_back(name, const_cast<TensorT*>(t));
    return out;
  }

  virtual std::unique_ptr<Layer> clone() const = 0;

 protected:
  Layer() = default;
  Layer(const Layer&) : version_(0) {}
  Layer& operator=(const Layer&) = delete;

  void stamp(LayerCache<T>& cache, const Shape& in, const Shape& out) const {
    cache.owner = this;
    cache.version = version_;
    cache.input_shape = in;
    cache.output_shape = out;
  }
  void check_cache(const LayerCache<T>& cache, const TensorT& upstream) const;

 private:
  static std::vector<TensorT*> collect_mutable(const std::vector<const TensorT*>& params) {
    std::vector<TensorT*> out;
    for (auto* p : params) out.push_back(const_cast<TensorT*>(p));
    return out;
  }

  std::uint64_t version_ = 0;
};

/// Normal(0, 2/fan_in) draws.
template <typename T>
BasicTensor<T> he_normal_init(Rng& rng, const Shape& shape, std::size_t fan_in);

/// Cross-correlation (no kernel flip) with per-output-channel bias.
template <typename T>
class Conv2D final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  Conv2D(TensorT kernels, TensorT bias, std::size_t stride, Padding padding);
  /// He-normal kernels, zero bias.
  static Conv2D create(const LayerSpec& spec, Rng& rng);

  LayerSpec spec() const override;
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::vector<const TensorT*> parameters() const override { return {&kernels_, &bias_}; }
  std::vector<typename Layer<T>::ConstNamedTensor> state() const override {
    return {{"kernels", &kernels_}, {"bias", &bias_}};
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Conv2D>(*this); }

  const TensorT& kernels() const { return kernels_; }
  const TensorT& bias() const { return bias_; }
  std::size_t pad() const { return pad_; }

 private:
  TensorT kernels_;  // [out, in, kh, kw]
  TensorT bias_;     // [out]
  std::size_t stride_;
  Padding padding_;
  std::size_t pad_;
};

/// Per-channel normalization over batch and spatial positions. Accepts
/// [N, C, H, W] or [N, C] inputs.
template <typename T>
class BatchNorm final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  BatchNorm(std::size_t channels, double epsilon = 1e-5, double momentum = 0.9);

  LayerSpec spec() const override;
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::vector<const TensorT*> parameters() const override { return {&gamma_, &beta_}; }
  std::vector<typename Layer<T>::ConstNamedTensor> state() const override {
    return {{"gamma", &gamma_}, {"beta", &beta_}, {"running_mean", &running_mean_},
            {"running_var", &running_var_}};
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<BatchNorm>(*this); }

  TensorT& gamma() { return gamma_; }
  TensorT& beta() { return beta_; }
  TensorT& running_mean() { return running_mean_; }
  TensorT& running_var() { return running_var_; }
  const TensorT& running_mean() const { return running_mean_; }
  const TensorT& running_var() const { return running_var_; }

 private:
  TensorT gamma_, beta_, running_mean_, running_var_;
  double epsilon_;
  double momentum_;
};

/// max(0, x); the gradient at exactly 0 is 0.
template <typename T>
class ReLU final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  LayerSpec spec() const override { return LayerSpec::relu(); }
  Shape output_shape(const Shape& input) const override { return input; }
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<ReLU>(*this); }
};

/// Max pooling over [N, C, H, W]. Trailing rows/columns that do not fill a
/// window are dropped; ties go to the first position in row-major order.
template <typename T>
class MaxPool2D final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  explicit MaxPool2D(std::size_t window = 2, std::size_t stride = 2);
  LayerSpec spec() const override { return LayerSpec::maxpool2d(window_, stride_); }
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<MaxPool2D>(*this); }

 private:
  TensorT pool(const TensorT& x, std::vector<std::size_t>* argmax_index) const;
  std::size_t window_;
  std::size_t stride_;
};

/// Inverted dropout: train mode zeroes with probability `rate` and scales
/// survivors by 1/(1-rate); infer mode is the identity.
template <typename T>
class Dropout final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  explicit Dropout(double rate);
  LayerSpec spec() const override { return LayerSpec::dropout(rate_); }
  Shape output_shape(const Shape& input) const override { return input; }
  TensorT infer(const TensorT& x) const override { return x; }
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dropout>(*this); }

 private:
  double rate_;
};

template <typename T>
class Flatten final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  LayerSpec spec() const override { return LayerSpec::flatten(); }
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Flatten>(*this); }
};

/// y = x W + b over [N, in] inputs.
template <typename T>
class Dense final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  Dense(TensorT weights, TensorT bias);
  /// He-normal weights, zero bias.
  static Dense create(const LayerSpec& spec, Rng& rng);

  LayerSpec spec() const override;
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::vector<const TensorT*> parameters() const override { return {&weights_, &bias_}; }
  std::vector<typename Layer<T>::ConstNamedTensor> state() const override {
    return {{"weights", &weights_}, {"bias", &bias_}};
  }
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  TensorT weights_;  // [in, out]
  TensorT bias_;     // [out]
};

/// Row-wise softmax over [N, K] logits.
template <typename T>
class Softmax final : public Layer<T> {
 public:
  using TensorT = BasicTensor<T>;
  LayerSpec spec() const override { return LayerSpec::softmax(); }
  Shape output_shape(const Shape& input) const override;
  TensorT infer(const TensorT& x) const override;
  TensorT forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) override;
  LayerGradients<T> backward(const LayerCache<T>& cache, const TensorT& upstream) const override;
  std::unique_ptr<Layer<T>> clone() const override { return std::make_unique<Softmax>(*this); }
};

/// Max-subtracted softmax over the rows of a rank-2 tensor.
template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits);

/// Instantiates a layer from its spec. Weighted layers draw He-normal
/// weights from `rng`; batchnorm starts at gamma 1, beta 0, running
/// mean 0, running variance 1.
template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, Rng& rng);

}  // namespace fer
