#include "fer/model.hpp"

#include <string>

namespace fer {

namespace {

void append_conv_block(std::vector<LayerSpec>& layers, std::size_t in, std::size_t out, int convs,
                       double dropout) {
  for (int i = 0; i < convs; ++i) {
    layers.push_back(LayerSpec::conv2d(i == 0 ? in : out, out));
    layers.push_back(LayerSpec::batchnorm(out));
    layers.push_back(LayerSpec::relu());
  }
  layers.push_back(LayerSpec::maxpool2d());
  layers.push_back(LayerSpec::dropout(dropout));
}

void append_head(std::vector<LayerSpec>& layers, std::size_t features, std::size_t hidden) {
  layers.push_back(LayerSpec::flatten());
  layers.push_back(LayerSpec::dense(features, hidden));
  layers.push_back(LayerSpec::batchnorm(hidden));
  layers.push_back(LayerSpec::relu());
  layers.push_back(LayerSpec::dropout(0.5));
  layers.push_back(LayerSpec::dense(hidden, kNumClasses));
  layers.push_back(LayerSpec::softmax());
}

}  // namespace

std::vector<std::string_view> preset_names() { return {"fer-ref-v1", "fer-tiny"}; }

std::vector<LayerSpec> preset_layers(std::string_view name) {
  std::vector<LayerSpec> layers;
  if (name == "fer-ref-v1") {
    // 48 -> 24 -> 12 -> 6 -> 3
    std::size_t in = 1;
    for (std::size_t ch : {64u, 128u, 256u, 512u}) {
      append_conv_block(layers, in, ch, 2, 0.25);
      in = ch;
    }
    append_head(layers, 3 * 3 * 512, 256);
  } else if (name == "fer-tiny") {
    // 48 -> 24 -> 12
    append_conv_block(layers, 1, 8, 1, 0.25);
    append_conv_block(layers, 8, 16, 1, 0.25);
    append_head(layers, 12 * 12 * 16, 32);
  } else {
    throw ModelError("unknown architecture preset '" + std::string(name) + "'");
  }
  return layers;
}

template <typename T>
BasicModel<T>::BasicModel(Shape input_shape, std::vector<std::unique_ptr<Layer<T>>> layers)
    : input_shape_(std::move(input_shape)), layers_(std::move(layers)) {
  if (layers_.empty()) throw ModelError("model has no layers");
  Shape shape{1};
  shape.insert(shape.end(), input_shape_.begin(), input_shape_.end());
  shape_size(shape);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const bool last = i + 1 == layers_.size();
    if (layers_[i]->kind() == LayerKind::softmax && !last) {
      throw ModelError("layer " + std::to_string(i) + ": softmax is only allowed as the final layer");
    }
    try {
      shape = layers_[i]->output_shape(shape);
    } catch (const LayerError& e) {
      throw ModelError("layer " + std::to_string(i) + " (" + std::string(to_string(layers_[i]->kind())) +
                       "): " + e.what());
    }
  }
  if (layers_.back()->kind() != LayerKind::softmax) throw ModelError("model must end in a softmax layer");
  if (shape != Shape{1, kNumClasses}) {
    throw ModelError("model output shape " + shape_string(shape) + " is not [N," +
                     std::to_string(kNumClasses) + "]");
  }
}

template <typename T>
BasicModel<T> BasicModel<T>::build(const std::vector<LayerSpec>& specs, Rng& rng, Shape input_shape) {
  std::vector<std::unique_ptr<Layer<T>>> layers;
  for (std::size_t i = 0; i < specs.size(); ++i) {
    try {
      layers.push_back(make_layer<T>(specs[i], rng));
    } catch (const LayerError& e) {
      throw ModelError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  return BasicModel(std::move(input_shape), std::move(layers));
}

template <typename T>
BasicModel<T>::BasicModel(const BasicModel& other) : input_shape_(other.input_shape_) {
  layers_.reserve(other.layers_.size());
  for (const auto& layer : other.layers_) layers_.push_back(layer->clone());
}

template <typename T>
BasicModel<T>& BasicModel<T>::operator=(const BasicModel& other) {
  if (this != &other) {
    BasicModel copy(other);
    *this = std::move(copy);
  }
  return *this;
}

template <typename T>
std::vector<LayerSpec> BasicModel<T>::specs() const {
  std::vector<LayerSpec> out;
  for (const auto& layer : layers_) out.push_back(layer->spec());
  return out;
}

template <typename T>
void BasicModel<T>::check_input(const TensorT& batch) const {
  Shape expected{batch.dim(0)};
  expected.insert(expected.end(), input_shape_.begin(), input_shape_.end());
  if (batch.shape() != expected) {
    throw ModelError("layer 0: expected input " + shape_string(expected) + ", got " +
                     shape_string(batch.shape()));
  }
}

template <typename T>
BasicTensor<T> BasicModel<T>::infer_logits(const TensorT& batch) const {
  check_input(batch);
  TensorT x = batch;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    try {
      x = layers_[i]->infer(x);
    } catch (const LayerError& e) {
      throw ModelError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  return x;
}

template <typename T>
BasicTensor<T> BasicModel<T>::infer(const TensorT& batch) const {
  return softmax(infer_logits(batch));
}

template <typename T>
ForwardPass<T> BasicModel<T>::forward(const TensorT& batch, Mode mode, Rng& rng) {
  ForwardPass<T> pass;
  if (mode == Mode::infer) {
    pass.logits = infer_logits(batch);
    pass.probs = softmax(pass.logits);
    return pass;
  }
  check_input(batch);
  pass.caches.resize(layers_.size() - 1);
  TensorT x = batch;
  for (std::size_t i = 0; i + 1 < layers_.size(); ++i) {
    try {
      x = layers_[i]->forward_train(x, rng, pass.caches[i]);
    } catch (const LayerError& e) {
      throw ModelError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  pass.logits = std::move(x);
  pass.probs = softmax(pass.logits);
  return pass;
}

template <typename T>
std::vector<BasicTensor<T>> BasicModel<T>::backward(const std::vector<LayerCache<T>>& caches,
                                                    const TensorT& dlogits) const {
  if (caches.size() + 1 != layers_.size()) {
    throw ModelError("backward: missing caches (run a train-mode forward first)");
  }
  std::vector<std::vector<TensorT>> per_layer(layers_.size());
  TensorT upstream = dlogits;
  for (std::size_t i = caches.size(); i-- > 0;) {
    try {
      auto grads = layers_[i]->backward(caches[i], upstream);
      upstream = std::move(grads.input);
      per_layer[i] = std::move(grads.params);
    } catch (const LayerError& e) {
      throw ModelError("layer " + std::to_string(i) + ": " + e.what());
    }
  }
  std::vector<TensorT> out;
  for (auto& grads : per_layer)
    for (auto& g : grads) out.push_back(std::move(g));
  return out;
}

template <typename T>
std::vector<const BasicTensor<T>*> BasicModel<T>::parameters() const {
  std::vector<const TensorT*> out;
  for (const auto& layer : layers_)
    for (auto* p : layer->parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::vector<BasicTensor<T>*> BasicModel<T>::mutable_parameters() {
  std::vector<TensorT*> out;
  for (auto& layer : layers_)
    for (auto* p : layer->mutable_parameters()) out.push_back(p);
  return out;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  for (auto* p : parameters()) n += p->size();
  return n;
}

template class BasicModel<float>;
template class BasicModel<double>;

}  // namespace fer
