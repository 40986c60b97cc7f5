#include "fer/layers.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace fer {

std::string_view to_string(LayerKind kind) {
  switch (kind) {
    case LayerKind::conv2d: return "conv2d";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::relu: return "relu";
    case LayerKind::maxpool2d: return "maxpool2d";
    case LayerKind::dropout: return "dropout";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::softmax: return "softmax";
  }
  return "unknown";
}

std::string_view to_string(Padding padding) { return padding == Padding::same ? "same" : "valid"; }

LayerKind parse_layer_kind(std::string_view name) {
  for (auto k : {LayerKind::conv2d, LayerKind::batchnorm, LayerKind::relu, LayerKind::maxpool2d,
                 LayerKind::dropout, LayerKind::flatten, LayerKind::dense, LayerKind::softmax}) {
    if (to_string(k) == name) return k;
  }
  throw LayerError("unknown layer kind '" + std::string(name) + "'");
}

Padding parse_padding(std::string_view name) {
  if (name == "same") return Padding::same;
  if (name == "valid") return Padding::valid;
  throw LayerError("unknown padding '" + std::string(name) + "'");
}

LayerSpec LayerSpec::conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
                            Padding padding) {
  LayerSpec s;
  s.kind = LayerKind::conv2d;
  s.in_channels = in;
  s.out_channels = out;
  s.kernel_h = s.kernel_w = kernel;
  s.stride = stride;
  s.padding = padding;
  return s;
}

LayerSpec LayerSpec::batchnorm(std::size_t channels, double epsilon, double momentum) {
  LayerSpec s;
  s.kind = LayerKind::batchnorm;
  s.channels = channels;
  s.epsilon = epsilon;
  s.momentum = momentum;
  return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::maxpool2d(std::size_t window, std::size_t stride) {
  LayerSpec s;
  s.kind = LayerKind::maxpool2d;
  s.window = window;
  s.stride = stride;
  return s;
}

LayerSpec LayerSpec::dropout(double rate) {
  LayerSpec s;
  s.kind = LayerKind::dropout;
  s.rate = rate;
  return s;
}

LayerSpec LayerSpec::flatten() {
  LayerSpec s;
  s.kind = LayerKind::flatten;
  return s;
}

LayerSpec LayerSpec::dense(std::size_t in, std::size_t out) {
  LayerSpec s;
  s.kind = LayerKind::dense;
  s.in_features = in;
  s.out_features = out;
  return s;
}

LayerSpec LayerSpec::softmax() {
  LayerSpec s;
  s.kind = LayerKind::softmax;
  return s;
}

template <typename T>
void Layer<T>::check_cache(const LayerCache<T>& cache, const TensorT& upstream) const {
  if (cache.owner != this) throw LayerError("backward: cache was produced by a different layer");
  if (cache.version != version_) throw LayerError("backward: stale cache (parameters changed since forward)");
  if (upstream.shape() != cache.output_shape) {
    throw LayerError("backward: upstream shape " + shape_string(upstream.shape()) +
                     " does not match forward output " + shape_string(cache.output_shape));
  }
}

template <typename T>
BasicTensor<T> he_normal_init(Rng& rng, const Shape& shape, std::size_t fan_in) {
  if (fan_in == 0) throw LayerError("he_normal_init: fan_in must be positive");
  return sample_normal<T>(rng, shape, 0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
}

namespace {

std::string describe(std::string_view what, const Shape& shape) {
  return std::string(what) + " got input shape " + shape_string(shape);
}

// Gathers receptive fields of one image [C, H, W] into cols [C*kh*kw, oh*ow].
template <typename T>
void im2col(const T* image, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
            std::size_t ow, T* cols) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, T(0));
            continue;
          }
          const T* src = image + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            row[oy * ow + ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(width))
                                    ? T(0)
                                    : src[static_cast<std::size_t>(ix)];
          }
        }
      }
    }
  }
}

// Scatter-adds cols back onto the image layout; inverse routing of im2col.
template <typename T>
void col2im(const T* cols, std::size_t channels, std::size_t height, std::size_t width,
            std::size_t kh, std::size_t kw, std::size_t stride, std::size_t pad, std::size_t oh,
            std::size_t ow, T* image) {
  for (std::size_t c = 0; c < channels; ++c) {
    for (std::size_t ki = 0; ki < kh; ++ki) {
      for (std::size_t kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * oh * ow;
        for (std::size_t oy = 0; oy < oh; ++oy) {
          const auto iy = static_cast<std::ptrdiff_t>(oy * stride + ki) - static_cast<std::ptrdiff_t>(pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(height)) continue;
          T* dst = image + (c * height + static_cast<std::size_t>(iy)) * width;
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const auto ix = static_cast<std::ptrdiff_t>(ox * stride + kj) - static_cast<std::ptrdiff_t>(pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(width)) dst[ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

// Channel layout helper shared by batchnorm: [N, C, S] with S the product
// of the spatial dims (1 for rank-2 input).
struct ChannelLayout {
  std::size_t batch = 0, channels = 0, spatial = 1;
};

ChannelLayout channel_layout(const Shape& shape, std::size_t expected_channels) {
  if (shape.size() != 2 && shape.size() != 4) {
    throw LayerError(describe("batchnorm expects [N,C] or [N,C,H,W];", shape));
  }
  ChannelLayout l;
  l.batch = shape[0];
  l.channels = shape[1];
  if (shape.size() == 4) l.spatial = shape[2] * shape[3];
  if (l.channels != expected_channels) {
    throw LayerError(describe("batchnorm has " + std::to_string(expected_channels) + " channels but", shape));
  }
  return l;
}

}  // namespace

// ---------------------------------------------------------------- Conv2D

template <typename T>
Conv2D<T>::Conv2D(TensorT kernels, TensorT bias, std::size_t stride, Padding padding)
    : kernels_(std::move(kernels)), bias_(std::move(bias)), stride_(stride), padding_(padding), pad_(0) {
  if (kernels_.rank() != 4) throw LayerError("conv2d: kernels must be [out, in, kh, kw]");
  if (bias_.rank() != 1 || bias_.dim(0) != kernels_.dim(0)) {
    throw LayerError("conv2d: bias must be [out] matching kernels");
  }
  if (stride_ == 0) throw LayerError("conv2d: stride must be positive");
  if (padding_ == Padding::same) {
    if (kernels_.dim(2) % 2 == 0 || kernels_.dim(3) % 2 == 0) {
      throw LayerError("conv2d: 'same' padding requires odd kernel extents");
    }
    pad_ = (kernels_.dim(2) - 1) / 2;
    if (kernels_.dim(2) != kernels_.dim(3)) throw LayerError("conv2d: 'same' padding requires square kernels");
  }
}

template <typename T>
Conv2D<T> Conv2D<T>::create(const LayerSpec& spec, Rng& rng) {
  if (spec.in_channels == 0 || spec.out_channels == 0 || spec.kernel_h == 0 || spec.kernel_w == 0) {
    throw LayerError("conv2d: channel counts and kernel extents must be positive");
  }
  const Shape shape{spec.out_channels, spec.in_channels, spec.kernel_h, spec.kernel_w};
  auto kernels = he_normal_init<T>(rng, shape, spec.in_channels * spec.kernel_h * spec.kernel_w);
  return Conv2D(std::move(kernels), TensorT({spec.out_channels}), spec.stride, spec.padding);
}

template <typename T>
LayerSpec Conv2D<T>::spec() const {
  LayerSpec s = LayerSpec::conv2d(kernels_.dim(1), kernels_.dim(0), kernels_.dim(2), stride_, padding_);
  s.kernel_w = kernels_.dim(3);
  return s;
}

template <typename T>
Shape Conv2D<T>::output_shape(const Shape& input) const {
  if (input.size() != 4) throw LayerError(describe("conv2d expects [N,C,H,W];", input));
  if (input[1] != kernels_.dim(1)) {
    throw LayerError(describe("conv2d expects " + std::to_string(kernels_.dim(1)) + " input channels;", input));
  }
  const auto kh = kernels_.dim(2), kw = kernels_.dim(3);
  if (input[2] + 2 * pad_ < kh || input[3] + 2 * pad_ < kw) {
    throw LayerError(describe("conv2d spatial extent smaller than kernel;", input));
  }
  return {input[0], kernels_.dim(0), (input[2] + 2 * pad_ - kh) / stride_ + 1,
          (input[3] + 2 * pad_ - kw) / stride_ + 1};
}

template <typename T>
BasicTensor<T> Conv2D<T>::infer(const TensorT& x) const {
  const auto out_shape = output_shape(x.shape());
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = out_shape[1], oh = out_shape[2], ow = out_shape[3];
  const auto kh = kernels_.dim(2), kw = kernels_.dim(3);
  const auto patch = c * kh * kw, positions = oh * ow;
  TensorT out(out_shape);
  std::vector<T> cols(patch * positions);
  for (std::size_t b = 0; b < n; ++b) {
    im2col(x.data().data() + b * c * h * w, c, h, w, kh, kw, stride_, pad_, oh, ow, cols.data());
    std::span<T> dst = out.data().subspan(b * o * positions, o * positions);
    for (std::size_t oc = 0; oc < o; ++oc)
      std::fill_n(dst.begin() + static_cast<std::ptrdiff_t>(oc * positions), positions, bias_[oc]);
    gemm<T>(false, false, o, positions, patch, kernels_.data(), cols, dst, true);
  }
  out.require_finite("conv2d forward");
  return out;
}

template <typename T>
BasicTensor<T> Conv2D<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  auto out = infer(x);
  this->stamp(cache, x.shape(), out.shape());
  cache.saved = x;
  return out;
}

template <typename T>
LayerGradients<T> Conv2D<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  const auto& x = cache.saved;
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const auto o = upstream.dim(1), oh = upstream.dim(2), ow = upstream.dim(3);
  const auto kh = kernels_.dim(2), kw = kernels_.dim(3);
  const auto patch = c * kh * kw, positions = oh * ow;

  LayerGradients<T> grads{TensorT(x.shape()), {TensorT(kernels_.shape()), TensorT(bias_.shape())}};
  auto& dkernels = grads.params[0];
  auto& dbias = grads.params[1];
  std::vector<T> cols(patch * positions);
  std::vector<T> dcols(patch * positions);
  for (std::size_t b = 0; b < n; ++b) {
    std::span<const T> dy = upstream.data().subspan(b * o * positions, o * positions);
    im2col(x.data().data() + b * c * h * w, c, h, w, kh, kw, stride_, pad_, oh, ow, cols.data());
    // dK[o, patch] += dY[o, pos] * cols[patch, pos]^T
    gemm<T>(false, true, o, patch, positions, dy, cols, dkernels.data(), true);
    // dcols[patch, pos] = K[o, patch]^T * dY[o, pos]
    gemm<T>(true, false, patch, positions, o, kernels_.data(), dy, dcols, false);
    col2im(dcols.data(), c, h, w, kh, kw, stride_, pad_, oh, ow, grads.input.data().data() + b * c * h * w);
    for (std::size_t oc = 0; oc < o; ++oc) {
      T acc = T(0);
      for (std::size_t p = 0; p < positions; ++p) acc += dy[oc * positions + p];
      dbias[oc] += acc;
    }
  }
  return grads;
}

// ------------------------------------------------------------- BatchNorm

template <typename T>
BatchNorm<T>::BatchNorm(std::size_t channels, double epsilon, double momentum)
    : gamma_({channels}, T(1)),
      beta_({channels}, T(0)),
      running_mean_({channels}, T(0)),
      running_var_({channels}, T(1)),
      epsilon_(epsilon),
      momentum_(momentum) {
  if (!(epsilon >= 0.0)) throw LayerError("batchnorm: epsilon must be >= 0");
  if (!(momentum > 0.0 && momentum < 1.0)) throw LayerError("batchnorm: momentum must lie in (0,1)");
}

template <typename T>
LayerSpec BatchNorm<T>::spec() const {
  return LayerSpec::batchnorm(gamma_.dim(0), epsilon_, momentum_);
}

template <typename T>
Shape BatchNorm<T>::output_shape(const Shape& input) const {
  channel_layout(input, gamma_.dim(0));
  return input;
}

template <typename T>
BasicTensor<T> BatchNorm<T>::infer(const TensorT& x) const {
  const auto l = channel_layout(x.shape(), gamma_.dim(0));
  TensorT out(x.shape());
  for (std::size_t ch = 0; ch < l.channels; ++ch) {
    if (running_var_[ch] < T(0)) {
      throw LayerError("batchnorm: negative running variance in channel " + std::to_string(ch));
    }
    const T inv_std = T(1) / std::sqrt(running_var_[ch] + static_cast<T>(epsilon_));
    const T scale_ = gamma_[ch] * inv_std;
    const T shift = beta_[ch] - scale_ * running_mean_[ch];
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) out[base + s] = x[base + s] * scale_ + shift;
    }
  }
  out.require_finite("batchnorm inference");
  return out;
}

template <typename T>
BasicTensor<T> BatchNorm<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  const auto l = channel_layout(x.shape(), gamma_.dim(0));
  const std::size_t count = l.batch * l.spatial;
  if (count < 2) {
    throw LayerError("batchnorm: train mode needs at least 2 values per channel, got " + std::to_string(count));
  }
  TensorT out(x.shape());
  TensorT xhat(x.shape());
  std::vector<T> inv_std(l.channels);
  const T momentum = static_cast<T>(momentum_);
  for (std::size_t ch = 0; ch < l.channels; ++ch) {
    T total = T(0);
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) total += x[base + s];
    }
    const T mu = total / static_cast<T>(count);
    T sq = T(0);
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        const T d = x[base + s] - mu;
        sq += d * d;
      }
    }
    const T var = sq / static_cast<T>(count);
    inv_std[ch] = T(1) / std::sqrt(var + static_cast<T>(epsilon_));
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        const T n = (x[base + s] - mu) * inv_std[ch];
        xhat[base + s] = n;
        out[base + s] = gamma_[ch] * n + beta_[ch];
      }
    }
    running_mean_[ch] = momentum * running_mean_[ch] + (T(1) - momentum) * mu;
    running_var_[ch] = momentum * running_var_[ch] + (T(1) - momentum) * var;
  }
  out.require_finite("batchnorm forward");
  this->stamp(cache, x.shape(), out.shape());
  cache.saved = std::move(xhat);
  cache.inv_std = std::move(inv_std);
  return out;
}

template <typename T>
LayerGradients<T> BatchNorm<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  const auto l = channel_layout(upstream.shape(), gamma_.dim(0));
  const T count = static_cast<T>(l.batch * l.spatial);
  const auto& xhat = cache.saved;
  LayerGradients<T> grads{TensorT(upstream.shape()), {TensorT(gamma_.shape()), TensorT(beta_.shape())}};
  for (std::size_t ch = 0; ch < l.channels; ++ch) {
    T dbeta = T(0), dgamma = T(0);
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        dbeta += upstream[base + s];
        dgamma += upstream[base + s] * xhat[base + s];
      }
    }
    grads.params[0][ch] = dgamma;
    grads.params[1][ch] = dbeta;
    const T k = gamma_[ch] * cache.inv_std[ch] / count;
    for (std::size_t b = 0; b < l.batch; ++b) {
      const std::size_t base = (b * l.channels + ch) * l.spatial;
      for (std::size_t s = 0; s < l.spatial; ++s) {
        grads.input[base + s] = k * (count * upstream[base + s] - dbeta - xhat[base + s] * dgamma);
      }
    }
  }
  return grads;
}

// ------------------------------------------------------------------ ReLU

template <typename T>
BasicTensor<T> ReLU<T>::infer(const TensorT& x) const {
  TensorT out(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = x[i] > T(0) ? x[i] : T(0);
  return out;
}

template <typename T>
BasicTensor<T> ReLU<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  TensorT out(x.shape());
  TensorT mask(x.shape());
  for (std::size_t i = 0; i < x.size(); ++i) {
    const bool on = x[i] > T(0);
    out[i] = on ? x[i] : T(0);
    mask[i] = on ? T(1) : T(0);
  }
  this->stamp(cache, x.shape(), out.shape());
  cache.mask = std::move(mask);
  return out;
}

template <typename T>
LayerGradients<T> ReLU<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  LayerGradients<T> grads{TensorT(upstream.shape()), {}};
  for (std::size_t i = 0; i < upstream.size(); ++i) grads.input[i] = upstream[i] * cache.mask[i];
  return grads;
}

// ------------------------------------------------------------- MaxPool2D

template <typename T>
MaxPool2D<T>::MaxPool2D(std::size_t window, std::size_t stride) : window_(window), stride_(stride) {
  if (window_ == 0 || stride_ == 0) throw LayerError("maxpool2d: window and stride must be positive");
}

template <typename T>
Shape MaxPool2D<T>::output_shape(const Shape& input) const {
  if (input.size() != 4) throw LayerError(describe("maxpool2d expects [N,C,H,W];", input));
  if (input[2] < window_ || input[3] < window_) {
    throw LayerError(describe("maxpool2d input smaller than the " + std::to_string(window_) + "x" +
                                  std::to_string(window_) + " window;",
                              input));
  }
  return {input[0], input[1], (input[2] - window_) / stride_ + 1, (input[3] - window_) / stride_ + 1};
}

template <typename T>
BasicTensor<T> MaxPool2D<T>::pool(const TensorT& x, std::vector<std::size_t>* argmax_index) const {
  const auto shape = output_shape(x.shape());
  const auto planes = shape[0] * shape[1];
  const auto h = x.dim(2), w = x.dim(3), oh = shape[2], ow = shape[3];
  TensorT out(shape);
  if (argmax_index) argmax_index->assign(out.size(), 0);
  for (std::size_t p = 0; p < planes; ++p) {
    const std::size_t in_base = p * h * w;
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        std::size_t best = in_base + (oy * stride_) * w + ox * stride_;
        for (std::size_t ky = 0; ky < window_; ++ky) {
          for (std::size_t kx = 0; kx < window_; ++kx) {
            const std::size_t idx = in_base + (oy * stride_ + ky) * w + ox * stride_ + kx;
            if (x[idx] > x[best]) best = idx;
          }
        }
        const std::size_t o = (p * oh + oy) * ow + ox;
        out[o] = x[best];
        if (argmax_index) (*argmax_index)[o] = best;
      }
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> MaxPool2D<T>::infer(const TensorT& x) const {
  return pool(x, nullptr);
}

template <typename T>
BasicTensor<T> MaxPool2D<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  std::vector<std::size_t> index;
  auto out = pool(x, &index);
  this->stamp(cache, x.shape(), out.shape());
  cache.argmax_index = std::move(index);
  return out;
}

template <typename T>
LayerGradients<T> MaxPool2D<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  LayerGradients<T> grads{TensorT(cache.input_shape), {}};
  for (std::size_t o = 0; o < upstream.size(); ++o) grads.input[cache.argmax_index[o]] += upstream[o];
  return grads;
}

// --------------------------------------------------------------- Dropout

template <typename T>
Dropout<T>::Dropout(double rate) : rate_(rate) {
  if (!(rate >= 0.0 && rate < 1.0)) throw LayerError("dropout: rate must lie in [0,1)");
}

template <typename T>
BasicTensor<T> Dropout<T>::forward_train(const TensorT& x, Rng& rng, LayerCache<T>& cache) {
  TensorT mask(x.shape(), T(1));
  TensorT out = x;
  if (rate_ > 0.0) {
    const T keep_scale = static_cast<T>(1.0 / (1.0 - rate_));
    for (std::size_t i = 0; i < x.size(); ++i) {
      mask[i] = rng.uniform() < rate_ ? T(0) : keep_scale;
      out[i] = x[i] * mask[i];
    }
  }
  this->stamp(cache, x.shape(), out.shape());
  cache.mask = std::move(mask);
  return out;
}

template <typename T>
LayerGradients<T> Dropout<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  LayerGradients<T> grads{TensorT(upstream.shape()), {}};
  for (std::size_t i = 0; i < upstream.size(); ++i) grads.input[i] = upstream[i] * cache.mask[i];
  return grads;
}

// --------------------------------------------------------------- Flatten

template <typename T>
Shape Flatten<T>::output_shape(const Shape& input) const {
  if (input.size() < 2) throw LayerError(describe("flatten expects a batch dimension plus features;", input));
  std::size_t features = 1;
  for (std::size_t i = 1; i < input.size(); ++i) features *= input[i];
  return {input[0], features};
}

template <typename T>
BasicTensor<T> Flatten<T>::infer(const TensorT& x) const {
  return x.reshaped(output_shape(x.shape()));
}

template <typename T>
BasicTensor<T> Flatten<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  auto out = infer(x);
  this->stamp(cache, x.shape(), out.shape());
  return out;
}

template <typename T>
LayerGradients<T> Flatten<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  return {upstream.reshaped(cache.input_shape), {}};
}

// ----------------------------------------------------------------- Dense

template <typename T>
Dense<T>::Dense(TensorT weights, TensorT bias) : weights_(std::move(weights)), bias_(std::move(bias)) {
  if (weights_.rank() != 2) throw LayerError("dense: weights must be [in, out]");
  if (bias_.rank() != 1 || bias_.dim(0) != weights_.dim(1)) throw LayerError("dense: bias must be [out]");
}

template <typename T>
Dense<T> Dense<T>::create(const LayerSpec& spec, Rng& rng) {
  if (spec.in_features == 0 || spec.out_features == 0) throw LayerError("dense: feature counts must be positive");
  auto weights = he_normal_init<T>(rng, {spec.in_features, spec.out_features}, spec.in_features);
  return Dense(std::move(weights), TensorT({spec.out_features}));
}

template <typename T>
LayerSpec Dense<T>::spec() const {
  return LayerSpec::dense(weights_.dim(0), weights_.dim(1));
}

template <typename T>
Shape Dense<T>::output_shape(const Shape& input) const {
  if (input.size() != 2 || input[1] != weights_.dim(0)) {
    throw LayerError(describe("dense expects [N," + std::to_string(weights_.dim(0)) + "];", input));
  }
  return {input[0], weights_.dim(1)};
}

template <typename T>
BasicTensor<T> Dense<T>::infer(const TensorT& x) const {
  const auto shape = output_shape(x.shape());
  const auto n = shape[0], out_features = shape[1];
  TensorT out(shape);
  for (std::size_t b = 0; b < n; ++b)
    std::copy(bias_.data().begin(), bias_.data().end(), out.data().begin() + static_cast<std::ptrdiff_t>(b * out_features));
  gemm<T>(false, false, n, out_features, weights_.dim(0), x.data(), weights_.data(), out.data(), true);
  out.require_finite("dense forward");
  return out;
}

template <typename T>
BasicTensor<T> Dense<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  auto out = infer(x);
  this->stamp(cache, x.shape(), out.shape());
  cache.saved = x;
  return out;
}

template <typename T>
LayerGradients<T> Dense<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  const auto& x = cache.saved;
  const auto n = x.dim(0), in = weights_.dim(0), out_features = weights_.dim(1);
  LayerGradients<T> grads{TensorT(x.shape()), {TensorT(weights_.shape()), TensorT(bias_.shape())}};
  gemm<T>(false, true, n, in, out_features, upstream.data(), weights_.data(), grads.input.data(), false);
  gemm<T>(true, false, in, out_features, n, x.data(), upstream.data(), grads.params[0].data(), false);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < out_features; ++j) grads.params[1][j] += upstream[b * out_features + j];
  return grads;
}

// --------------------------------------------------------------- Softmax

template <typename T>
BasicTensor<T> softmax(const BasicTensor<T>& logits) {
  if (logits.rank() != 2) throw LayerError(describe("softmax expects [N,K];", logits.shape()));
  const auto n = logits.dim(0), k = logits.dim(1);
  BasicTensor<T> out(logits.shape());
  for (std::size_t b = 0; b < n; ++b) {
    const T* row = logits.data().data() + b * k;
    T* dst = out.data().data() + b * k;
    const T peak = *std::max_element(row, row + k);
    T total = T(0);
    for (std::size_t j = 0; j < k; ++j) {
      dst[j] = std::exp(row[j] - peak);
      total += dst[j];
    }
    for (std::size_t j = 0; j < k; ++j) dst[j] /= total;
  }
  out.require_finite("softmax");
  return out;
}

template <typename T>
Shape Softmax<T>::output_shape(const Shape& input) const {
  if (input.size() != 2) throw LayerError(describe("softmax expects [N,K];", input));
  return input;
}

template <typename T>
BasicTensor<T> Softmax<T>::infer(const TensorT& x) const {
  return softmax(x);
}

template <typename T>
BasicTensor<T> Softmax<T>::forward_train(const TensorT& x, Rng&, LayerCache<T>& cache) {
  auto out = softmax(x);
  this->stamp(cache, x.shape(), out.shape());
  cache.saved = out;
  return out;
}

template <typename T>
LayerGradients<T> Softmax<T>::backward(const LayerCache<T>& cache, const TensorT& upstream) const {
  this->check_cache(cache, upstream);
  const auto& p = cache.saved;
  const auto n = p.dim(0), k = p.dim(1);
  LayerGradients<T> grads{TensorT(p.shape()), {}};
  for (std::size_t b = 0; b < n; ++b) {
    T dot = T(0);
    for (std::size_t j = 0; j < k; ++j) dot += upstream[b * k + j] * p[b * k + j];
    for (std::size_t j = 0; j < k; ++j) grads.input[b * k + j] = p[b * k + j] * (upstream[b * k + j] - dot);
  }
  return grads;
}

// --------------------------------------------------------------- factory

template <typename T>
std::unique_ptr<Layer<T>> make_layer(const LayerSpec& spec, Rng& rng) {
  switch (spec.kind) {
    case LayerKind::conv2d: return std::make_unique<Conv2D<T>>(Conv2D<T>::create(spec, rng));
    case LayerKind::batchnorm:
      if (spec.channels == 0) throw LayerError("batchnorm: channel count must be positive");
      return std::make_unique<BatchNorm<T>>(spec.channels, spec.epsilon, spec.momentum);
    case LayerKind::relu: return std::make_unique<ReLU<T>>();
    case LayerKind::maxpool2d: return std::make_unique<MaxPool2D<T>>(spec.window, spec.stride);
    case LayerKind::dropout: return std::make_unique<Dropout<T>>(spec.rate);
    case LayerKind::flatten: return std::make_unique<Flatten<T>>();
    case LayerKind::dense: return std::make_unique<Dense<T>>(Dense<T>::create(spec, rng));
    case LayerKind::softmax: return std::make_unique<Softmax<T>>();
  }
  throw LayerError("unknown layer kind");
}

#define FER_INSTANTIATE_LAYERS(T)                                                    \
  template class Layer<T>;                                                           \
  template class Conv2D<T>;                                                          \
  template class BatchNorm<T>;                                                       \
  template class ReLU<T>;                                                            \
  template class MaxPool2D<T>;                                                       \
  template class Dropout<T>;                                                         \
  template class Flatten<T>;                                                         \
  template class Dense<T>;                                                           \
  template class Softmax<T>;                                                         \
  template BasicTensor<T> he_normal_init<T>(Rng&, const Shape&, std::size_t);        \
  template BasicTensor<T> softmax<T>(const BasicTensor<T>&);                         \
  template std::unique_ptr<Layer<T>> make_layer<T>(const LayerSpec&, Rng&);

FER_INSTANTIATE_LAYERS(float)
FER_INSTANTIATE_LAYERS(double)

}  // namespace fer
