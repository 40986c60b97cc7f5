#include "fer/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <thread>
#include <vector>

namespace fer {

namespace {

constexpr std::uint64_t kAugmentStreamId = 0xa06;

double radians(double degrees) { return degrees * std::numbers::pi / 180.0; }

void require_image(const Tensor& image, const char* op) {
  if (image.rank() != 3) {
    throw AugmentError(std::string(op) + ": expected [C,H,W] image, got " + shape_string(image.shape()));
  }
}

}  // namespace

AugmentPolicy AugmentPolicy::identity() {
  AugmentPolicy p;
  p.flip_prob = 0.0;
  p.rotation_deg = 0.0;
  p.shear_deg = 0.0;
  p.zoom_min = p.zoom_max = 1.0;
  p.shift_frac = 0.0;
  p.brightness_min = p.brightness_max = 1.0;
  return p;
}

void AugmentPolicy::validate() const {
  if (!(flip_prob >= 0.0 && flip_prob <= 1.0)) throw AugmentError("flip probability must lie in [0,1]");
  if (!(rotation_deg >= 0.0)) throw AugmentError("rotation range must be >= 0");
  if (!(shear_deg >= 0.0 && shear_deg < 90.0)) throw AugmentError("shear range must lie in [0,90)");
  if (!(zoom_min > 0.0 && zoom_min <= zoom_max)) throw AugmentError("zoom range must be positive and ordered");
  if (!(shift_frac >= 0.0)) throw AugmentError("shift range must be >= 0");
  if (!(brightness_min > 0.0 && brightness_min <= brightness_max)) {
    throw AugmentError("brightness range must be positive and ordered");
  }
}

AffineParams AffineParams::translation(double dx, double dy) { return AffineParams{{1, 0, -dx, 0, 1, -dy}}; }

AffineParams AffineParams::rotation(double degrees, std::size_t width, std::size_t height) {
  return compose(degrees, 0.0, 1.0, 0.0, 0.0, width, height);
}

AffineParams AffineParams::compose(double rotation_deg, double shear_deg, double zoom, double shift_x,
                                   double shift_y, std::size_t width, std::size_t height) {
  if (!(zoom > 0.0)) throw AugmentError("zoom must be positive");
  const double c = std::cos(radians(rotation_deg));
  const double s = std::sin(radians(rotation_deg));
  const double sh = std::tan(radians(shear_deg));
  // Forward map (source -> output) about the center: R * Shear * Zoom.
  const double f00 = c * zoom, f01 = (c * sh - s) * zoom;
  const double f10 = s * zoom, f11 = (s * sh + c) * zoom;
  const double det = f00 * f11 - f01 * f10;
  if (std::abs(det) < 1e-12) throw AugmentError("singular affine transform");
  const double i00 = f11 / det, i01 = -f01 / det, i10 = -f10 / det, i11 = f00 / det;
  const double cx = (static_cast<double>(width) - 1.0) / 2.0;
  const double cy = (static_cast<double>(height) - 1.0) / 2.0;
  // src = C + inv * (out - C - shift)
  const double ox = cx + shift_x, oy = cy + shift_y;
  return AffineParams{{i00, i01, cx - (i00 * ox + i01 * oy), i10, i11, cy - (i10 * ox + i11 * oy)}};
}

AugmentParams sample_params(const AugmentPolicy& policy, Rng& rng, std::size_t width, std::size_t height) {
  policy.validate();
  AugmentParams p;
  p.flip = rng.uniform() < policy.flip_prob;
  const double rotation = rng.uniform(-policy.rotation_deg, policy.rotation_deg);
  const double shear = rng.uniform(-policy.shear_deg, policy.shear_deg);
  const double zoom = rng.uniform(policy.zoom_min, policy.zoom_max);
  const double shift_x = rng.uniform(-policy.shift_frac, policy.shift_frac) * static_cast<double>(width);
  const double shift_y = rng.uniform(-policy.shift_frac, policy.shift_frac) * static_cast<double>(height);
  p.brightness = rng.uniform(policy.brightness_min, policy.brightness_max);
  p.affine = AffineParams::compose(rotation, shear, zoom, shift_x, shift_y, width, height);
  return p;
}

Tensor apply_affine(const Tensor& image, const AffineParams& params) {
  require_image(image, "apply_affine");
  if (std::abs(params.determinant()) < 1e-12) throw AugmentError("apply_affine: singular matrix");
  if (params.is_identity()) return image;
  const auto channels = image.dim(0), h = image.dim(1), w = image.dim(2);
  const auto& m = params.m;
  Tensor out(image.shape());
  const double max_x = static_cast<double>(w - 1), max_y = static_cast<double>(h - 1);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      const double xd = static_cast<double>(x), yd = static_cast<double>(y);
      const double sx = std::clamp(m[0] * xd + m[1] * yd + m[2], 0.0, max_x);
      const double sy = std::clamp(m[3] * xd + m[4] * yd + m[5], 0.0, max_y);
      const auto x0 = static_cast<std::size_t>(sx), y0 = static_cast<std::size_t>(sy);
      const auto x1 = std::min(x0 + 1, w - 1), y1 = std::min(y0 + 1, h - 1);
      const double fx = sx - static_cast<double>(x0), fy = sy - static_cast<double>(y0);
      for (std::size_t c = 0; c < channels; ++c) {
        const float* plane = image.data().data() + c * h * w;
        const double p00 = plane[y0 * w + x0], p01 = plane[y0 * w + x1];
        const double p10 = plane[y1 * w + x0], p11 = plane[y1 * w + x1];
        const double top = p00 + fx * (p01 - p00);
        const double bottom = p10 + fx * (p11 - p10);
        out[(c * h + y) * w + x] = static_cast<float>(std::clamp(top + fy * (bottom - top), 0.0, 1.0));
      }
    }
  }
  return out;
}

Tensor horizontal_flip(const Tensor& image) {
  require_image(image, "horizontal_flip");
  const auto planes = image.dim(0) * image.dim(1), w = image.dim(2);
  Tensor out(image.shape());
  for (std::size_t r = 0; r < planes; ++r)
    for (std::size_t x = 0; x < w; ++x) out[r * w + x] = image[r * w + (w - 1 - x)];
  return out;
}

Tensor brightness(const Tensor& image, double factor) {
  if (!(factor > 0.0)) throw AugmentError("brightness factor must be positive");
  Tensor out(image.shape());
  const auto f = static_cast<float>(factor);
  for (std::size_t i = 0; i < image.size(); ++i) out[i] = std::clamp(image[i] * f, 0.0f, 1.0f);
  return out;
}

Tensor augment(const Tensor& image, const AugmentPolicy& policy, Rng& rng) {
  require_image(image, "augment");
  const auto params = sample_params(policy, rng, image.dim(2), image.dim(1));
  Tensor out = params.flip ? horizontal_flip(image) : image;
  out = apply_affine(out, params.affine);
  return brightness(out, params.brightness);
}

Rng augment_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_id) {
  return Rng::derive(seed, {kAugmentStreamId, epoch, sample_id});
}

void augment_batch(Tensor& images, std::span<const std::size_t> sample_ids, const AugmentPolicy& policy,
                   std::uint64_t seed, std::uint64_t epoch, std::size_t workers) {
  if (images.rank() != 4 || images.dim(0) != sample_ids.size()) {
    throw AugmentError("augment_batch: expected [N,C,H,W] images with one id per image");
  }
  policy.validate();
  const auto n = images.dim(0);
  const Shape image_shape{images.dim(1), images.dim(2), images.dim(3)};
  const auto stride = images.size() / n;
  auto work = [&](std::size_t begin, std::size_t end) {
    for (std::size_t j = begin; j < end; ++j) {
      auto slot = images.data().subspan(j * stride, stride);
      Tensor img(image_shape, std::vector<float>(slot.begin(), slot.end()));
      Rng rng = augment_stream(seed, epoch, sample_ids[j]);
      const auto out = augment(img, policy, rng);
      std::copy(out.data().begin(), out.data().end(), slot.begin());
    }
  };
  workers = std::clamp<std::size_t>(workers, 1, n);
  if (workers == 1) {
    work(0, n);
    return;
  }
  std::vector<std::jthread> threads;
  const auto chunk = (n + workers - 1) / workers;
  for (std::size_t begin = 0; begin < n; begin += chunk) threads.emplace_back(work, begin, std::min(n, begin + chunk));
}

}  // namespace fer
