#pragma once

#include <array>
#include <cstdint>
#include <span>

#include "fer/rng.hpp"
#include "fer/tensor.hpp"

namespace fer {

class AugmentError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Ranges for the random training-time transforms. Symmetric ranges are
/// given by their half-width; zoom and brightness are multiplicative.
struct AugmentPolicy {
  double flip_prob = 0.5;
  double rotation_deg = 15.0;
  double shear_deg = 10.0;
  double zoom_min = 0.9;
  double zoom_max = 1.1;
  double shift_frac = 0.1;
  double brightness_min = 0.8;
  double brightness_max = 1.2;

  /// Policy whose every draw is the identity transform.
  static AugmentPolicy identity();
  void validate() const;
};

/// 2x3 matrix mapping output pixel coordinates (x = column, y = row) to
/// source coordinates: src = [a b; c d] * out + [tx; ty].
struct AffineParams {
  std::array<double, 6> m{1, 0, 0, 0, 1, 0};

  static AffineParams identity() { return {}; }
  /// Moves image content by (dx, dy) pixels.
  static AffineParams translation(double dx, double dy);
  /// Rotates content by `degrees` about the center of a width x height image.
  static AffineParams rotation(double degrees, std::size_t width, std::size_t height);
  /// Composition of rotation, shear and zoom about the image center followed
  /// by a shift of (shift_x, shift_y) pixels.
  static AffineParams compose(double rotation_deg, double shear_deg, double zoom, double shift_x, double shift_y,
                              std::size_t width, std::size_t height);

  double determinant() const { return m[0] * m[4] - m[1] * m[3]; }
  bool is_identity() const { return m == std::array<double, 6>{1, 0, 0, 0, 1, 0}; }
};

struct AugmentParams {
  bool flip = false;
  AffineParams affine;
  double brightness = 1.0;
};

/// Draws flip, rotation, shear, zoom, x/y shift and brightness in that fixed
/// order, each uniform over its range.
AugmentParams sample_params(const AugmentPolicy& policy, Rng& rng, std::size_t width = 48, std::size_t height = 48);

/// Bilinear resampling of a [C, H, W] image; out-of-range source coordinates
/// replicate the nearest edge pixel. Throws on a singular matrix.
Tensor apply_affine(const Tensor& image, const AffineParams& params);
/// Reverses column order.
Tensor horizontal_flip(const Tensor& image);
/// Multiplies by `factor` and clamps to [0, 1].
Tensor brightness(const Tensor& image, double factor);

/// flip -> affine -> brightness with parameters drawn from `rng`.
Tensor augment(const Tensor& image, const AugmentPolicy& policy, Rng& rng);

/// Stream for sample `sample_id` in `epoch`, independent of batch layout
/// and worker count.
Rng augment_stream(std::uint64_t seed, std::uint64_t epoch, std::uint64_t sample_id);

/// Augments each [1, H, W] image of `images` ([N, 1, H, W]) in place, image
/// j using augment_stream(seed, epoch, sample_ids[j]). Work is split over
/// `workers` threads.
void augment_batch(Tensor& images, std::span<const std::size_t> sample_ids, const AugmentPolicy& policy,
                   std::uint64_t seed, std::uint64_t epoch, std::size_t workers = 1);

}  // namespace fer
