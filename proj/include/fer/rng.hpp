#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "fer/tensor.hpp"

namespace fer {

/**
 * Seeded random source.
 *
 * The engine is std::mt19937_64, whose output sequence is fixed by the C++
 * standard. Distributions are computed here rather than through
 * <random>'s distribution classes, whose algorithms vary between standard
 * libraries, so a seed produces the same draws on every toolchain.
 *
 * Child streams are keyed by (seed, ids...) through a SplitMix64 mix and do
 * not depend on how many draws were taken from any other stream.
 */
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  /// Independent stream for the key (seed, ids...).
  static Rng derive(std::uint64_t seed, std::initializer_list<std::uint64_t> ids);

  std::uint64_t next_u64();
  /// Uniform in [0, 1) with 53 bits of resolution.
  double uniform();
  /// Uniform in [lo, hi); returns lo exactly when lo == hi.
  double uniform(double lo, double hi);
  /// Uniform integer in [0, n).
  std::uint64_t uniform_index(std::uint64_t n);
  /// Standard normal via Box-Muller (the spare draw is cached).
  double normal();

  std::uint64_t seed() const noexcept { return seed_; }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t mix64(std::uint64_t x);

/// Tensor of Normal(mean, std^2) draws. std == 0 yields exactly `mean`.
template <typename T>
BasicTensor<T> sample_normal(Rng& rng, const Shape& shape, double mean, double stddev);

}  // namespace fer
