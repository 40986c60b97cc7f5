#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "fer/model.hpp"
#include "fer/optim.hpp"
#include "fer/tensor.hpp"

namespace fer {

enum class Usage { training, public_test, private_test };

/// CSV token ("Training", "PublicTest", "PrivateTest").
std::string_view usage_token(Usage usage);
/// CLI name ("training", "public-test", "private-test").
std::string_view usage_name(Usage usage);
Usage parse_usage_name(std::string_view name);

/// Emotion label names, 0 angry .. 6 neutral.
const std::array<std::string_view, kNumClasses>& class_names();
std::optional<int> class_index(std::string_view name);

using ClassCounts = std::array<std::size_t, kNumClasses>;

/// Per-class totals over all three splits of the public FER2013 release.
inline constexpr ClassCounts kReferenceClassCounts{4953, 547, 5121, 8989, 6077, 4002, 6198};
inline constexpr std::size_t kReferenceTotal = 35887;

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// One 48x48 grayscale face. Pixels are kept as the raw 0..255 bytes and
/// exposed normalized to [0,1].
struct Sample {
  std::array<std::uint8_t, kImagePixels> raw{};
  int label = 0;

  /// [1, 48, 48] tensor of raw / 255.
  Tensor image() const;
  /// Writes raw / 255 into `dst` (kImagePixels values).
  void write_normalized(std::span<float> dst) const;
};

struct DatasetSplit {
  Usage usage = Usage::training;
  std::vector<Sample> samples;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  ClassCounts class_counts() const;
};

struct Fer2013 {
  DatasetSplit training{Usage::training, {}};
  DatasetSplit public_test{Usage::public_test, {}};
  DatasetSplit private_test{Usage::private_test, {}};

  const DatasetSplit& split(Usage usage) const;
  std::size_t total() const { return training.size() + public_test.size() + private_test.size(); }
  ClassCounts class_counts() const;
};

/// Parses a FER2013 CSV (header "emotion,pixels,Usage"). Errors carry the
/// 1-based line number of the offending row.
Fer2013 load_fer2013(const std::filesystem::path& path);
Fer2013 parse_fer2013(std::istream& in);

/// Parses one data row. Throws DatasetError (without line context).
std::pair<Sample, Usage> parse_fer2013_row(std::string_view line);
/// Inverse of parse_fer2013_row.
std::string format_fer2013_row(const Sample& sample, Usage usage);

/// Default dataset location: $FER_DATA_DIR/fer2013.csv, if the variable is set.
std::optional<std::filesystem::path> default_dataset_path();

/// w_c = N / (7 * n_c). Throws on any zero count.
ClassWeights compute_class_weights(const ClassCounts& counts);

/// Keeps ceil(fraction * n_c) samples of every class, chosen by a seeded
/// shuffle; survivors stay in file order.
DatasetSplit stratified_subset(const DatasetSplit& split, double fraction, std::uint64_t seed);

/// Same as stratified_subset but with at most `per_class` samples per class.
DatasetSplit balanced_subset(const DatasetSplit& split, std::size_t per_class, std::uint64_t seed);

struct Batch {
  Tensor images;                     // [b, 1, 48, 48]
  std::vector<int> labels;           // b labels
  std::vector<std::size_t> indices;  // positions within the split
};

/// Seeded Fisher-Yates permutation of 0..n-1.
std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed);

/**
 * One epoch of mini-batches over a split. Every sample appears exactly once;
 * the final batch may be short. With shuffling off batches follow file
 * order.
 */
class BatchIterator {
 public:
  BatchIterator(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed, bool shuffle);

  std::size_t num_batches() const;
  /// Sample positions of batch `i`.
  std::span<const std::size_t> batch_indices(std::size_t i) const;
  /// Materializes batch `i` (no augmentation).
  Batch batch(std::size_t i) const;
  const std::vector<std::size_t>& order() const { return order_; }

 private:
  const DatasetSplit* split_;
  std::size_t batch_size_;
  std::vector<std::size_t> order_;
};

/// Every batch of one epoch, materialized.
std::vector<Batch> batch_iter(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed, bool shuffle);

}  // namespace fer
