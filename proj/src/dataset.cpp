#include "fer/dataset.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <istream>

#include "fer/rng.hpp"

namespace fer {

namespace {

constexpr std::array<std::string_view, kNumClasses> kClassNames{"angry", "disgust", "fear",   "happy",
                                                                "sad",   "surprise", "neutral"};

std::string_view trim_right(std::string_view s) {
  while (!s.empty() && (s.back() == '\r' || s.back() == '\n' || s.back() == ' ' || s.back() == '\t')) {
    s.remove_suffix(1);
  }
  return s;
}

template <typename Int>
bool parse_int(std::string_view token, Int& out) {
  if (token.empty()) return false;
  const auto* end = token.data() + token.size();
  auto [ptr, ec] = std::from_chars(token.data(), end, out);
  return ec == std::errc() && ptr == end;
}

}  // namespace

std::string_view usage_token(Usage usage) {
  switch (usage) {
    case Usage::training: return "Training";
    case Usage::public_test: return "PublicTest";
    case Usage::private_test: return "PrivateTest";
  }
  return "";
}

std::string_view usage_name(Usage usage) {
  switch (usage) {
    case Usage::training: return "training";
    case Usage::public_test: return "public-test";
    case Usage::private_test: return "private-test";
  }
  return "";
}

Usage parse_usage_name(std::string_view name) {
  for (auto u : {Usage::training, Usage::public_test, Usage::private_test}) {
    if (usage_name(u) == name) return u;
  }
  throw DatasetError("unknown split '" + std::string(name) + "' (expected training, public-test or private-test)");
}

const std::array<std::string_view, kNumClasses>& class_names() { return kClassNames; }

std::optional<int> class_index(std::string_view name) {
  for (std::size_t i = 0; i < kClassNames.size(); ++i)
    if (kClassNames[i] == name) return static_cast<int>(i);
  return std::nullopt;
}

Tensor Sample::image() const {
  Tensor out({1, kImageSide, kImageSide});
  write_normalized(out.data());
  return out;
}

void Sample::write_normalized(std::span<float> dst) const {
  for (std::size_t i = 0; i < kImagePixels; ++i) dst[i] = static_cast<float>(raw[i]) / 255.0f;
}

ClassCounts DatasetSplit::class_counts() const {
  ClassCounts counts{};
  for (const auto& s : samples) ++counts[static_cast<std::size_t>(s.label)];
  return counts;
}

const DatasetSplit& Fer2013::split(Usage usage) const {
  switch (usage) {
    case Usage::training: return training;
    case Usage::public_test: return public_test;
    case Usage::private_test: return private_test;
  }
  return training;
}

ClassCounts Fer2013::class_counts() const {
  ClassCounts total{};
  for (const auto* s : {&training, &public_test, &private_test}) {
    const auto c = s->class_counts();
    for (std::size_t i = 0; i < kNumClasses; ++i) total[i] += c[i];
  }
  return total;
}

std::pair<Sample, Usage> parse_fer2013_row(std::string_view line) {
  line = trim_right(line);
  const auto first = line.find(',');
  const auto second = first == std::string_view::npos ? first : line.find(',', first + 1);
  if (second == std::string_view::npos) throw DatasetError("expected 3 columns (emotion,pixels,Usage)");
  if (line.find(',', second + 1) != std::string_view::npos) {
    throw DatasetError("too many columns (expected emotion,pixels,Usage)");
  }
  const auto emotion_field = line.substr(0, first);
  const auto pixel_field = line.substr(first + 1, second - first - 1);
  const auto usage_field = line.substr(second + 1);

  Sample sample;
  if (!parse_int(emotion_field, sample.label) || sample.label < 0 ||
      sample.label >= static_cast<int>(kNumClasses)) {
    throw DatasetError("emotion '" + std::string(emotion_field) + "' outside 0..6");
  }

  std::size_t count = 0;
  std::size_t pos = 0;
  while (pos <= pixel_field.size()) {
    auto end = pixel_field.find(' ', pos);
    if (end == std::string_view::npos) end = pixel_field.size();
    const auto token = pixel_field.substr(pos, end - pos);
    if (!token.empty()) {
      unsigned value = 0;
      if (!parse_int(token, value) || value > 255) {
        throw DatasetError("pixel " + std::to_string(count) + " value '" + std::string(token) +
                           "' outside 0..255");
      }
      if (count < kImagePixels) sample.raw[count] = static_cast<std::uint8_t>(value);
      ++count;
    }
    pos = end + 1;
  }
  if (count != kImagePixels) {
    throw DatasetError("expected " + std::to_string(kImagePixels) + " pixels, got " + std::to_string(count));
  }

  for (auto u : {Usage::training, Usage::public_test, Usage::private_test}) {
    if (usage_token(u) == usage_field) return {sample, u};
  }
  throw DatasetError("unknown Usage '" + std::string(usage_field) + "'");
}

std::string format_fer2013_row(const Sample& sample, Usage usage) {
  std::string out = std::to_string(sample.label);
  out.reserve(kImagePixels * 4 + 16);
  out += ',';
  for (std::size_t i = 0; i < kImagePixels; ++i) {
    if (i) out += ' ';
    out += std::to_string(sample.raw[i]);
  }
  out += ',';
  out += usage_token(usage);
  return out;
}

Fer2013 parse_fer2013(std::istream& in) {
  std::string line;
  if (!std::getline(in, line)) throw DatasetError("line 1: empty file (expected header emotion,pixels,Usage)");
  if (trim_right(line) != "emotion,pixels,Usage") {
    throw DatasetError("line 1: bad header '" + std::string(trim_right(line)) + "' (expected emotion,pixels,Usage)");
  }
  Fer2013 data;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (trim_right(line).empty()) continue;
    try {
      auto [sample, usage] = parse_fer2013_row(line);
      switch (usage) {
        case Usage::training: data.training.samples.push_back(sample); break;
        case Usage::public_test: data.public_test.samples.push_back(sample); break;
        case Usage::private_test: data.private_test.samples.push_back(sample); break;
      }
    } catch (const DatasetError& e) {
      throw DatasetError("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return data;
}

Fer2013 load_fer2013(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DatasetError("cannot open dataset '" + path.string() + "'");
  return parse_fer2013(in);
}

std::optional<std::filesystem::path> default_dataset_path() {
  const char* dir = std::getenv("FER_DATA_DIR");
  if (!dir || !*dir) return std::nullopt;
  return std::filesystem::path(dir) / "fer2013.csv";
}

ClassWeights compute_class_weights(const ClassCounts& counts) {
  std::size_t total = 0;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    if (counts[c] == 0) throw DatasetError("class '" + std::string(kClassNames[c]) + "' has no samples");
    total += counts[c];
  }
  ClassWeights w;
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    w.weights[c] = static_cast<double>(total) / (static_cast<double>(kNumClasses) * static_cast<double>(counts[c]));
  }
  return w;
}

namespace {

DatasetSplit keep_per_class(const DatasetSplit& split, std::uint64_t seed,
                            const std::function<std::size_t(std::size_t)>& quota) {
  if (split.empty()) throw DatasetError("cannot subset an empty split");
  std::array<std::vector<std::size_t>, kNumClasses> by_class;
  for (std::size_t i = 0; i < split.size(); ++i)
    by_class[static_cast<std::size_t>(split.samples[i].label)].push_back(i);
  std::vector<bool> keep(split.size(), false);
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    auto& members = by_class[c];
    const auto order = seeded_permutation(members.size(), mix64(seed) ^ mix64(c + 1));
    const auto take = std::min(quota(members.size()), members.size());
    for (std::size_t j = 0; j < take; ++j) keep[members[order[j]]] = true;
  }
  DatasetSplit out{split.usage, {}};
  for (std::size_t i = 0; i < split.size(); ++i)
    if (keep[i]) out.samples.push_back(split.samples[i]);
  return out;
}

}  // namespace

DatasetSplit stratified_subset(const DatasetSplit& split, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw DatasetError("subset fraction must lie in (0,1]");
  return keep_per_class(split, seed, [fraction](std::size_t n) {
    // The small slack keeps products like 0.1 * 4950 = 495.00000000000006 from
    // rounding up an extra sample.
    return static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n) - 1e-9));
  });
}

DatasetSplit balanced_subset(const DatasetSplit& split, std::size_t per_class, std::uint64_t seed) {
  return keep_per_class(split, seed, [per_class](std::size_t) { return per_class; });
}

std::vector<std::size_t> seeded_permutation(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  for (std::size_t i = 0; i < n; ++i) order[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(order[i - 1], order[rng.uniform_index(i)]);
  return order;
}

BatchIterator::BatchIterator(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed, bool shuffle)
    : split_(&split), batch_size_(batch_size) {
  if (batch_size == 0) throw DatasetError("batch size must be positive");
  if (split.empty()) throw DatasetError("cannot iterate an empty split");
  if (shuffle) {
    order_ = seeded_permutation(split.size(), seed);
  } else {
    order_.resize(split.size());
    for (std::size_t i = 0; i < order_.size(); ++i) order_[i] = i;
  }
}

std::size_t BatchIterator::num_batches() const { return (order_.size() + batch_size_ - 1) / batch_size_; }

std::span<const std::size_t> BatchIterator::batch_indices(std::size_t i) const {
  const auto begin = i * batch_size_;
  if (begin >= order_.size()) throw DatasetError("batch index out of range");
  const auto end = std::min(begin + batch_size_, order_.size());
  return std::span<const std::size_t>(order_).subspan(begin, end - begin);
}

Batch BatchIterator::batch(std::size_t i) const {
  const auto idx = batch_indices(i);
  Batch b{Tensor({idx.size(), 1, kImageSide, kImageSide}), {}, {idx.begin(), idx.end()}};
  for (std::size_t j = 0; j < idx.size(); ++j) {
    const auto& s = split_->samples[idx[j]];
    s.write_normalized(b.images.data().subspan(j * kImagePixels, kImagePixels));
    b.labels.push_back(s.label);
  }
  return b;
}

std::vector<Batch> batch_iter(const DatasetSplit& split, std::size_t batch_size, std::uint64_t seed, bool shuffle) {
  BatchIterator it(split, batch_size, seed, shuffle);
  std::vector<Batch> out;
  for (std::size_t i = 0; i < it.num_batches(); ++i) out.push_back(it.batch(i));
  return out;
}

}  // namespace fer
