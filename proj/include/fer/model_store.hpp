#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "fer/model.hpp"

namespace fer {

/**
 * Model file layout (all integers little-endian):
 *
 *   "FERM"                 4-byte magic
 *   u32 version            kModelFormatVersion
 *   u32 header_length      bytes of UTF-8 JSON that follow
 *   header JSON            {"input": [...], "layers": [...], "blobs": [...]}
 *   body                   float32 LE arrays in blob-manifest order
 *
 * Each manifest entry names its layer index, tensor name, shape and the
 * byte offset/length of its data within the body. Entries tile the body
 * exactly.
 */
inline constexpr std::uint32_t kModelFormatVersion = 1;

class ModelFormatError : public std::runtime_error {
 public:
  enum class Kind { io, bad_magic, unsupported_version, bad_header, manifest_mismatch, truncated_body };

  ModelFormatError(Kind kind, const std::string& detail);
  Kind kind() const noexcept { return kind_; }

 private:
  Kind kind_;
};

std::string_view to_string(ModelFormatError::Kind kind);

std::vector<std::uint8_t> serialize_model(const Model& model);
Model deserialize_model(std::span<const std::uint8_t> bytes);

/// Writes to a temporary file next to `path` and renames it into place.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace fer
