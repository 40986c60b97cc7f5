#pragma once

#include <array>
#include <atomic>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "fer/model.hpp"

namespace httplib {
class Server;
}

namespace fer {

class InputError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Pixels = std::array<std::uint8_t, kImagePixels>;

/// Decodes a 48x48 binary (P5) or ASCII (P2) PGM with maxval 255.
Pixels decode_pgm(std::string_view bytes);
/// Parses 2304 integers 0..255 separated by commas and/or whitespace.
Pixels parse_pixel_text(std::string_view text);
/// PGM when the content starts with "P5"/"P2", pixel text otherwise.
Pixels load_image_pixels(const std::filesystem::path& path);
/// Validates a JSON-decoded pixel list (count and range).
Pixels pixels_from_values(std::span<const long long> values);

/// [1, 1, 48, 48] tensor of pixel / 255.
Tensor pixels_to_tensor(const Pixels& pixels);

struct Prediction {
  std::array<float, kNumClasses> probabilities{};
  std::size_t top = 0;
};

Prediction predict(const Model& model, const Pixels& pixels);

/// {"probabilities": {name: p, ...}, "label": name, "latency_ms": t}
std::string prediction_json(const Prediction& prediction, double latency_ms);

struct HttpReply {
  int status = 200;
  std::string body;
  std::string content_type = "application/json";
};

/**
 * Real-time inference over HTTP/1.1.
 *
 *   GET  /healthz          -> 200 "ok"
 *   POST /api/v1/predict   -> JSON {"pixels": [2304 ints]} or multipart
 *                             form with a PGM in field "image"
 *   GET  /                 -> static web assets
 *
 * The model is loaded once and only read afterwards; requests are served
 * concurrently.
 */
class InferenceService {
 public:
  static constexpr std::size_t kMaxBodyBytes = 1 << 20;

  explicit InferenceService(std::shared_ptr<const Model> model,
                            std::optional<std::filesystem::path> static_dir = std::nullopt);
  ~InferenceService();
  InferenceService(const InferenceService&) = delete;
  InferenceService& operator=(const InferenceService&) = delete;

  HttpReply handle_predict_json(std::string_view body) const;
  HttpReply handle_predict_pgm(std::string_view pgm) const;

  /// Binds `host:port` (port 0 picks a free port) and returns the bound port.
  int bind(const std::string& host, int port);
  /// Serves until stop() is called. Requires bind().
  void listen();
  void stop();

 private:
  HttpReply respond(const Pixels& pixels) const;

  std::shared_ptr<const Model> model_;
  std::unique_ptr<httplib::Server> server_;
};

}  // namespace fer
