#include "fer/serve.hpp"

#include <charconv>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iterator>

#include <httplib.h>
#include <json.hpp>

#include "fer/dataset.hpp"

namespace fer {

namespace {

using nlohmann::json;

constexpr std::string_view kFallbackPage = R"(<!doctype html>
<html><head><meta charset="utf-8"><title>FER inference service</title></head>
<body>
<h1>Facial expression inference service</h1>
<p>POST a JSON body <code>{"pixels": [2304 integers 0..255]}</code> or a multipart form with a
48x48 PGM in field <code>image</code> to <code>/api/v1/predict</code>.</p>
<p>Start the service with <code>--static DIR</code> to serve the browser demo from here.</p>
</body></html>
)";

bool is_space(char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f'; }

// Tokenizer for PGM headers: skips whitespace and '#' comments.
class PgmReader {
 public:
  explicit PgmReader(std::string_view bytes) : bytes_(bytes) {}

  std::string_view token() {
    while (pos_ < bytes_.size()) {
      if (is_space(bytes_[pos_])) {
        ++pos_;
      } else if (bytes_[pos_] == '#') {
        while (pos_ < bytes_.size() && bytes_[pos_] != '\n') ++pos_;
      } else {
        break;
      }
    }
    const auto start = pos_;
    while (pos_ < bytes_.size() && !is_space(bytes_[pos_])) ++pos_;
    return bytes_.substr(start, pos_ - start);
  }

  long number(const char* what) {
    const auto t = token();
    long v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (t.empty() || ec != std::errc() || ptr != t.data() + t.size()) {
      throw InputError(std::string("PGM: malformed ") + what);
    }
    return v;
  }

  /// Consumes the single whitespace byte that ends a binary PGM header.
  std::string_view raster() {
    if (pos_ < bytes_.size()) ++pos_;
    return bytes_.substr(pos_);
  }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Pixels decode_pgm(std::string_view bytes) {
  PgmReader reader(bytes);
  const auto magic = reader.token();
  if (magic != "P5" && magic != "P2") throw InputError("unsupported image format (expected PGM P5 or P2)");
  const auto width = reader.number("width");
  const auto height = reader.number("height");
  const auto maxval = reader.number("maxval");
  if (width != static_cast<long>(kImageSide) || height != static_cast<long>(kImageSide)) {
    throw InputError("image must be 48x48, got " + std::to_string(width) + "x" + std::to_string(height));
  }
  if (maxval != 255) throw InputError("PGM maxval must be 255, got " + std::to_string(maxval));
  Pixels pixels{};
  if (magic == "P5") {
    const auto raster = reader.raster();
    if (raster.size() < kImagePixels) {
      throw InputError("PGM raster has " + std::to_string(raster.size()) + " bytes, expected " +
                       std::to_string(kImagePixels));
    }
    for (std::size_t i = 0; i < kImagePixels; ++i) pixels[i] = static_cast<std::uint8_t>(raster[i]);
  } else {
    for (std::size_t i = 0; i < kImagePixels; ++i) {
      const auto v = reader.number("pixel");
      if (v < 0 || v > 255) throw InputError("PGM pixel " + std::to_string(i) + " outside 0..255");
      pixels[i] = static_cast<std::uint8_t>(v);
    }
  }
  return pixels;
}

Pixels pixels_from_values(std::span<const long long> values) {
  if (values.size() != kImagePixels) {
    throw InputError("expected " + std::to_string(kImagePixels) + " pixels, got " + std::to_string(values.size()));
  }
  Pixels pixels{};
  for (std::size_t i = 0; i < kImagePixels; ++i) {
    if (values[i] < 0 || values[i] > 255) {
      throw InputError("pixel " + std::to_string(i) + " value " + std::to_string(values[i]) + " outside 0..255");
    }
    pixels[i] = static_cast<std::uint8_t>(values[i]);
  }
  return pixels;
}

Pixels parse_pixel_text(std::string_view text) {
  std::vector<long long> values;
  std::size_t pos = 0;
  while (pos < text.size()) {
    while (pos < text.size() && (is_space(text[pos]) || text[pos] == ',')) ++pos;
    if (pos >= text.size()) break;
    long long v = 0;
    auto [ptr, ec] = std::from_chars(text.data() + pos, text.data() + text.size(), v);
    if (ec != std::errc()) throw InputError("malformed pixel value at offset " + std::to_string(pos));
    const auto next = static_cast<std::size_t>(ptr - text.data());
    if (next < text.size() && !is_space(text[next]) && text[next] != ',') {
      throw InputError("malformed pixel value at offset " + std::to_string(pos));
    }
    values.push_back(v);
    pos = next;
  }
  return pixels_from_values(values);
}

Pixels load_image_pixels(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open image '" + path.string() + "'");
  const std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.starts_with("P5") || bytes.starts_with("P2")) return decode_pgm(bytes);
  if (bytes.size() >= 2 && bytes[0] == 'P' && bytes[1] >= '0' && bytes[1] <= '9') {
    throw InputError("unsupported image format (expected PGM P5 or P2)");
  }
  return parse_pixel_text(bytes);
}

Tensor pixels_to_tensor(const Pixels& pixels) {
  Tensor t({1, 1, kImageSide, kImageSide});
  for (std::size_t i = 0; i < kImagePixels; ++i) t[i] = static_cast<float>(pixels[i]) / 255.0f;
  return t;
}

Prediction predict(const Model& model, const Pixels& pixels) {
  const auto probs = model.infer(pixels_to_tensor(pixels));
  Prediction p;
  for (std::size_t c = 0; c < kNumClasses; ++c) p.probabilities[c] = probs[c];
  p.top = argmax<float>(p.probabilities);
  return p;
}

std::string prediction_json(const Prediction& prediction, double latency_ms) {
  json probs = json::object();
  for (std::size_t c = 0; c < kNumClasses; ++c) {
    probs[std::string(class_names()[c])] = static_cast<double>(prediction.probabilities[c]);
  }
  json out{{"probabilities", probs},
           {"label", std::string(class_names()[prediction.top])},
           {"latency_ms", latency_ms}};
  return out.dump();
}

InferenceService::InferenceService(std::shared_ptr<const Model> model, std::optional<std::filesystem::path> static_dir)
    : model_(std::move(model)), server_(std::make_unique<httplib::Server>()) {
  if (!model_) throw std::invalid_argument("inference service needs a model");
  auto& svr = *server_;
  svr.set_payload_max_length(kMaxBodyBytes);

  svr.Get("/healthz", [](const httplib::Request&, httplib::Response& res) { res.set_content("ok", "text/plain"); });

  svr.Post("/api/v1/predict", [this](const httplib::Request& req, httplib::Response& res) {
    HttpReply reply;
    if (req.is_multipart_form_data()) {
      if (!req.has_file("image")) {
        reply = {400, json{{"error", "multipart upload must carry a PGM in field 'image'"}}.dump()};
      } else {
        reply = handle_predict_pgm(req.get_file_value("image").content);
      }
    } else {
      reply = handle_predict_json(req.body);
    }
    res.status = reply.status;
    res.set_content(reply.body, reply.content_type.c_str());
  });

  if (static_dir && std::filesystem::is_directory(*static_dir)) {
    svr.set_mount_point("/", static_dir->string());
  } else {
    svr.Get("/", [](const httplib::Request&, httplib::Response& res) {
      res.set_content(std::string(kFallbackPage), "text/html");
    });
  }
}

InferenceService::~InferenceService() { stop(); }

HttpReply InferenceService::respond(const Pixels& pixels) const {
  const auto started = std::chrono::steady_clock::now();
  const auto prediction = predict(*model_, pixels);
  const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - started).count();
  return {200, prediction_json(prediction, ms)};
}

HttpReply InferenceService::handle_predict_json(std::string_view body) const {
  try {
    const auto doc = json::parse(body);
    if (!doc.is_object() || !doc.contains("pixels") || !doc["pixels"].is_array()) {
      return {400, json{{"error", "body must be a JSON object with a 'pixels' array"}}.dump()};
    }
    std::vector<long long> values;
    values.reserve(doc["pixels"].size());
    for (const auto& v : doc["pixels"]) {
      if (!v.is_number_integer()) return {400, json{{"error", "pixels must be integers 0..255"}}.dump()};
      values.push_back(v.get<long long>());
    }
    return respond(pixels_from_values(values));
  } catch (const json::exception&) {
    return {400, json{{"error", "malformed JSON body"}}.dump()};
  } catch (const InputError& e) {
    return {400, json{{"error", e.what()}}.dump()};
  }
}

HttpReply InferenceService::handle_predict_pgm(std::string_view pgm) const {
  try {
    return respond(decode_pgm(pgm));
  } catch (const InputError& e) {
    return {400, json{{"error", e.what()}}.dump()};
  }
}

int InferenceService::bind(const std::string& host, int port) {
  if (port == 0) return server_->bind_to_any_port(host);
  if (!server_->bind_to_port(host, port)) throw std::runtime_error("cannot bind " + host + ":" + std::to_string(port));
  return port;
}

void InferenceService::listen() { server_->listen_after_bind(); }

void InferenceService::stop() {
  if (server_) server_->stop();
}

}  // namespace fer
