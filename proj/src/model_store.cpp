#include "fer/model_store.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include <json.hpp>

namespace fer {

namespace {

using nlohmann::json;

constexpr std::array<std::uint8_t, 4> kMagic{'F', 'E', 'R', 'M'};
constexpr std::size_t kPreambleSize = 12;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(std::span<const std::uint8_t> bytes, std::size_t at) {
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[at + i]) << (8 * i);
  return v;
}

void put_f32(std::vector<std::uint8_t>& out, float value) {
  put_u32(out, std::bit_cast<std::uint32_t>(value));
}

json spec_to_json(const LayerSpec& s) {
  json j;
  j["kind"] = std::string(to_string(s.kind));
  switch (s.kind) {
    case LayerKind::conv2d:
      j["in_channels"] = s.in_channels;
      j["out_channels"] = s.out_channels;
      j["kernel"] = {s.kernel_h, s.kernel_w};
      j["stride"] = s.stride;
      j["padding"] = std::string(to_string(s.padding));
      break;
    case LayerKind::batchnorm:
      j["channels"] = s.channels;
      j["epsilon"] = s.epsilon;
      j["momentum"] = s.momentum;
      break;
    case LayerKind::maxpool2d:
      j["window"] = s.window;
      j["stride"] = s.stride;
      break;
    case LayerKind::dropout:
      j["rate"] = s.rate;
      break;
    case LayerKind::dense:
      j["in_features"] = s.in_features;
      j["out_features"] = s.out_features;
      break;
    case LayerKind::relu:
    case LayerKind::flatten:
    case LayerKind::softmax:
      break;
  }
  return j;
}

LayerSpec spec_from_json(const json& j) {
  LayerSpec s;
  s.kind = parse_layer_kind(j.at("kind").get<std::string>());
  switch (s.kind) {
    case LayerKind::conv2d:
      s.in_channels = j.at("in_channels").get<std::size_t>();
      s.out_channels = j.at("out_channels").get<std::size_t>();
      s.kernel_h = j.at("kernel").at(0).get<std::size_t>();
      s.kernel_w = j.at("kernel").at(1).get<std::size_t>();
      s.stride = j.at("stride").get<std::size_t>();
      s.padding = parse_padding(j.at("padding").get<std::string>());
      break;
    case LayerKind::batchnorm:
      s.channels = j.at("channels").get<std::size_t>();
      s.epsilon = j.at("epsilon").get<double>();
      s.momentum = j.at("momentum").get<double>();
      break;
    case LayerKind::maxpool2d:
      s.window = j.at("window").get<std::size_t>();
      s.stride = j.at("stride").get<std::size_t>();
      break;
    case LayerKind::dropout:
      s.rate = j.at("rate").get<double>();
      break;
    case LayerKind::dense:
      s.in_features = j.at("in_features").get<std::size_t>();
      s.out_features = j.at("out_features").get<std::size_t>();
      break;
    case LayerKind::relu:
    case LayerKind::flatten:
    case LayerKind::softmax:
      break;
  }
  return s;
}

}  // namespace

ModelFormatError::ModelFormatError(Kind kind, const std::string& detail)
    : std::runtime_error(std::string(to_string(kind)) + (detail.empty() ? "" : ": " + detail)), kind_(kind) {}

std::string_view to_string(ModelFormatError::Kind kind) {
  using K = ModelFormatError::Kind;
  switch (kind) {
    case K::io: return "i/o error";
    case K::bad_magic: return "bad magic";
    case K::unsupported_version: return "unsupported version";
    case K::bad_header: return "bad header";
    case K::manifest_mismatch: return "manifest mismatch";
    case K::truncated_body: return "truncated body";
  }
  return "model format error";
}

std::vector<std::uint8_t> serialize_model(const Model& model) {
  json header;
  header["input"] = model.input_shape();
  header["layers"] = json::array();
  header["blobs"] = json::array();
  std::vector<std::uint8_t> body;
  for (std::size_t i = 0; i < model.num_layers(); ++i) {
    const auto& layer = model.layer(i);
    header["layers"].push_back(spec_to_json(layer.spec()));
    for (const auto& [name, tensor] : layer.state()) {
      const auto offset = body.size();
      for (float v : tensor->data()) put_f32(body, v);
      header["blobs"].push_back(json{{"layer", i},
                                     {"name", name},
                                     {"shape", tensor->shape()},
                                     {"offset", offset},
                                     {"length", body.size() - offset}});
    }
  }
  const std::string text = header.dump();
  std::vector<std::uint8_t> out(kMagic.begin(), kMagic.end());
  put_u32(out, kModelFormatVersion);
  put_u32(out, static_cast<std::uint32_t>(text.size()));
  out.insert(out.end(), text.begin(), text.end());
  out.insert(out.end(), body.begin(), body.end());
  return out;
}

Model deserialize_model(std::span<const std::uint8_t> bytes) {
  using K = ModelFormatError::Kind;
  if (bytes.size() < kMagic.size() || !std::equal(kMagic.begin(), kMagic.end(), bytes.begin())) {
    throw ModelFormatError(K::bad_magic, "file does not start with FERM");
  }
  if (bytes.size() < kPreambleSize) throw ModelFormatError(K::bad_header, "file too short for preamble");
  const auto version = get_u32(bytes, 4);
  if (version != kModelFormatVersion) {
    throw ModelFormatError(K::unsupported_version, "version " + std::to_string(version) + ", expected " +
                                                       std::to_string(kModelFormatVersion));
  }
  const auto header_length = get_u32(bytes, 8);
  if (bytes.size() - kPreambleSize < header_length) {
    throw ModelFormatError(K::bad_header, "header length exceeds file size");
  }
  const auto body = bytes.subspan(kPreambleSize + header_length);

  json header;
  std::vector<LayerSpec> specs;
  Shape input_shape;
  try {
    header = json::parse(bytes.begin() + kPreambleSize, bytes.begin() + kPreambleSize + header_length);
    input_shape = header.at("input").get<Shape>();
    for (const auto& layer : header.at("layers")) specs.push_back(spec_from_json(layer));
    if (!header.at("blobs").is_array()) throw ModelFormatError(K::bad_header, "blobs must be an array");
  } catch (const json::exception& e) {
    throw ModelFormatError(K::bad_header, e.what());
  } catch (const LayerError& e) {
    throw ModelFormatError(K::bad_header, e.what());
  }

  Rng unused(0);
  std::vector<std::unique_ptr<Layer<float>>> layers;
  try {
    for (const auto& spec : specs) layers.push_back(make_layer<float>(spec, unused));
  } catch (const LayerError& e) {
    throw ModelFormatError(K::bad_header, e.what());
  }

  // Expected manifest, in the order save_model writes it.
  std::vector<std::pair<std::size_t, Layer<float>::NamedTensor>> expected;
  for (std::size_t i = 0; i < layers.size(); ++i)
    for (auto& named : layers[i]->mutable_state()) expected.emplace_back(i, named);

  const auto& blobs = header["blobs"];
  if (blobs.size() != expected.size()) {
    throw ModelFormatError(K::manifest_mismatch, "manifest lists " + std::to_string(blobs.size()) +
                                                     " blobs, architecture needs " + std::to_string(expected.size()));
  }
  std::size_t cursor = 0;
  for (std::size_t b = 0; b < blobs.size(); ++b) {
    const auto& entry = blobs[b];
    auto& [layer_index, named] = expected[b];
    std::size_t offset = 0, length = 0, entry_layer = 0;
    Shape shape;
    std::string name;
    try {
      entry_layer = entry.at("layer").get<std::size_t>();
      name = entry.at("name").get<std::string>();
      shape = entry.at("shape").get<Shape>();
      offset = entry.at("offset").get<std::size_t>();
      length = entry.at("length").get<std::size_t>();
    } catch (const json::exception& e) {
      throw ModelFormatError(K::bad_header, e.what());
    }
    const std::string where = "blob " + std::to_string(b) + " (layer " + std::to_string(entry_layer) + " " + name + ")";
    if (entry_layer != layer_index || name != named.first) {
      throw ModelFormatError(K::manifest_mismatch, where + " does not match the layer list");
    }
    if (shape != named.second->shape()) {
      throw ModelFormatError(K::manifest_mismatch, where + " shape " + shape_string(shape) + ", expected " +
                                                       shape_string(named.second->shape()));
    }
    if (offset != cursor || length != named.second->size() * 4) {
      throw ModelFormatError(K::manifest_mismatch, where + " offset/length do not tile the body");
    }
    if (offset + length > body.size()) {
      throw ModelFormatError(K::truncated_body, where + " needs bytes up to " + std::to_string(offset + length) +
                                                    ", body has " + std::to_string(body.size()));
    }
    auto dst = named.second->data();
    for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = std::bit_cast<float>(get_u32(body, offset + 4 * k));
    cursor = offset + length;
  }
  if (cursor != body.size()) {
    throw ModelFormatError(K::manifest_mismatch, std::to_string(body.size() - cursor) + " trailing body bytes");
  }
  try {
    return Model(std::move(input_shape), std::move(layers));
  } catch (const std::exception& e) {
    throw ModelFormatError(K::bad_header, e.what());
  }
}

void save_model(const Model& model, const std::filesystem::path& path) {
  using K = ModelFormatError::Kind;
  const auto bytes = serialize_model(model);
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw ModelFormatError(K::io, "cannot write '" + tmp.string() + "'");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw ModelFormatError(K::io, "write failed for '" + tmp.string() + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw ModelFormatError(K::io, "cannot move model into '" + path.string() + "'");
  }
}

Model load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ModelFormatError(ModelFormatError::Kind::io, "cannot open '" + path.string() + "'");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace fer
