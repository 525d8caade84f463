#include "shiftq/checkpoint.hpp"

#include <bit>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace shiftq {

using nlohmann::json;

namespace {

constexpr char kHexDigits[] = "0123456789abcdef";

int hex_value(char c) {
  if (c >= '0' && c <= '9') return c - '0';
  if (c >= 'a' && c <= 'f') return c - 'a' + 10;
  if (c >= 'A' && c <= 'F') return c - 'A' + 10;
  throw std::invalid_argument(std::string("invalid hex digit '") + c + "'");
}

}  // namespace

std::string encode_bytes_hex(std::span<const std::uint8_t> bytes) {
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(kHexDigits[b >> 4]);
    out.push_back(kHexDigits[b & 0xF]);
  }
  return out;
}

std::vector<std::uint8_t> decode_bytes_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) throw std::invalid_argument("hex string has odd length");
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>(hex_value(hex[2 * i]) << 4 | hex_value(hex[2 * i + 1]));
  }
  return out;
}

std::string encode_f64_hex(std::span<const double> values) {
  std::vector<std::uint8_t> bytes;
  bytes.reserve(values.size() * 8);
  for (double v : values) {
    const auto bits = std::bit_cast<std::uint64_t>(v);
    for (int k = 0; k < 8; ++k) bytes.push_back(static_cast<std::uint8_t>(bits >> (8 * k)));
  }
  return encode_bytes_hex(bytes);
}

std::vector<double> decode_f64_hex(const std::string& hex, std::size_t expected_count) {
  const auto bytes = decode_bytes_hex(hex);
  if (bytes.size() != expected_count * 8) {
    throw std::invalid_argument("parameter array holds " + std::to_string(bytes.size() / 8) + " values, expected " +
                                std::to_string(expected_count));
  }
  std::vector<double> out(expected_count);
  for (std::size_t i = 0; i < expected_count; ++i) {
    std::uint64_t bits = 0;
    for (int k = 0; k < 8; ++k) bits |= static_cast<std::uint64_t>(bytes[i * 8 + k]) << (8 * k);
    out[i] = std::bit_cast<double>(bits);
  }
  return out;
}

json tensor_to_json(const Tensor& t) {
  return json{{"shape", t.shape()}, {"dtype", "f64"}, {"element_width", 8}, {"encoding", "hex-le"},
              {"data", encode_f64_hex(t.data())}};
}

Tensor tensor_from_json(const json& j) {
  if (j.at("dtype").get<std::string>() != "f64" || j.at("element_width").get<int>() != 8) {
    throw std::invalid_argument("unsupported parameter element type");
  }
  if (j.at("encoding").get<std::string>() != "hex-le") throw std::invalid_argument("unsupported parameter encoding");
  auto shape = j.at("shape").get<Shape>();
  const std::size_t n = shape_size(shape);
  return Tensor(std::move(shape), decode_f64_hex(j.at("data").get<std::string>(), n));
}

json network_to_json(const Network& net) {
  json layers = json::array();
  for (const Layer& l : net.layers()) {
    json jl{{"kind", to_string(l.kind)}, {"in_shape", l.in_shape}, {"out_shape", l.out_shape}};
    if (l.kind == LayerKind::relu) jl["negative_slope"] = encode_f64_hex(std::span<const double>(&l.negative_slope, 1));
    if (l.has_params()) jl["weights"] = tensor_to_json(l.weights);
    if (l.has_bias()) jl["bias"] = tensor_to_json(l.bias);
    layers.push_back(std::move(jl));
  }
  return json{{"format", "shiftq-network"}, {"version", kNetworkCheckpointVersion},
              {"feature_cut", net.feature_cut()}, {"layers", std::move(layers)}};
}

Network network_from_json(const json& j) {
  if (j.at("format").get<std::string>() != "shiftq-network") throw std::invalid_argument("not a network checkpoint");
  const int version = j.at("version").get<int>();
  if (version != kNetworkCheckpointVersion) {
    throw std::invalid_argument("unsupported network checkpoint version " + std::to_string(version));
  }
  std::vector<Layer> layers;
  for (const auto& jl : j.at("layers")) {
    Layer l;
    l.kind = layer_kind_from_string(jl.at("kind").get<std::string>());
    l.in_shape = jl.at("in_shape").get<Shape>();
    l.out_shape = jl.at("out_shape").get<Shape>();
    if (jl.contains("negative_slope")) l.negative_slope = decode_f64_hex(jl["negative_slope"].get<std::string>(), 1)[0];
    if (jl.contains("weights")) l.weights = tensor_from_json(jl["weights"]);
    if (jl.contains("bias")) l.bias = tensor_from_json(jl["bias"]);
    layers.push_back(std::move(l));
  }
  return Network(std::move(layers), j.at("feature_cut").get<std::size_t>());
}

void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open '" + path.string() + "' for writing: " + std::strerror(errno));
  out << text;
  out.close();
  if (!out) throw std::runtime_error("failed writing '" + path.string() + "': " + std::strerror(errno));
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open '" + path.string() + "' for reading: " + std::strerror(errno));
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void save_network(const Network& net, const std::filesystem::path& path) {
  write_text_file(path, network_to_json(net).dump(1) + "\n");
}

Network load_network(const std::filesystem::path& path) {
  return network_from_json(json::parse(read_text_file(path)));
}

}  // namespace shiftq
