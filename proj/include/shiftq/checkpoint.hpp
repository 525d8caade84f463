#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "shiftq/nn.hpp"

namespace shiftq {

inline constexpr int kNetworkCheckpointVersion = 1;

// Parameter arrays are stored as hex of their little-endian IEEE-754 bytes so
// that a reload is bitwise identical, including signed zeros.
std::string encode_f64_hex(std::span<const double> values);
std::vector<double> decode_f64_hex(const std::string& hex, std::size_t expected_count);
std::string encode_bytes_hex(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> decode_bytes_hex(const std::string& hex);

nlohmann::json tensor_to_json(const Tensor& t);
Tensor tensor_from_json(const nlohmann::json& j);

nlohmann::json network_to_json(const Network& net);
Network network_from_json(const nlohmann::json& j);

void save_network(const Network& net, const std::filesystem::path& path);
Network load_network(const std::filesystem::path& path);

// Shared file helpers; IO failures are surfaced with the path and errno text.
void write_text_file(const std::filesystem::path& path, const std::string& text);
std::string read_text_file(const std::filesystem::path& path);

}  // namespace shiftq
