#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "htb/image.hpp"

namespace htb::io {

using nlohmann::json;

std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);

void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const json& j);

// float32 little-endian, independent of host byte order.
void append_f32le(std::vector<std::uint8_t>& out, std::span<const float> values);
std::vector<float> decode_f32le(std::span<const std::uint8_t> bytes);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(std::string_view text);
// Hex SHA-256 of a file's contents.
std::string sha256_file(const std::filesystem::path& path);

// 8-bit RGB (or gray) PNG; pixels rounded half-up and clamped to [0, 255].
void write_png(const std::filesystem::path& path, const ImageTensor& image);
ImageTensor read_png(const std::filesystem::path& path);

}  // namespace htb::io
