#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "customtext/grid.hpp"

namespace customtext::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// PNG encoding is deterministic: fixed compression level, no timestamps.
std::vector<std::uint8_t> encode_png(const RgbImage& image);
std::vector<std::uint8_t> encode_png(const GrayImage& image);
RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes);
GrayImage decode_png_gray(std::span<const std::uint8_t> bytes);

void write_png(const std::filesystem::path& path, const RgbImage& image);
void write_png(const std::filesystem::path& path, const GrayImage& image);
RgbImage read_png_rgb(const std::filesystem::path& path);
GrayImage read_png_gray(const std::filesystem::path& path);

std::string sha256_hex(std::span<const std::uint8_t> bytes);
std::string sha256_hex(const std::string& text);
std::string sha256_file(const std::filesystem::path& path);

// FNV-1a, used where a small stable hash is enough (prompt style tokens).
std::uint64_t fnv1a64(std::string_view text);

// Minimal ustar writer; entries keep insertion order and carry mtime 0.
struct TarEntry {
  std::string name;
  std::vector<std::uint8_t> bytes;
};
std::vector<std::uint8_t> make_tar(const std::vector<TarEntry>& entries);
std::vector<TarEntry> read_tar(std::span<const std::uint8_t> archive);

}  // namespace customtext::io
