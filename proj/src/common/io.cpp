#include "customtext/io.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <memory>
#include <sstream>

namespace customtext::io {

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("short write to " + path.string());
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  write_file(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string read_text(const std::filesystem::path& path) {
  auto bytes = read_file(path);
  return {bytes.begin(), bytes.end()};
}

namespace {

void png_write_to_vector(png_structp png, png_bytep data, png_size_t length) {
  auto* out = static_cast<std::vector<std::uint8_t>*>(png_get_io_ptr(png));
  out->insert(out->end(), data, data + length);
}

void png_flush_noop(png_structp) {}

[[noreturn]] void png_error_throw(png_structp, png_const_charp message) {
  throw FormatError(std::string("png: ") + message);
}

void png_warning_ignore(png_structp, png_const_charp) {}

std::vector<std::uint8_t> encode_png_raw(int width, int height, int channels, const std::uint8_t* pixels) {
  if (width <= 0 || height <= 0) throw ContractError("cannot encode an empty image");
  std::vector<std::uint8_t> out;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  try {
    png_set_write_fn(png, &out, png_write_to_vector, png_flush_noop);
    png_set_compression_level(png, 6);
    png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8,
                 channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE,
                 PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    const std::size_t stride = static_cast<std::size_t>(width) * channels;
    for (int y = 0; y < height; ++y) {
      png_write_row(png, const_cast<png_bytep>(pixels + stride * y));
    }
    png_write_end(png, nullptr);
  } catch (...) {
    png_destroy_write_struct(&png, &info);
    throw;
  }
  png_destroy_write_struct(&png, &info);
  return out;
}

struct ReadCursor {
  std::span<const std::uint8_t> bytes;
  std::size_t offset = 0;
};

void png_read_from_span(png_structp png, png_bytep data, png_size_t length) {
  auto* cursor = static_cast<ReadCursor*>(png_get_io_ptr(png));
  if (cursor->offset + length > cursor->bytes.size()) png_error(png, "truncated stream");
  std::memcpy(data, cursor->bytes.data() + cursor->offset, length);
  cursor->offset += length;
}

// Decodes to 8-bit with the requested channel count (1 or 3).
std::vector<std::uint8_t> decode_png_raw(std::span<const std::uint8_t> bytes, int want_channels, int& width,
                                         int& height) {
  if (bytes.size() < 8 || png_sig_cmp(bytes.data(), 0, 8) != 0) throw FormatError("not a PNG stream");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_throw, png_warning_ignore);
  png_infop info = png_create_info_struct(png);
  std::vector<std::uint8_t> pixels;
  ReadCursor cursor{bytes, 0};
  try {
    png_set_read_fn(png, &cursor, png_read_from_span);
    png_read_info(png, info);
    width = static_cast<int>(png_get_image_width(png, info));
    height = static_cast<int>(png_get_image_height(png, info));
    const int color = png_get_color_type(png, info);
    const int depth = png_get_bit_depth(png, info);
    if (depth == 16) png_set_strip_16(png);
    if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
    if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
    const bool is_gray = (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA);
    if (want_channels == 3 && is_gray) png_set_gray_to_rgb(png);
    if (want_channels == 1 && !is_gray) png_set_rgb_to_gray_fixed(png, 1, -1, -1);
    png_read_update_info(png, info);
    const std::size_t stride = png_get_rowbytes(png, info);
    if (stride != static_cast<std::size_t>(width) * want_channels) png_error(png, "unexpected row layout");
    pixels.resize(stride * height);
    for (int y = 0; y < height; ++y) png_read_row(png, pixels.data() + stride * y, nullptr);
  } catch (...) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw;
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return pixels;
}

}  // namespace

std::vector<std::uint8_t> encode_png(const RgbImage& image) {
  return encode_png_raw(image.width, image.height, 3, reinterpret_cast<const std::uint8_t*>(image.data.data()));
}

std::vector<std::uint8_t> encode_png(const GrayImage& image) {
  return encode_png_raw(image.width, image.height, 1, image.data.data());
}

RgbImage decode_png_rgb(std::span<const std::uint8_t> bytes) {
  int w = 0, h = 0;
  auto raw = decode_png_raw(bytes, 3, w, h);
  RgbImage image(w, h);
  std::memcpy(image.data.data(), raw.data(), raw.size());
  return image;
}

GrayImage decode_png_gray(std::span<const std::uint8_t> bytes) {
  int w = 0, h = 0;
  auto raw = decode_png_raw(bytes, 1, w, h);
  GrayImage image(w, h);
  image.data = std::move(raw);
  return image;
}

void write_png(const std::filesystem::path& path, const RgbImage& image) { write_file(path, encode_png(image)); }
void write_png(const std::filesystem::path& path, const GrayImage& image) { write_file(path, encode_png(image)); }
RgbImage read_png_rgb(const std::filesystem::path& path) { return decode_png_rgb(read_file(path)); }
GrayImage read_png_gray(const std::filesystem::path& path) { return decode_png_gray(read_file(path)); }

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int length = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &length, EVP_sha256(), nullptr) != 1) {
    throw Error("crypto", "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(length * 2);
  for (unsigned int i = 0; i < length; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 0xF]);
  }
  return out;
}

std::string sha256_hex(const std::string& text) {
  return sha256_hex({reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

std::string sha256_file(const std::filesystem::path& path) { return sha256_hex(read_file(path)); }

std::uint64_t fnv1a64(std::string_view text) {
  std::uint64_t h = 14695981039346656037ull;
  for (unsigned char c : text) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

namespace {

void put_octal(char* field, std::size_t width, std::uint64_t value) {
  // width includes the terminating NUL
  std::snprintf(field, width, "%0*llo", static_cast<int>(width - 1), static_cast<unsigned long long>(value));
}

}  // namespace

std::vector<std::uint8_t> make_tar(const std::vector<TarEntry>& entries) {
  std::vector<std::uint8_t> out;
  for (const auto& entry : entries) {
    if (entry.name.empty() || entry.name.size() > 99) throw ContractError("tar entry name must be 1..99 chars");
    char header[512];
    std::memset(header, 0, sizeof header);
    std::memcpy(header, entry.name.data(), entry.name.size());
    put_octal(header + 100, 8, 0644);
    put_octal(header + 108, 8, 0);
    put_octal(header + 116, 8, 0);
    put_octal(header + 124, 12, entry.bytes.size());
    put_octal(header + 136, 12, 0);
    std::memset(header + 148, ' ', 8);
    header[156] = '0';
    std::memcpy(header + 257, "ustar", 6);
    std::memcpy(header + 263, "00", 2);
    unsigned checksum = 0;
    for (unsigned char c : header) checksum += c;
    std::snprintf(header + 148, 8, "%06o", checksum);
    header[155] = ' ';
    out.insert(out.end(), header, header + 512);
    out.insert(out.end(), entry.bytes.begin(), entry.bytes.end());
    out.resize(out.size() + (512 - entry.bytes.size() % 512) % 512, 0);
  }
  out.resize(out.size() + 1024, 0);
  return out;
}

std::vector<TarEntry> read_tar(std::span<const std::uint8_t> archive) {
  std::vector<TarEntry> entries;
  std::size_t offset = 0;
  while (offset + 512 <= archive.size()) {
    const auto* header = reinterpret_cast<const char*>(archive.data() + offset);
    if (header[0] == '\0') break;
    TarEntry entry;
    entry.name.assign(header, strnlen(header, 100));
    const std::size_t size = std::strtoull(std::string(header + 124, 12).c_str(), nullptr, 8);
    offset += 512;
    if (offset + size > archive.size()) throw FormatError("truncated tar entry " + entry.name);
    entry.bytes.assign(archive.begin() + offset, archive.begin() + offset + size);
    offset += (size + 511) / 512 * 512;
    entries.push_back(std::move(entry));
  }
  return entries;
}

}  // namespace customtext::io
