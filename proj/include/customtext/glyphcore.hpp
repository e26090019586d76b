#pragma once

#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "customtext/geometry.hpp"
#include "customtext/grid.hpp"

namespace customtext::glyph {

inline constexpr int kFirstCodepoint = 32;
inline constexpr int kLastCodepoint = 126;
inline constexpr int kCharCount = kLastCodepoint - kFirstCodepoint + 1;  // 95
inline constexpr int kMinSizePx = 4;

inline bool is_printable(int codepoint) { return codepoint >= kFirstCodepoint && codepoint <= kLastCodepoint; }

// Character-mask index: 0 is non-text, 1..95 map to codepoints 32..126.
inline int char_index(int codepoint) { return is_printable(codepoint) ? codepoint - 31 : 0; }
inline int index_codepoint(int index) { return index + 31; }

struct GlyphFont {
  std::string name;
  int cell_w = 0;
  int cell_h = 0;
  // Row-major cell_h × cell_w bitmaps, values 0/1.
  std::map<int, std::vector<std::uint8_t>> glyphs;

  const std::vector<std::uint8_t>& bitmap(int codepoint) const;
  // Width of a glyph tile rendered at `size_px` rows; also the layout slot width.
  int tile_width(int size_px) const;
};

struct FontAttributes {
  std::string font = "mono5x7";
  int size_px = 7;
  Rgb8 fill{0, 0, 0};
  std::optional<Rgb8> background;

  void validate() const;
  friend bool operator==(const FontAttributes&, const FontAttributes&) = default;
};

// Parses a bitmap-font document (JSON: name, cell_w, cell_h, glyphs{"65": [rows]}).
GlyphFont load_font(std::string_view document);

// Lookup of fonts by name. The default registry holds the built-in
// mono5x7 and mono8x12 fonts.
class FontRegistry {
 public:
  static const FontRegistry& builtin();

  void add(GlyphFont font);
  const GlyphFont& get(std::string_view name) const;
  bool has(std::string_view name) const;
  std::vector<std::string> names() const;

 private:
  std::map<std::string, GlyphFont, std::less<>> fonts_;
};

std::string_view builtin_font_document(std::string_view name);

RgbaImage rasterize_glyph(const GlyphFont& font, int codepoint, const FontAttributes& attrs);

// Equal-width slots, left aligned, top aligned within `box`.
RgbaImage render_text_line(const GlyphFont& font, std::string_view text, const Box& box,
                           const FontAttributes& attrs);

// On/off coverage of a glyph at `size_px` (same scaling as rasterize_glyph).
Grid<std::uint8_t> glyph_coverage(const GlyphFont& font, int codepoint, int size_px);

}  // namespace customtext::glyph
