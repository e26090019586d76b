#include "customtext/glyphcore.hpp"

#include <nlohmann/json.hpp>

#include <charconv>

namespace customtext::glyph {

namespace detail {
extern const std::string_view kMono5x7Document;
extern const std::string_view kMono8x12Document;
}  // namespace detail

const std::vector<std::uint8_t>& GlyphFont::bitmap(int codepoint) const {
  auto it = glyphs.find(codepoint);
  if (it == glyphs.end()) throw DomainError("codepoint " + std::to_string(codepoint) + " not in font " + name);
  return it->second;
}

int GlyphFont::tile_width(int size_px) const {
  const int w = (size_px * cell_w + cell_h / 2) / cell_h;
  return w < 1 ? 1 : w;
}

void FontAttributes::validate() const {
  if (size_px < kMinSizePx) {
    throw ContractError("size_px must be >= " + std::to_string(kMinSizePx) + ", got " + std::to_string(size_px));
  }
  if (font.empty()) throw ContractError("font name is empty");
}

GlyphFont load_font(std::string_view document) {
  using nlohmann::json;
  json doc;
  try {
    doc = json::parse(document);
  } catch (const json::parse_error& e) {
    throw FormatError(std::string("font document is not valid JSON: ") + e.what());
  }
  GlyphFont font;
  try {
    font.name = doc.at("name").get<std::string>();
    font.cell_w = doc.at("cell_w").get<int>();
    font.cell_h = doc.at("cell_h").get<int>();
  } catch (const json::exception& e) {
    throw FormatError(std::string("font header: ") + e.what());
  }
  if (font.cell_w <= 0 || font.cell_h <= 0) throw FormatError("font cell dimensions must be positive");
  if (!doc.contains("glyphs") || !doc["glyphs"].is_object()) throw FormatError("font has no glyph map");

  for (const auto& [key, rows] : doc["glyphs"].items()) {
    int codepoint = -1;
    auto [ptr, ec] = std::from_chars(key.data(), key.data() + key.size(), codepoint);
    if (ec != std::errc{} || ptr != key.data() + key.size()) throw FormatError("bad codepoint key '" + key + "'");
    if (!is_printable(codepoint)) throw FormatError("codepoint " + key + " outside printable ASCII");
    if (!rows.is_array() || static_cast<int>(rows.size()) != font.cell_h) {
      throw FormatError("codepoint " + key + ": expected " + std::to_string(font.cell_h) + " rows");
    }
    std::vector<std::uint8_t> bits;
    bits.reserve(static_cast<std::size_t>(font.cell_w) * font.cell_h);
    for (const auto& row : rows) {
      if (!row.is_string()) throw FormatError("codepoint " + key + ": row is not a string");
      const auto& s = row.get_ref<const std::string&>();
      if (static_cast<int>(s.size()) != font.cell_w) {
        throw FormatError("codepoint " + key + ": expected rows of " + std::to_string(font.cell_w) + " columns");
      }
      for (char c : s) {
        if (c != '0' && c != '1') throw FormatError("codepoint " + key + ": rows must contain only '0'/'1'");
        bits.push_back(c == '1' ? 1 : 0);
      }
    }
    font.glyphs[codepoint] = std::move(bits);
  }
  for (int cp = kFirstCodepoint; cp <= kLastCodepoint; ++cp) {
    if (!font.glyphs.contains(cp)) throw CoverageError("font " + font.name + " is missing codepoint " + std::to_string(cp));
  }
  for (auto bit : font.glyphs[32]) {
    if (bit != 0) throw FormatError("codepoint 32: space must be blank");
  }
  return font;
}

std::string_view builtin_font_document(std::string_view name) {
  if (name == "mono5x7") return detail::kMono5x7Document;
  if (name == "mono8x12") return detail::kMono8x12Document;
  throw NotFoundError("no built-in font named " + std::string(name));
}

const FontRegistry& FontRegistry::builtin() {
  static const FontRegistry registry = [] {
    FontRegistry r;
    r.add(load_font(detail::kMono5x7Document));
    r.add(load_font(detail::kMono8x12Document));
    return r;
  }();
  return registry;
}

void FontRegistry::add(GlyphFont font) {
  auto name = font.name;
  fonts_.insert_or_assign(std::move(name), std::move(font));
}

const GlyphFont& FontRegistry::get(std::string_view name) const {
  auto it = fonts_.find(name);
  if (it == fonts_.end()) throw NotFoundError("unknown font " + std::string(name));
  return it->second;
}

bool FontRegistry::has(std::string_view name) const { return fonts_.find(name) != fonts_.end(); }

std::vector<std::string> FontRegistry::names() const {
  std::vector<std::string> out;
  for (const auto& [name, _] : fonts_) out.push_back(name);
  return out;
}

Grid<std::uint8_t> glyph_coverage(const GlyphFont& font, int codepoint, int size_px) {
  if (!is_printable(codepoint)) throw DomainError("codepoint " + std::to_string(codepoint) + " is not printable ASCII");
  if (size_px < 1) throw ContractError("size_px must be positive");
  const auto& bits = font.bitmap(codepoint);
  const int tw = font.tile_width(size_px);
  Grid<std::uint8_t> cov(tw, size_px, 0);
  for (int y = 0; y < size_px; ++y) {
    const int sy = y * font.cell_h / size_px;
    for (int x = 0; x < tw; ++x) {
      const int sx = x * font.cell_w / tw;
      cov.at(x, y) = bits[static_cast<std::size_t>(sy) * font.cell_w + sx];
    }
  }
  return cov;
}

RgbaImage rasterize_glyph(const GlyphFont& font, int codepoint, const FontAttributes& attrs) {
  attrs.validate();
  const auto cov = glyph_coverage(font, codepoint, attrs.size_px);
  const Rgba8 on{attrs.fill[0], attrs.fill[1], attrs.fill[2], 255};
  const Rgba8 off = attrs.background ? Rgba8{(*attrs.background)[0], (*attrs.background)[1], (*attrs.background)[2], 255}
                                     : Rgba8{0, 0, 0, 0};
  RgbaImage tile(cov.width, cov.height);
  for (std::size_t i = 0; i < cov.data.size(); ++i) tile.data[i] = cov.data[i] ? on : off;
  return tile;
}

RgbaImage render_text_line(const GlyphFont& font, std::string_view text, const Box& box,
                           const FontAttributes& attrs) {
  attrs.validate();
  if (box.w <= 0 || box.h <= 0) throw ContractError("text box must have positive extent");
  for (unsigned char c : text) {
    if (!is_printable(c)) throw DomainError("character code " + std::to_string(c) + " is not printable ASCII");
  }
  const int slot = font.tile_width(attrs.size_px);
  const int required = slot * static_cast<int>(text.size());
  if (required > box.w) {
    throw LayoutError("text '" + std::string(text) + "' needs " + std::to_string(required) + "px, box is " +
                          std::to_string(box.w) + "px",
                      required, box.w);
  }
  if (!text.empty() && attrs.size_px > box.h) {
    throw LayoutError("glyph height " + std::to_string(attrs.size_px) + "px exceeds box height", attrs.size_px, box.h);
  }
  const Rgba8 fill_bg = attrs.background ? Rgba8{(*attrs.background)[0], (*attrs.background)[1], (*attrs.background)[2], 255}
                                         : Rgba8{0, 0, 0, 0};
  RgbaImage region(box.w, box.h, fill_bg);
  for (std::size_t i = 0; i < text.size(); ++i) {
    const auto tile = rasterize_glyph(font, static_cast<unsigned char>(text[i]), attrs);
    const int x0 = static_cast<int>(i) * slot;
    for (int y = 0; y < tile.height; ++y) {
      for (int x = 0; x < tile.width; ++x) region.at(x0 + x, y) = tile.at(x, y);
    }
  }
  return region;
}

}  // namespace customtext::glyph
