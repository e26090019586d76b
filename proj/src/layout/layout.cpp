#include "customtext/layout.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>

namespace customtext::layout {

PromptSpec parse_prompt(std::string_view prompt, int canvas_w, int canvas_h) {
  if (prompt.empty()) throw ContractError("prompt is empty");
  if (canvas_w <= 0 || canvas_h <= 0) throw ContractError("canvas must have positive extent");
  PromptSpec spec;
  spec.canvas_w = canvas_w;
  spec.canvas_h = canvas_h;
  std::size_t i = 0;
  while (i < prompt.size()) {
    const char c = prompt[i];
    if (c != '\'') {
      spec.prose.push_back(c);
      ++i;
      continue;
    }
    const std::size_t close = prompt.find('\'', i + 1);
    if (close == std::string_view::npos) throw ParseError("unmatched single quote at position " + std::to_string(i), i);
    std::string span(prompt.substr(i + 1, close - i - 1));
    if (span.empty()) throw ParseError("empty quoted span at position " + std::to_string(i), i);
    for (std::size_t k = 0; k < span.size(); ++k) {
      if (!glyph::is_printable(static_cast<unsigned char>(span[k]))) {
        throw ParseError("non-printable character in quoted span", i + 1 + k);
      }
    }
    spec.prose += "<text" + std::to_string(spec.spans.size()) + ">";
    spec.spans.push_back(std::move(span));
    i = close + 1;
  }
  return spec;
}

std::vector<std::string> split_words(std::string_view text) {
  std::vector<std::string> words;
  std::size_t i = 0;
  while (i < text.size()) {
    while (i < text.size() && text[i] == ' ') ++i;
    std::size_t j = i;
    while (j < text.size() && text[j] != ' ') ++j;
    if (j > i) words.emplace_back(text.substr(i, j - i));
    i = j;
  }
  return words;
}

namespace {

struct WordToken {
  std::string text;
  int offset;
};

std::vector<WordToken> tokenize(const std::string& text) {
  std::vector<WordToken> out;
  int i = 0;
  const int n = static_cast<int>(text.size());
  while (i < n) {
    while (i < n && text[i] == ' ') ++i;
    int j = i;
    while (j < n && text[j] != ' ') ++j;
    if (j > i) out.push_back({text.substr(i, j - i), i});
    i = j;
  }
  return out;
}

// Greedy wrap; each line holds indices into `tokens`.
std::vector<std::vector<int>> wrap_lines(const std::vector<WordToken>& tokens, int slot, int canvas_w, int span_index) {
  std::vector<std::vector<int>> lines;
  int line_w = 0;
  for (int k = 0; k < static_cast<int>(tokens.size()); ++k) {
    const int w = slot * static_cast<int>(tokens[k].text.size());
    if (w > canvas_w) {
      throw LayoutError("span " + std::to_string(span_index) + ": word '" + tokens[k].text + "' needs " +
                            std::to_string(w) + "px, canvas is " + std::to_string(canvas_w) + "px wide",
                        w, canvas_w, span_index);
    }
    if (!lines.empty() && line_w + slot + w <= canvas_w) {
      lines.back().push_back(k);
      line_w += slot + w;
    } else {
      lines.push_back({k});
      line_w = w;
    }
  }
  return lines;
}

}  // namespace

int span_block_height(const std::string& text, const glyph::GlyphFont& font, int size_px, int canvas_w,
                      int span_index) {
  const auto tokens = tokenize(text);
  if (tokens.empty()) return 0;
  const auto lines = wrap_lines(tokens, font.tile_width(size_px), canvas_w, span_index);
  const int n = static_cast<int>(lines.size());
  return n * size_px + (n - 1) * kLeadingPx;
}

std::vector<PlacedWord> layout_span(int span_index, const std::string& text, const glyph::GlyphFont& font,
                                    int size_px, int top, int canvas_w) {
  const int slot = font.tile_width(size_px);
  const auto tokens = tokenize(text);
  const auto lines = wrap_lines(tokens, slot, canvas_w, span_index);
  std::vector<PlacedWord> out;
  int y = top;
  for (const auto& line : lines) {
    int line_w = 0;
    for (std::size_t k = 0; k < line.size(); ++k) {
      line_w += slot * static_cast<int>(tokens[line[k]].text.size()) + (k ? slot : 0);
    }
    int x = (canvas_w - line_w) / 2;
    for (int idx : line) {
      const auto& tok = tokens[idx];
      PlacedWord word;
      word.span_index = span_index;
      word.text = tok.text;
      word.offset = tok.offset;
      word.box = Box{x, y, slot * static_cast<int>(tok.text.size()), size_px};
      for (std::size_t c = 0; c < tok.text.size(); ++c) {
        word.char_boxes.push_back(Box{x + static_cast<int>(c) * slot, y, slot, size_px});
      }
      x += word.box.w + slot;
      out.push_back(std::move(word));
    }
    y += size_px + kLeadingPx;
  }
  return out;
}

LayoutPlan RulePlacer::place(const PromptSpec& spec, const std::vector<glyph::FontAttributes>& attrs,
                             std::uint64_t /*seed*/) const {
  if (attrs.size() != spec.spans.size()) {
    throw ContractError("expected " + std::to_string(spec.spans.size()) + " attribute sets, got " +
                        std::to_string(attrs.size()));
  }
  LayoutPlan plan;
  plan.canvas_w = spec.canvas_w;
  plan.canvas_h = spec.canvas_h;
  std::vector<int> heights;
  int total = 0;
  int blocks = 0;
  for (std::size_t i = 0; i < spec.spans.size(); ++i) {
    attrs[i].validate();
    const auto& font = fonts_.get(attrs[i].font);
    plan.spans.push_back({spec.spans[i], attrs[i].font, attrs[i].size_px});
    const int h = span_block_height(spec.spans[i], font, attrs[i].size_px, spec.canvas_w, static_cast<int>(i));
    heights.push_back(h);
    if (h > 0) {
      total += h + (blocks ? kSpanGapPx : 0);
      ++blocks;
    }
    if (total > spec.canvas_h) {
      throw LayoutError("span " + std::to_string(i) + " ('" + spec.spans[i] + "') overflows the canvas height: " +
                            "text block needs " + std::to_string(total) + "px, canvas is " +
                            std::to_string(spec.canvas_h) + "px",
                        total, spec.canvas_h, static_cast<int>(i));
    }
  }
  int y = (spec.canvas_h - total) / 2;
  for (std::size_t i = 0; i < spec.spans.size(); ++i) {
    if (heights[i] == 0) continue;
    auto words = layout_span(static_cast<int>(i), spec.spans[i], fonts_.get(attrs[i].font), attrs[i].size_px, y,
                             spec.canvas_w);
    for (auto& w : words) plan.words.push_back(std::move(w));
    y += heights[i] + kSpanGapPx;
  }
  return plan;
}

LayoutPlan allocate_boxes(const PromptSpec& spec, const std::vector<glyph::FontAttributes>& attrs, std::uint64_t seed,
                          const glyph::FontRegistry& fonts) {
  return RulePlacer(fonts).place(spec, attrs, seed);
}

std::vector<Violation> validate_plan(const LayoutPlan& plan, int canvas_w, int canvas_h) {
  std::vector<Violation> out;
  auto in_bounds = [&](const Box& b) { return b.x >= 0 && b.y >= 0 && b.right() <= canvas_w && b.bottom() <= canvas_h; };
  const int n = static_cast<int>(plan.words.size());
  for (int i = 0; i < n; ++i) {
    const auto& w = plan.words[i];
    if (w.span_index < 0 || w.span_index >= static_cast<int>(plan.spans.size())) {
      out.push_back({Violation::Kind::BadSpan, i, -1, "word " + std::to_string(i) + " references unknown span"});
    }
    if (w.box.w <= 0 || w.box.h <= 0) {
      out.push_back({Violation::Kind::Degenerate, i, -1, "word " + std::to_string(i) + " has an empty box"});
      continue;
    }
    if (!in_bounds(w.box)) {
      out.push_back({Violation::Kind::OutOfBounds, i, -1, "word " + std::to_string(i) + " box leaves the canvas"});
    }
    bool tiles = w.char_boxes.size() == w.text.size() && !w.char_boxes.empty();
    if (tiles) {
      const int slot = w.char_boxes.front().w;
      for (std::size_t c = 0; c < w.char_boxes.size() && tiles; ++c) {
        const auto& cb = w.char_boxes[c];
        tiles = cb.w == slot && cb.w > 0 && cb.y == w.box.y && cb.h == w.box.h &&
                cb.x == w.box.x + static_cast<int>(c) * slot;
      }
      tiles = tiles && slot * static_cast<int>(w.char_boxes.size()) == w.box.w;
    }
    if (!tiles) {
      out.push_back({Violation::Kind::CharTiling, i, -1,
                     "word " + std::to_string(i) + " char boxes do not tile its word box"});
    }
  }
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (plan.words[i].box.intersects(plan.words[j].box)) {
        out.push_back({Violation::Kind::Overlap, i, j,
                       "words " + std::to_string(i) + " and " + std::to_string(j) + " overlap"});
      }
    }
  }
  return out;
}

namespace {

nlohmann::json box_json(const Box& b) { return nlohmann::json::array({b.x, b.y, b.w, b.h}); }

Box box_from(const nlohmann::json& j) {
  if (!j.is_array() || j.size() != 4) throw FormatError("box must be [x, y, w, h]");
  return Box{j[0].get<int>(), j[1].get<int>(), j[2].get<int>(), j[3].get<int>()};
}

}  // namespace

nlohmann::json to_json(const LayoutPlan& plan) {
  nlohmann::json doc;
  doc["canvas"] = {plan.canvas_w, plan.canvas_h};
  doc["spans"] = nlohmann::json::array();
  for (const auto& s : plan.spans) doc["spans"].push_back({{"text", s.text}, {"font", s.font}, {"size_px", s.size_px}});
  doc["words"] = nlohmann::json::array();
  for (const auto& w : plan.words) {
    nlohmann::json chars = nlohmann::json::array();
    for (const auto& c : w.char_boxes) chars.push_back(box_json(c));
    doc["words"].push_back(
        {{"span", w.span_index}, {"text", w.text}, {"offset", w.offset}, {"box", box_json(w.box)}, {"chars", chars}});
  }
  return doc;
}

LayoutPlan plan_from_json(const nlohmann::json& doc) {
  try {
    LayoutPlan plan;
    plan.canvas_w = doc.at("canvas").at(0).get<int>();
    plan.canvas_h = doc.at("canvas").at(1).get<int>();
    for (const auto& s : doc.at("spans")) {
      plan.spans.push_back({s.at("text").get<std::string>(), s.at("font").get<std::string>(), s.at("size_px").get<int>()});
    }
    for (const auto& w : doc.at("words")) {
      PlacedWord word;
      word.span_index = w.at("span").get<int>();
      word.text = w.at("text").get<std::string>();
      word.offset = w.at("offset").get<int>();
      word.box = box_from(w.at("box"));
      for (const auto& c : w.at("chars")) word.char_boxes.push_back(box_from(c));
      plan.words.push_back(std::move(word));
    }
    return plan;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("layout plan document: ") + e.what());
  }
}

nlohmann::json to_json(const glyph::FontAttributes& attrs) {
  nlohmann::json doc = {{"font", attrs.font}, {"size_px", attrs.size_px}, {"fill", attrs.fill}};
  doc["background"] = attrs.background ? nlohmann::json(*attrs.background) : nlohmann::json(nullptr);
  return doc;
}

namespace {

Rgb8 color_from(const nlohmann::json& doc) {
  const auto v = doc.get<std::array<int, 3>>();
  for (int c : v)
    if (c < 0 || c > 255) throw FormatError("color channel out of range: " + std::to_string(c));
  return {static_cast<std::uint8_t>(v[0]), static_cast<std::uint8_t>(v[1]), static_cast<std::uint8_t>(v[2])};
}

}  // namespace

glyph::FontAttributes attrs_from_json(const nlohmann::json& doc) {
  try {
    glyph::FontAttributes a;
    a.font = doc.at("font").get<std::string>();
    a.size_px = doc.at("size_px").get<int>();
    a.fill = color_from(doc.at("fill"));
    if (doc.contains("background") && !doc["background"].is_null()) a.background = color_from(doc["background"]);
    a.validate();
    return a;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("font attributes document: ") + e.what());
  }
}

}  // namespace customtext::layout
