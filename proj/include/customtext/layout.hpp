#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "customtext/geometry.hpp"
#include "customtext/glyphcore.hpp"

namespace customtext::layout {

inline constexpr int kLeadingPx = 2;
inline constexpr int kSpanGapPx = 4;

struct PromptSpec {
  std::string prose;               // prompt with quoted segments replaced by <textK> placeholders
  std::vector<std::string> spans;  // contents of the single-quoted segments, in order
  int canvas_w = 64;
  int canvas_h = 64;

  friend bool operator==(const PromptSpec&, const PromptSpec&) = default;
};

PromptSpec parse_prompt(std::string_view prompt, int canvas_w, int canvas_h);

struct SpanInfo {
  std::string text;
  std::string font;
  int size_px = 0;

  friend bool operator==(const SpanInfo&, const SpanInfo&) = default;
};

struct PlacedWord {
  int span_index = 0;
  std::string text;
  int offset = 0;  // index of the word's first character in the span text
  Box box;
  std::vector<Box> char_boxes;

  friend bool operator==(const PlacedWord&, const PlacedWord&) = default;
};

struct LayoutPlan {
  int canvas_w = 0;
  int canvas_h = 0;
  std::vector<SpanInfo> spans;
  std::vector<PlacedWord> words;

  friend bool operator==(const LayoutPlan&, const LayoutPlan&) = default;
};

// Placement strategy; the rule-based placer is the only implementation.
class Placer {
 public:
  virtual ~Placer() = default;
  virtual LayoutPlan place(const PromptSpec& spec, const std::vector<glyph::FontAttributes>& attrs,
                           std::uint64_t seed) const = 0;
};

// Words wrap greedily onto centred lines (one blank slot between words),
// line pitch size_px + 2, spans stacked with 4px gaps, block centred
// vertically. Deterministic; the seed is accepted for interface parity with
// stochastic placers and does not affect the result.
class RulePlacer final : public Placer {
 public:
  explicit RulePlacer(const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin()) : fonts_(fonts) {}
  LayoutPlan place(const PromptSpec& spec, const std::vector<glyph::FontAttributes>& attrs,
                   std::uint64_t seed) const override;

 private:
  const glyph::FontRegistry& fonts_;
};

LayoutPlan allocate_boxes(const PromptSpec& spec, const std::vector<glyph::FontAttributes>& attrs,
                          std::uint64_t seed, const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin());

struct Violation {
  enum class Kind { Overlap, OutOfBounds, CharTiling, Degenerate, BadSpan };
  Kind kind;
  int word = -1;
  int other = -1;
  std::string message;
};

std::vector<Violation> validate_plan(const LayoutPlan& plan, int canvas_w, int canvas_h);
inline std::vector<Violation> validate_plan(const LayoutPlan& plan) {
  return validate_plan(plan, plan.canvas_w, plan.canvas_h);
}

// Lays out one span's words starting at vertical position `top`, centred
// horizontally. Throws LayoutError when a word is wider than the canvas.
std::vector<PlacedWord> layout_span(int span_index, const std::string& text, const glyph::GlyphFont& font,
                                    int size_px, int top, int canvas_w);

// Height in pixels of a span block (0 when the span has no words).
int span_block_height(const std::string& text, const glyph::GlyphFont& font, int size_px, int canvas_w,
                      int span_index = -1);

std::vector<std::string> split_words(std::string_view text);

nlohmann::json to_json(const LayoutPlan& plan);
LayoutPlan plan_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const glyph::FontAttributes& attrs);
glyph::FontAttributes attrs_from_json(const nlohmann::json& doc);

}  // namespace customtext::layout
