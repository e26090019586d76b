#pragma once

#include <string>
#include <vector>

#include "customtext/glyphcore.hpp"
#include "customtext/grid.hpp"
#include "customtext/layout.hpp"

namespace customtext::masks {

inline constexpr Rgb8 kNeutralGray{128, 128, 128};

// Per-pixel character identity (0 = non-text, k = codepoint k+31) over the
// glyph on-pixels. `regions` keeps the word boxes the mask was built from;
// they define the support used for feathered blending weights.
struct CharacterMask {
  GrayImage index_map;
  std::vector<Box> regions;

  int width() const { return index_map.width; }
  int height() const { return index_map.height; }
  friend bool operator==(const CharacterMask&, const CharacterMask&) = default;
};

struct ConditionalMask {
  RgbImage rgb;
  friend bool operator==(const ConditionalMask&, const ConditionalMask&) = default;
};

// Binary region of interest; 1 marks pixels to generate.
using RegionMask = GrayImage;

CharacterMask build_char_mask(const layout::LayoutPlan& plan, int canvas_w, int canvas_h,
                              const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin());

ConditionalMask build_cond_mask(const layout::LayoutPlan& plan, const std::vector<glyph::FontAttributes>& attrs,
                                int canvas_w, int canvas_h,
                                const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin());

// Composites every word of `plan` onto `base` with its span's attributes.
void render_plan_onto(RgbImage& base, const layout::LayoutPlan& plan, const std::vector<glyph::FontAttributes>& attrs,
                      const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin());

// Space-overwrite / append editing of one span. Same-length edits that only
// touch word characters keep every box; anything else re-lays out the span
// in place, falling back to a full re-layout when it would collide.
layout::LayoutPlan apply_incremental_edit(const layout::LayoutPlan& plan, int span_index, const std::string& new_text,
                                          const glyph::FontRegistry& fonts = glyph::FontRegistry::builtin());

// Word-box indicator blurred `radius_px` times with a 3x3 box filter
// (edge-replicating), values in [0, 1].
Grid<double> feather_region(const CharacterMask& mask, int radius_px);

RegionMask full_region(int width, int height);
// Union of word boxes grown by `margin_px` (clipped to the canvas).
RegionMask word_region(const layout::LayoutPlan& plan, int margin_px);

CharacterMask char_mask_from_image(const GrayImage& index_map, const layout::LayoutPlan& plan);

}  // namespace customtext::masks
