#include "customtext/masks.hpp"

#include <algorithm>

namespace customtext::masks {

namespace {

void require_valid(const layout::LayoutPlan& plan, int canvas_w, int canvas_h) {
  auto violations = layout::validate_plan(plan, canvas_w, canvas_h);
  if (!violations.empty()) throw ContractError("invalid layout plan: " + violations.front().message);
}

std::vector<Box> word_boxes(const layout::LayoutPlan& plan) {
  std::vector<Box> out;
  out.reserve(plan.words.size());
  for (const auto& w : plan.words) out.push_back(w.box);
  return out;
}

}  // namespace

CharacterMask build_char_mask(const layout::LayoutPlan& plan, int canvas_w, int canvas_h,
                              const glyph::FontRegistry& fonts) {
  require_valid(plan, canvas_w, canvas_h);
  CharacterMask mask{GrayImage(canvas_w, canvas_h, 0), word_boxes(plan)};
  for (const auto& word : plan.words) {
    const auto& span = plan.spans[word.span_index];
    const auto& font = fonts.get(span.font);
    for (std::size_t c = 0; c < word.text.size(); ++c) {
      const int cp = static_cast<unsigned char>(word.text[c]);
      if (cp == ' ') continue;
      const auto cov = glyph::glyph_coverage(font, cp, span.size_px);
      const auto& cb = word.char_boxes[c];
      const auto index = static_cast<std::uint8_t>(glyph::char_index(cp));
      for (int y = 0; y < std::min(cov.height, cb.h); ++y) {
        for (int x = 0; x < std::min(cov.width, cb.w); ++x) {
          if (cov.at(x, y)) mask.index_map.at(cb.x + x, cb.y + y) = index;
        }
      }
    }
  }
  return mask;
}

void render_plan_onto(RgbImage& base, const layout::LayoutPlan& plan, const std::vector<glyph::FontAttributes>& attrs,
                      const glyph::FontRegistry& fonts) {
  if (attrs.size() != plan.spans.size()) {
    throw ContractError("expected " + std::to_string(plan.spans.size()) + " attribute sets, got " +
                        std::to_string(attrs.size()));
  }
  for (std::size_t i = 0; i < attrs.size(); ++i) {
    if (attrs[i].font != plan.spans[i].font || attrs[i].size_px != plan.spans[i].size_px) {
      throw ContractError("attributes for span " + std::to_string(i) + " disagree with the plan's font/size");
    }
  }
  for (const auto& word : plan.words) {
    const auto& a = attrs[word.span_index];
    const auto region = glyph::render_text_line(fonts.get(a.font), word.text, word.box, a);
    for (int y = 0; y < region.height; ++y) {
      for (int x = 0; x < region.width; ++x) {
        const auto& px = region.at(x, y);
        if (px[3] == 0) continue;
        base.at(word.box.x + x, word.box.y + y) = Rgb8{px[0], px[1], px[2]};
      }
    }
  }
}

ConditionalMask build_cond_mask(const layout::LayoutPlan& plan, const std::vector<glyph::FontAttributes>& attrs,
                                int canvas_w, int canvas_h, const glyph::FontRegistry& fonts) {
  require_valid(plan, canvas_w, canvas_h);
  ConditionalMask mask{RgbImage(canvas_w, canvas_h, kNeutralGray)};
  render_plan_onto(mask.rgb, plan, attrs, fonts);
  return mask;
}

namespace {

bool boxes_clear(const std::vector<layout::PlacedWord>& candidate, const layout::LayoutPlan& plan, int skip_span) {
  for (const auto& w : candidate) {
    if (w.box.x < 0 || w.box.y < 0 || w.box.right() > plan.canvas_w || w.box.bottom() > plan.canvas_h) return false;
    for (const auto& other : plan.words) {
      if (other.span_index == skip_span) continue;
      if (w.box.intersects(other.box)) return false;
    }
  }
  return true;
}

}  // namespace

layout::LayoutPlan apply_incremental_edit(const layout::LayoutPlan& plan, int span_index, const std::string& new_text,
                                          const glyph::FontRegistry& fonts) {
  if (span_index < 0 || span_index >= static_cast<int>(plan.spans.size())) {
    throw ContractError("span index " + std::to_string(span_index) + " out of range");
  }
  for (unsigned char c : new_text) {
    if (!glyph::is_printable(c)) throw DomainError("edited text contains a non-printable character");
  }
  const auto& old_text = plan.spans[span_index].text;
  if (new_text == old_text) return plan;

  layout::LayoutPlan out = plan;
  out.spans[span_index].text = new_text;

  // In-place overwrite: every changed position must land on an existing char box.
  if (new_text.size() == old_text.size()) {
    bool in_place = true;
    for (std::size_t i = 0; i < new_text.size() && in_place; ++i) {
      if (new_text[i] == old_text[i]) continue;
      bool covered = false;
      for (const auto& w : plan.words) {
        if (w.span_index == span_index && static_cast<int>(i) >= w.offset &&
            static_cast<int>(i) < w.offset + static_cast<int>(w.text.size())) {
          covered = true;
          break;
        }
      }
      in_place = covered;
    }
    if (in_place) {
      for (auto& w : out.words) {
        if (w.span_index != span_index) continue;
        w.text = new_text.substr(w.offset, w.text.size());
      }
      return out;
    }
  }

  const auto& span = plan.spans[span_index];
  const auto& font = fonts.get(span.font);

  // Span-local re-layout anchored at the span's current top edge.
  int top = -1;
  for (const auto& w : plan.words) {
    if (w.span_index == span_index) top = top < 0 ? w.box.y : std::min(top, w.box.y);
  }
  if (top >= 0) {
    auto words = layout::layout_span(span_index, new_text, font, span.size_px, top, plan.canvas_w);
    if (boxes_clear(words, plan, span_index)) {
      std::vector<layout::PlacedWord> merged;
      bool inserted = false;
      for (const auto& w : plan.words) {
        if (w.span_index == span_index) {
          if (!inserted) {
            for (auto& nw : words) merged.push_back(nw);
            inserted = true;
          }
          continue;
        }
        merged.push_back(w);
      }
      out.words = std::move(merged);
      return out;
    }
  }

  // Full re-layout with the edited text; propagates LayoutError when infeasible.
  layout::PromptSpec spec;
  spec.canvas_w = plan.canvas_w;
  spec.canvas_h = plan.canvas_h;
  std::vector<glyph::FontAttributes> attrs;
  for (const auto& s : out.spans) {
    spec.spans.push_back(s.text);
    glyph::FontAttributes a;
    a.font = s.font;
    a.size_px = s.size_px;
    attrs.push_back(a);
  }
  auto relaid = layout::allocate_boxes(spec, attrs, 0, fonts);
  relaid.spans = out.spans;
  return relaid;
}

Grid<double> feather_region(const CharacterMask& mask, int radius_px) {
  if (radius_px < 0) throw ContractError("feather radius must be >= 0");
  const int w = mask.width();
  const int h = mask.height();
  Grid<double> cur(w, h, 0.0);
  for (const auto& b : mask.regions) {
    for (int y = std::max(0, b.y); y < std::min(h, b.bottom()); ++y) {
      for (int x = std::max(0, b.x); x < std::min(w, b.right()); ++x) cur.at(x, y) = 1.0;
    }
  }
  if (w == 0 || h == 0) return cur;
  Grid<double> tmp(w, h, 0.0);
  for (int pass = 0; pass < radius_px; ++pass) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        tmp.at(x, y) = (cur.at(std::max(0, x - 1), y) + cur.at(x, y) + cur.at(std::min(w - 1, x + 1), y)) / 3.0;
      }
    }
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        cur.at(x, y) = (tmp.at(x, std::max(0, y - 1)) + tmp.at(x, y) + tmp.at(x, std::min(h - 1, y + 1))) / 3.0;
      }
    }
  }
  return cur;
}

RegionMask full_region(int width, int height) { return RegionMask(width, height, 1); }

RegionMask word_region(const layout::LayoutPlan& plan, int margin_px) {
  RegionMask m(plan.canvas_w, plan.canvas_h, 0);
  for (const auto& word : plan.words) {
    const auto& b = word.box;
    for (int y = std::max(0, b.y - margin_px); y < std::min(plan.canvas_h, b.bottom() + margin_px); ++y) {
      for (int x = std::max(0, b.x - margin_px); x < std::min(plan.canvas_w, b.right() + margin_px); ++x) m.at(x, y) = 1;
    }
  }
  return m;
}

CharacterMask char_mask_from_image(const GrayImage& index_map, const layout::LayoutPlan& plan) {
  if (index_map.width != plan.canvas_w || index_map.height != plan.canvas_h) {
    throw ContractError("character mask size does not match the plan canvas");
  }
  for (auto v : index_map.data) {
    if (v > glyph::kCharCount) throw FormatError("character mask holds index " + std::to_string(v) + " > 95");
  }
  return CharacterMask{index_map, word_boxes(plan)};
}

}  // namespace customtext::masks
