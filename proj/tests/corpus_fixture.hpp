#pragma once

#include <random>
#include <string>

#include "customtext/corpus.hpp"
#include "customtext/layout.hpp"
#include "customtext/masks.hpp"

namespace testsupport {

// Renders `prompt` (quoted spans) at one size onto a solid background.
inline customtext::CorpusItem make_item(const std::string& prompt, int size_px, customtext::Rgb8 background,
                                        customtext::Rgb8 fill, const std::string& font = "mono5x7") {
  using namespace customtext;
  CorpusItem item;
  item.prompt = prompt;
  const auto spec = layout::parse_prompt(prompt, 64, 64);
  item.prose = spec.prose;
  for (std::size_t i = 0; i < spec.spans.size(); ++i) {
    glyph::FontAttributes a;
    a.font = font;
    a.size_px = size_px;
    a.fill = fill;
    item.attrs.push_back(a);
  }
  item.plan = layout::allocate_boxes(spec, item.attrs, 0);
  item.char_map = masks::build_char_mask(item.plan, 64, 64).index_map;
  item.cond = masks::build_cond_mask(item.plan, item.attrs, 64, 64).rgb;
  item.image = RgbImage(64, 64, background);
  masks::render_plan_onto(item.image, item.plan, item.attrs);
  item.region = masks::word_region(item.plan, 2);
  item.small = size_px <= 8;
  return item;
}

inline customtext::Corpus small_corpus(int n, std::uint64_t seed) {
  static const char* words[] = {"CAT", "SALE", "OPEN", "HELLO", "BIG", "ZOO", "RUN", "TEXT"};
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> w(0, 7), s(5, 12), c(0, 255);
  customtext::Corpus out;
  for (int i = 0; i < n; ++i) {
    const customtext::Rgb8 bg{static_cast<std::uint8_t>(c(rng)), static_cast<std::uint8_t>(c(rng)),
                              static_cast<std::uint8_t>(c(rng))};
    const customtext::Rgb8 fg{static_cast<std::uint8_t>(255 - bg[0]), static_cast<std::uint8_t>(255 - bg[1]),
                              static_cast<std::uint8_t>(255 - bg[2])};
    out.push_back(make_item(std::string("a sign that says '") + words[w(rng)] + "'", s(rng), bg, fg));
  }
  return out;
}

}  // namespace testsupport
