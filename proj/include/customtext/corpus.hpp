#pragma once

#include <string>
#include <vector>

#include "customtext/glyphcore.hpp"
#include "customtext/grid.hpp"
#include "customtext/layout.hpp"

namespace customtext {

// One rendered training/evaluation example with its conditioning bundle.
struct CorpusItem {
  std::string prompt;
  std::string prose;
  layout::LayoutPlan plan;
  std::vector<glyph::FontAttributes> attrs;
  RgbImage image;
  GrayImage char_map;
  RgbImage cond;
  GrayImage region;
  bool small = false;
};

using Corpus = std::vector<CorpusItem>;

}  // namespace customtext
