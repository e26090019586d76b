#include <doctest.h>

#include <map>
#include <random>
#include <set>

#include "customtext/masks.hpp"
#include "test_support.hpp"

using namespace customtext;
using namespace customtext::masks;
using layout::PromptSpec;

namespace {

layout::LayoutPlan plan_for(const std::vector<std::string>& spans, int size = 7, const char* font = "mono5x7") {
  PromptSpec spec{"", spans, 64, 64};
  std::vector<glyph::FontAttributes> attrs(spans.size(), testsupport::attrs(font, size));
  return layout::allocate_boxes(spec, attrs, 0);
}

}  // namespace

TEST_CASE("char mask of an empty plan is all zero") {
  auto m = build_char_mask(layout::LayoutPlan{64, 64, {}, {}}, 64, 64);
  for (auto v : m.index_map.data) CHECK(v == 0);
}

TEST_CASE("char mask of 'A' marks exactly the glyph on-pixels with index 34") {
  auto plan = plan_for({"A"});
  auto m = build_char_mask(plan, 64, 64);
  const auto& cb = plan.words[0].char_boxes[0];
  const auto& bits = glyph::FontRegistry::builtin().get("mono5x7").bitmap('A');
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const bool inside = cb.contains(x, y);
      const bool on = inside && bits[(y - cb.y) * 5 + (x - cb.x)];
      CHECK(m.index_map.at(x, y) == (on ? 34 : 0));
    }
  }
}

TEST_CASE("two disjoint boxes give exactly two distinct indices") {
  auto plan = plan_for({"X", "Y"});
  auto m = build_char_mask(plan, 64, 64);
  std::map<int, int> histogram;
  for (auto v : m.index_map.data) {
    if (v) ++histogram[v];
  }
  CHECK(histogram.size() == 2);
  CHECK(histogram.count('X' - 31) == 1);
  CHECK(histogram.count('Y' - 31) == 1);
}

TEST_CASE("char mask rejects an invalid plan") {
  auto plan = plan_for({"HI"});
  plan.words.push_back(plan.words[0]);
  CHECK_THROWS_AS(build_char_mask(plan, 64, 64), ContractError);
}

TEST_CASE("cond mask: empty plan is uniform neutral gray") {
  auto m = build_cond_mask(layout::LayoutPlan{64, 64, {}, {}}, {}, 64, 64);
  for (const auto& px : m.rgb.data) CHECK(px == kNeutralGray);
}

TEST_CASE("cond mask: red glyphs on gray, optional box background") {
  auto plan = plan_for({"HI"});
  auto a = testsupport::attrs("mono5x7", 7, {255, 0, 0});
  auto m = build_cond_mask(plan, {a}, 64, 64);
  auto cm = build_char_mask(plan, 64, 64);
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const auto& px = m.rgb.at(x, y);
      if (cm.index_map.at(x, y)) {
        CHECK(px == Rgb8{255, 0, 0});
      } else {
        CHECK(px == kNeutralGray);
      }
    }
  }
  a.background = Rgb8{0, 0, 0};
  auto mb = build_cond_mask(plan, {a}, 64, 64);
  const auto& box = plan.words[0].box;
  for (int y = 0; y < 64; ++y) {
    for (int x = 0; x < 64; ++x) {
      const auto& px = mb.rgb.at(x, y);
      if (cm.index_map.at(x, y)) {
        CHECK(px == Rgb8{255, 0, 0});
      } else if (box.contains(x, y)) {
        CHECK(px == Rgb8{0, 0, 0});
      } else {
        CHECK(px == kNeutralGray);
      }
    }
  }
}

TEST_CASE("mask supports stay inside their boxes") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 40; ++trial) {
    std::vector<std::string> spans{testsupport::random_word(rng, 1, 6), testsupport::random_word(rng, 1, 6)};
    const int size = std::uniform_int_distribution<int>(4, 12)(rng);
    auto plan = plan_for(spans, size);
    auto a = testsupport::attrs("mono5x7", size, {250, 20, 20});
    auto cm = build_char_mask(plan, 64, 64);
    auto cond = build_cond_mask(plan, {a, a}, 64, 64);
    for (int y = 0; y < 64; ++y) {
      for (int x = 0; x < 64; ++x) {
        bool in_char = false, in_word = false;
        for (const auto& w : plan.words) {
          in_word = in_word || w.box.contains(x, y);
          for (const auto& cb : w.char_boxes) in_char = in_char || cb.contains(x, y);
        }
        if (cm.index_map.at(x, y)) CHECK(in_char);
        if (cond.rgb.at(x, y) != kNeutralGray) CHECK(in_word);
      }
    }
    // every char box has a single nonzero index
    for (const auto& w : plan.words) {
      for (const auto& cb : w.char_boxes) {
        std::set<int> seen;
        for (int y = cb.y; y < cb.bottom(); ++y)
          for (int x = cb.x; x < cb.right(); ++x)
            if (cm.index_map.at(x, y)) seen.insert(cm.index_map.at(x, y));
        CHECK(seen.size() <= 1);
      }
    }
  }
}

TEST_CASE("space overwrite zeroes the overwritten slot and keeps boxes") {
  auto plan = plan_for({"HELLO"});
  auto edited = apply_incremental_edit(plan, 0, "HE LO");
  REQUIRE(edited.words.size() == 1);
  CHECK(edited.words[0].box == plan.words[0].box);
  CHECK(edited.words[0].text == "HE LO");
  auto m = build_char_mask(edited, 64, 64);
  auto before = build_char_mask(plan, 64, 64);
  const auto& slot = plan.words[0].char_boxes[2];
  int before_on = 0;
  for (int y = slot.y; y < slot.bottom(); ++y) {
    for (int x = slot.x; x < slot.right(); ++x) {
      CHECK(m.index_map.at(x, y) == 0);
      before_on += before.index_map.at(x, y) != 0;
    }
  }
  CHECK(before_on > 0);
}

TEST_CASE("appending widens the span and stays valid") {
  auto plan = plan_for({"HI"});
  auto edited = apply_incremental_edit(plan, 0, "HI!!");
  REQUIRE(edited.words.size() == 1);
  CHECK(edited.words[0].box.w == plan.words[0].box.w + 2 * 5);
  CHECK(edited.words[0].box.y == plan.words[0].box.y);
  CHECK(layout::validate_plan(edited).empty());
}

TEST_CASE("identical text leaves the plan unchanged") {
  auto plan = plan_for({"HELLO", "WORLD"});
  CHECK(apply_incremental_edit(plan, 1, "WORLD") == plan);
}

TEST_CASE("editing one span keeps other spans' boxes when feasible") {
  auto plan = plan_for({"TOP", "MID", "END"});
  auto edited = apply_incremental_edit(plan, 1, "MIDDLE");
  CHECK(layout::validate_plan(edited).empty());
  for (std::size_t i = 0; i < plan.words.size(); ++i) {
    if (plan.words[i].span_index == 1) continue;
    bool found = false;
    for (const auto& w : edited.words) found = found || (w.span_index == plan.words[i].span_index && w.box == plan.words[i].box);
    CHECK(found);
  }
}

TEST_CASE("infeasible re-layout raises a layout error") {
  auto plan = plan_for({"HI"});
  CHECK_THROWS_AS(apply_incremental_edit(plan, 0, "THISWORDISTOOLONG"), LayoutError);
}

TEST_CASE("feather radius 0 is the hard indicator") {
  auto plan = plan_for({"HELLO"});
  auto cm = build_char_mask(plan, 64, 64);
  auto f = feather_region(cm, 0);
  const auto& b = plan.words[0].box;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) CHECK(f.at(x, y) == (b.contains(x, y) ? 1.0 : 0.0));
}

TEST_CASE("feather of an empty mask is zero") {
  CharacterMask empty{GrayImage(64, 64, 0), {}};
  for (double v : feather_region(empty, 3).data) CHECK(v == 0.0);
}

TEST_CASE("feather radius 2: fractional values exactly in the 2px boundary band") {
  CharacterMask m{GrayImage(32, 32, 0), {Box{10, 12, 8, 6}}};
  auto f = feather_region(m, 2);
  const Box b{10, 12, 8, 6};
  for (int y = 0; y < 32; ++y) {
    for (int x = 0; x < 32; ++x) {
      // Chebyshev distance to the box (outside) or to its complement (inside)
      const int dx_out = std::max({b.x - x, x - (b.right() - 1), 0});
      const int dy_out = std::max({b.y - y, y - (b.bottom() - 1), 0});
      const int out_dist = std::max(dx_out, dy_out);
      const int in_dist = b.contains(x, y) ? std::min({x - b.x + 1, b.right() - x, y - b.y + 1, b.bottom() - y}) : 0;
      const bool band = (out_dist >= 1 && out_dist <= 2) || (in_dist >= 1 && in_dist <= 2);
      const double v = f.at(x, y);
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      if (band) {
        CHECK(v > 0.0);
        CHECK(v < 1.0);
      } else {
        CHECK(v == (b.contains(x, y) ? 1.0 : 0.0));
      }
    }
  }
}

TEST_CASE("feather decays monotonically across the boundary") {
  CharacterMask m{GrayImage(40, 20, 0), {Box{10, 0, 20, 20}}};
  auto f = feather_region(m, 3);
  for (int x = 0; x < 19; ++x) CHECK(f.at(x, 10) <= f.at(x + 1, 10));
  for (int x = 20; x < 39; ++x) CHECK(f.at(x, 10) >= f.at(x + 1, 10));
}

TEST_CASE("word_region grows word boxes by the margin") {
  auto plan = plan_for({"HI"});
  auto r = word_region(plan, 2);
  const auto& b = plan.words[0].box;
  CHECK(r.at(b.x - 2, b.y - 2) == 1);
  CHECK(r.at(b.x - 3, b.y) == 0);
  CHECK(full_region(4, 4).data == std::vector<std::uint8_t>(16, 1));
}
