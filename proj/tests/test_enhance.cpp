#include <doctest.h>

#include <cmath>

#include "corpus_fixture.hpp"
#include "customtext/enhance.hpp"
#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"
#include "gradcheck.hpp"

using namespace customtext;
using namespace customtext::enhance;

namespace {

template <typename T>
nn::Tensor<T> random_image(int h, int w, std::mt19937_64& rng, int n = 1) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  nn::Tensor<T> t(n, 3, h, w);
  for (auto& v : t.data) v = static_cast<T>(u(rng));
  return t;
}

template <typename T>
void randomize(EnhancerParams<T>& p, std::mt19937_64& rng, double scale) {
  std::normal_distribution<double> d(0.0, scale);
  for (auto* prm : p.params())
    for (auto& v : prm->value) v = static_cast<T>(d(rng));
}

}  // namespace

TEST_CASE("split geometry and bilinear upscale") {
  std::mt19937_64 rng(1);
  const auto img = random_image<double>(64, 64, rng);
  const auto grid = split(img);
  REQUIRE(grid.offsets.size() == 9);
  std::vector<std::pair<int, int>> expect;
  for (int oy : {0, 16, 32})
    for (int ox : {0, 16, 32}) expect.emplace_back(ox, oy);
  CHECK(grid.offsets == expect);
  CHECK(grid.tiles.n == 9);
  CHECK(grid.tiles.h == 64);
  CHECK(grid.tiles.w == 64);

  // Oracle: half-pixel-centre bilinear sampling of the 32x32 crop.
  auto sample_crop = [&](int p, int c, double sy, double sx) {
    const auto [ox, oy] = expect[p];
    sy = std::clamp(sy, 0.0, 31.0);
    sx = std::clamp(sx, 0.0, 31.0);
    const int y0 = static_cast<int>(sy), x0 = static_cast<int>(sx);
    const int y1 = std::min(y0 + 1, 31), x1 = std::min(x0 + 1, 31);
    const double fy = sy - y0, fx = sx - x0;
    return (1 - fy) * ((1 - fx) * img(0, c, oy + y0, ox + x0) + fx * img(0, c, oy + y0, ox + x1)) +
           fy * ((1 - fx) * img(0, c, oy + y1, ox + x0) + fx * img(0, c, oy + y1, ox + x1));
  };
  for (int p = 0; p < 9; ++p)
    for (int y = 0; y < 64; y += 7)
      for (int x = 0; x < 64; x += 5)
        CHECK(grid.tiles(p, 1, y, x) == doctest::Approx(sample_crop(p, 1, (y + 0.5) * 0.5 - 0.5, (x + 0.5) * 0.5 - 0.5)));

  // Union of source crops covers every pixel.
  Grid<int> cover(64, 64, 0);
  for (auto [ox, oy] : grid.offsets)
    for (int y = oy; y < oy + 32; ++y)
      for (int x = ox; x < ox + 32; ++x) cover.at(x, y) = 1;
  for (int v : cover.data) CHECK(v == 1);
}

TEST_CASE("split of a constant image is constant and bad sizes are rejected") {
  nn::Tensor<float> c(1, 3, 64, 64, 0.37f);
  for (float v : split(c).tiles.data) CHECK(v == 0.37f);
  CHECK_THROWS_AS(split(nn::Tensor<float>(1, 3, 66, 66)), ContractError);
  CHECK_THROWS_AS(split(nn::Tensor<float>(1, 3, 64, 62)), ContractError);
}

TEST_CASE("fresh enhancer produces zero residuals") {
  std::mt19937_64 rng(2);
  EnhancerParams<float> p(3);
  const auto tiles = random_image<float>(8, 8, rng, 9);
  for (float v : enhance::enhance(tiles, p).data) CHECK(v == 0.0f);

  // First stage forced to an identity-like map, last stage still zero.
  for (int o = 0; o < 16; ++o) p.first.weight.value[o * 3 + o % 3] = 1.0f;
  for (float v : enhance::enhance(tiles, p).data) CHECK(v == 0.0f);

  randomize(p, rng, 0.5);
  CHECK(enhance::enhance(tiles, p) == enhance::enhance(tiles, p));
}

TEST_CASE("center weights form a partition of unity") {
  for (int size : {4, 8, 64}) {
    const auto w = center_weight(size, size);
    REQUIRE(w.size() == 9);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        double s = 0;
        for (const auto& m : w) {
          s += m.at(x, y);
          CHECK(m.at(x, y) >= 0.0);
        }
        CHECK(std::abs(s - 1.0) <= 1e-6);
      }
  }
  const auto w = center_weight(64, 64);
  // Centre of the middle patch (offset 16, footprint 16..47).
  for (int p = 0; p < 9; ++p) {
    if (p == 4) continue;
    CHECK(w[4].at(31, 31) > w[p].at(31, 31));
    CHECK(w[4].at(32, 32) > w[p].at(32, 32));
  }
  CHECK(w[0].at(0, 0) == 1.0);
  for (int p = 1; p < 9; ++p) CHECK(w[p].at(0, 0) == 0.0);
  // Outside the footprint a patch has no weight.
  CHECK(w[8].at(31, 40) == 0.0);
}

TEST_CASE("merge contracts") {
  std::mt19937_64 rng(3);
  const auto base = random_image<double>(64, 64, rng);
  const auto grid = split(base);
  const auto weights = center_weight(64, 64);

  nn::Tensor<double> zero(9, 3, 64, 64, 0.0);
  CHECK(merge(base, zero, grid, weights) == base);

  nn::Tensor<double> constant(9, 3, 64, 64, 0.25);
  const auto shifted = merge(base, constant, grid, weights);
  for (std::size_t i = 0; i < base.data.size(); ++i) CHECK(std::abs(shifted.data[i] - base.data[i] - 0.25) <= 1e-12);

  // One residual pixel of patch 8 (offset 32, 32) touches only its footprint.
  nn::Tensor<double> single = zero;
  single(8, 0, 10, 10) = 1.0;
  const auto out = merge(base, single, grid, weights);
  int changed = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        if (out(0, c, y, x) == base(0, c, y, x)) continue;
        ++changed;
        CHECK(c == 0);
        CHECK(x >= 32);
        CHECK(y >= 32);
        CHECK(x == 32 + 5);
        CHECK(y == 32 + 5);
      }
  CHECK(changed == 1);

  CHECK_THROWS_AS(merge(base, nn::Tensor<double>(8, 3, 64, 64), grid, weights), ContractError);
  CHECK_THROWS_AS(merge(base, zero, grid, center_weight(32, 32)), ContractError);
}

TEST_CASE("locality holds for random residuals of one patch") {
  std::mt19937_64 rng(4);
  const auto base = random_image<double>(16, 16, rng);
  const auto grid = split(base);
  const auto weights = center_weight(16, 16);
  for (int p = 0; p < 9; ++p) {
    nn::Tensor<double> res(9, 3, 16, 16, 0.0);
    std::normal_distribution<double> d;
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) res(p, c, y, x) = d(rng);
    const auto out = merge(base, res, grid, weights);
    const auto [ox, oy] = grid.offsets[p];
    for (int c = 0; c < 3; ++c)
      for (int y = 0; y < 16; ++y)
        for (int x = 0; x < 16; ++x) {
          const bool inside = x >= ox && x < ox + 8 && y >= oy && y < oy + 8;
          if (!inside) CHECK(out(0, c, y, x) == base(0, c, y, x));
        }
  }
}

TEST_CASE("full pipeline with fresh params reproduces the input") {
  std::mt19937_64 rng(5);
  EnhancerParams<float> p(1);
  const auto img = random_image<float>(64, 64, rng, 3);
  const auto out = enhance_decoded(img, p);
  for (std::size_t i = 0; i < img.data.size(); ++i) CHECK(std::abs(out.data[i] - img.data[i]) <= 1e-6);
}

TEST_CASE("enhancer loss gradients match central differences on a 4x4 toy") {
  std::mt19937_64 rng(6);
  const auto decoded = random_image<double>(4, 4, rng, 2);
  const auto target = random_image<double>(4, 4, rng, 2);
  nn::Tensor<double> mask(2, 1, 4, 4, 0.0);
  for (int i = 0; i < 32; i += 3) mask.data[i] = 1.0;

  for (double scale : {0.0, 0.7}) {
    EnhancerParams<double> p(7, 5);
    if (scale > 0) randomize(p, rng, scale);
    auto plist = p.params();
    nn::zero_grads(plist);
    enhancer_loss(p, decoded, target, mask, 5.0, true);
    double worst = 0;
    for (auto* prm : plist) {
      const auto rep = testsupport::check_gradient(prm->value, prm->grad, testsupport::all_indices(prm->size()),
                                                   [&] { return enhancer_loss(p, decoded, target, mask, 5.0, false); });
      worst = std::max(worst, rep.max_rel_err);
    }
    CAPTURE(scale);
    CHECK(worst <= 1e-2);
    CHECK(worst <= 1e-5);
  }
}

TEST_CASE("enhancer checkpoint round trip") {
  std::mt19937_64 rng(8);
  EnhancerParams<float> p(2);
  randomize(p, rng, 0.3);
  const auto back = from_checkpoint(ckpt::deserialize(ckpt::serialize(to_checkpoint(p))));
  CHECK(back.checksum() == p.checksum());
  ckpt::Checkpoint wrong;
  wrong.tag = "vae";
  CHECK_THROWS_AS(from_checkpoint(wrong), FormatError);
}

TEST_CASE("training starts from the vanilla loss and leaves the vae untouched") {
  const auto corpus = testsupport::small_corpus(6, 3);
  diffusion::Vae vae(4);
  const auto vae_sum = vae.checksum();
  EnhancerParams<float> p(5);
  diffusion::TrainOptions o;
  o.steps = 5;
  o.batch = 1;
  o.seed = 9;
  // The first batch is a single corpus item; recompute the vanilla loss for it directly.
  auto rng = make_rng(o.seed, 0x74656e68);
  const auto first = std::uniform_int_distribution<std::size_t>(0, corpus.size() - 1)(rng);
  const auto report = train_enhancer(p, vae, corpus, o);
  const auto decoded = decode_corpus(vae, corpus);
  const auto target = nn::image_to_tensor(corpus[first].image);
  const auto mask = char_pixel_mask({&corpus[first].char_map});
  double vanilla = 0;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        const double d = decoded[first](0, c, y, x) - target(0, c, y, x);
        vanilla += d * d * (mask(0, 0, y, x) > 0 ? 6.0 : 1.0);
      }
  vanilla /= 3 * 64 * 64;
  CHECK(report.initial_loss == doctest::Approx(vanilla).epsilon(1e-6));
  CHECK(report.losses.size() == 5);
  CHECK(vae.checksum() == vae_sum);

  auto bad = corpus;
  bad[0].char_map = GrayImage(32, 32, 0);
  CHECK_THROWS_AS(train_enhancer(p, vae, bad, o), ContractError);
  CHECK_THROWS_AS(train_enhancer(p, vae, Corpus{}, o), ContractError);
}
