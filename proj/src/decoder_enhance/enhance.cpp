#include "customtext/enhance.hpp"

#include <cmath>
#include <numbers>

#include "customtext/imagetensor.hpp"
#include "customtext/rng.hpp"

namespace customtext::enhance {

namespace {

void require_grid_dims(int h, int w) {
  if (h <= 0 || w <= 0 || h % 4 || w % 4) {
    throw ContractError("patch split needs dimensions divisible by 4, got " + std::to_string(w) + "x" +
                        std::to_string(h));
  }
}

std::vector<std::pair<int, int>> patch_offsets(int h, int w) {
  std::vector<std::pair<int, int>> out;
  for (int oy : {0, h / 4, h / 2})
    for (int ox : {0, w / 4, w / 2}) out.emplace_back(ox, oy);
  return out;
}

// Source coordinate for output index `i` when upscaling `n` samples to `2n`
// (half-pixel centres), as lower index and fraction.
std::pair<int, double> bilinear_source(int i, int n) {
  double s = (i + 0.5) / 2.0 - 0.5;
  s = std::clamp(s, 0.0, static_cast<double>(n - 1));
  const int i0 = static_cast<int>(std::floor(s));
  return {i0, s - i0};
}

}  // namespace

template <typename T>
PatchGrid<T> split(const nn::Tensor<T>& decoded) {
  if (decoded.n != 1) throw ContractError("split takes a single image");
  const int h = decoded.h, w = decoded.w;
  require_grid_dims(h, w);
  PatchGrid<T> grid;
  grid.height = h;
  grid.width = w;
  grid.offsets = patch_offsets(h, w);
  grid.tiles = nn::Tensor<T>(kPatchCount, decoded.c, h, w);
  const int ch = h / 2, cw = w / 2;
  for (int p = 0; p < kPatchCount; ++p) {
    const auto [ox, oy] = grid.offsets[p];
    for (int c = 0; c < decoded.c; ++c) {
      for (int y = 0; y < h; ++y) {
        const auto [y0, fy] = bilinear_source(y, ch);
        const int y1 = std::min(y0 + 1, ch - 1);
        for (int x = 0; x < w; ++x) {
          const auto [x0, fx] = bilinear_source(x, cw);
          const int x1 = std::min(x0 + 1, cw - 1);
          const T p00 = decoded(0, c, oy + y0, ox + x0), p01 = decoded(0, c, oy + y0, ox + x1);
          const T p10 = decoded(0, c, oy + y1, ox + x0), p11 = decoded(0, c, oy + y1, ox + x1);
          const T top = p00 + static_cast<T>(fx) * (p01 - p00);
          const T bottom = p10 + static_cast<T>(fx) * (p11 - p10);
          grid.tiles(p, c, y, x) = top + static_cast<T>(fy) * (bottom - top);
        }
      }
    }
  }
  return grid;
}

template <typename T>
EnhancerParams<T>::EnhancerParams(std::uint64_t seed, int hidden) {
  auto rng = make_rng(seed, 0x656e68);
  first = nn::Conv2d<T>("enh.first", 3, hidden, 1, 1, nn::Init::Zero, rng);
  middle = nn::Conv2d<T>("enh.middle", hidden, hidden, 1, 1, nn::Init::Default, rng);
  last = nn::Conv2d<T>("enh.last", hidden, 3, 1, 1, nn::Init::Zero, rng);
  // A nonzero middle bias keeps the last stage's gradient alive while the
  // first stage is still zero.
  std::uniform_real_distribution<double> bias(0.5, 1.0);
  for (auto& b : middle.bias.value) b = static_cast<T>(bias(rng));
}

template <typename T>
nn::ParamList<T> EnhancerParams<T>::params() {
  nn::ParamList<T> out;
  first.collect(out);
  middle.collect(out);
  last.collect(out);
  return out;
}

template <typename T>
std::string EnhancerParams<T>::checksum() const {
  return ckpt::param_checksum(const_cast<EnhancerParams*>(this)->params());
}

template <typename T>
nn::Tensor<T> enhance(const nn::Tensor<T>& tiles, const EnhancerParams<T>& params) {
  using Act = nn::SiLU<T>;
  return params.last.infer(Act::apply(params.middle.infer(Act::apply(params.first.infer(tiles)))));
}

std::vector<Grid<double>> center_weight(int height, int width) {
  require_grid_dims(height, width);
  const auto offsets = patch_offsets(height, width);
  const int ph = height / 2, pw = width / 2;
  auto bump = [](double d, double half) { return 0.5 * (1.0 + std::cos(std::numbers::pi * d / half)); };
  std::vector<Grid<double>> maps(kPatchCount, Grid<double>(width, height, 0.0));
  for (int p = 0; p < kPatchCount; ++p) {
    const auto [ox, oy] = offsets[p];
    const double cx = ox + pw / 2.0 - 0.5, cy = oy + ph / 2.0 - 0.5;
    for (int y = oy; y < oy + ph; ++y)
      for (int x = ox; x < ox + pw; ++x) maps[p].at(x, y) = bump(x - cx, pw / 2.0) * bump(y - cy, ph / 2.0);
  }
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      double total = 0;
      for (const auto& m : maps) total += m.at(x, y);
      for (auto& m : maps) m.at(x, y) /= total;
    }
  }
  return maps;
}

template <typename T>
nn::Tensor<T> merge(const nn::Tensor<T>& base, const nn::Tensor<T>& residuals, const PatchGrid<T>& grid,
                    const std::vector<Grid<double>>& weights) {
  if (base.n != 1 || base.h != grid.height || base.w != grid.width) throw ContractError("merge: base does not match grid");
  if (residuals.n != kPatchCount || residuals.c != base.c || residuals.h != base.h || residuals.w != base.w) {
    throw ContractError("merge: expected 9 residual tiles of the base's shape");
  }
  if (weights.size() != kPatchCount) throw ContractError("merge: expected 9 weight maps");
  nn::Tensor<T> out = base;
  const int ph = base.h / 2, pw = base.w / 2;
  for (int p = 0; p < kPatchCount; ++p) {
    const auto [ox, oy] = grid.offsets[p];
    if (weights[p].width != base.w || weights[p].height != base.h) throw ContractError("merge: weight map size");
    for (int c = 0; c < base.c; ++c) {
      for (int ly = 0; ly < ph; ++ly) {
        for (int lx = 0; lx < pw; ++lx) {
          const T down = (residuals(p, c, 2 * ly, 2 * lx) + residuals(p, c, 2 * ly, 2 * lx + 1) +
                          residuals(p, c, 2 * ly + 1, 2 * lx) + residuals(p, c, 2 * ly + 1, 2 * lx + 1)) /
                         T(4);
          out(0, c, oy + ly, ox + lx) += static_cast<T>(weights[p].at(ox + lx, oy + ly)) * down;
        }
      }
    }
  }
  return out;
}

template <typename T>
nn::Tensor<T> enhance_decoded(const nn::Tensor<T>& decoded, const EnhancerParams<T>& params) {
  require_grid_dims(decoded.h, decoded.w);
  const auto weights = center_weight(decoded.h, decoded.w);
  nn::Tensor<T> out(decoded.n, decoded.c, decoded.h, decoded.w);
  for (int i = 0; i < decoded.n; ++i) {
    const auto one = nn::slice_batch(decoded, i);
    const auto grid = split(one);
    const auto merged = merge(one, enhance(grid.tiles, params), grid, weights);
    std::copy(merged.data.begin(), merged.data.end(), out.sample(i));
  }
  return out;
}

template <typename T>
double enhancer_loss(EnhancerParams<T>& params, const nn::Tensor<T>& decoded, const nn::Tensor<T>& target,
                     const nn::Tensor<T>& mask, double kappa, bool accumulate) {
  nn::require_same_shape(decoded, target, "enhancer_loss");
  if (mask.n != decoded.n || mask.c != 1 || mask.h != decoded.h || mask.w != decoded.w) {
    throw ContractError("enhancer_loss: character mask does not match the images");
  }
  require_grid_dims(decoded.h, decoded.w);
  const auto weights = center_weight(decoded.h, decoded.w);
  const int n = decoded.n, h = decoded.h, w = decoded.w, ph = h / 2, pw = w / 2;

  // All tiles of the batch go through the enhancer as one batch of 9n.
  nn::Tensor<T> tiles(kPatchCount * n, decoded.c, h, w);
  std::vector<PatchGrid<T>> grids;
  for (int i = 0; i < n; ++i) {
    auto grid = split(nn::slice_batch(decoded, i));
    std::copy(grid.tiles.data.begin(), grid.tiles.data.end(), tiles.sample(kPatchCount * i));
    grid.tiles = nn::Tensor<T>();
    grids.push_back(std::move(grid));
  }
  auto h1 = params.act1.forward(params.first.forward(tiles, accumulate), accumulate);
  auto h2 = params.act2.forward(params.middle.forward(h1, accumulate), accumulate);
  const auto residuals = params.last.forward(h2, accumulate);

  const double count = static_cast<double>(decoded.size());
  double loss = 0;
  nn::Tensor<T> dres(residuals.n, residuals.c, residuals.h, residuals.w);
  for (int i = 0; i < n; ++i) {
    nn::Tensor<T> res_i(kPatchCount, decoded.c, h, w);
    std::copy(residuals.sample(kPatchCount * i), residuals.sample(kPatchCount * (i + 1)), res_i.data.begin());
    const auto y = merge(nn::slice_batch(decoded, i), res_i, grids[i], weights);
    nn::Tensor<T> dy(1, decoded.c, h, w);
    for (int c = 0; c < decoded.c; ++c)
      for (int yy = 0; yy < h; ++yy)
        for (int xx = 0; xx < w; ++xx) {
          const double d = static_cast<double>(y(0, c, yy, xx)) - target(i, c, yy, xx);
          const double m = mask(i, 0, yy, xx) > T(0) ? 1.0 : 0.0;
          loss += d * d * (1.0 + kappa * m);
          dy(0, c, yy, xx) = static_cast<T>(2.0 * d * (1.0 + kappa * m) / count);
        }
    if (!accumulate) continue;
    for (int p = 0; p < kPatchCount; ++p) {
      const auto [ox, oy] = grids[i].offsets[p];
      for (int c = 0; c < decoded.c; ++c)
        for (int ly = 0; ly < ph; ++ly)
          for (int lx = 0; lx < pw; ++lx) {
            const T g = static_cast<T>(weights[p].at(ox + lx, oy + ly)) * dy(0, c, oy + ly, ox + lx) / T(4);
            const int b = kPatchCount * i + p;
            dres(b, c, 2 * ly, 2 * lx) += g;
            dres(b, c, 2 * ly, 2 * lx + 1) += g;
            dres(b, c, 2 * ly + 1, 2 * lx) += g;
            dres(b, c, 2 * ly + 1, 2 * lx + 1) += g;
          }
    }
  }
  if (accumulate) {
    auto d2 = params.act2.backward(params.last.backward(dres));
    auto d1 = params.act1.backward(params.middle.backward(d2));
    params.first.backward(d1, false);
  }
  return loss / count;
}

ckpt::Checkpoint to_checkpoint(const EnhancerParams<float>& params) {
  ckpt::Checkpoint c;
  c.tag = "enhancer";
  c.meta = {{"hidden", params.first.out_channels()}, {"patches", kPatchCount}};
  ckpt::put_params(c, const_cast<EnhancerParams<float>&>(params).params());
  return c;
}

EnhancerParams<float> from_checkpoint(const ckpt::Checkpoint& c) {
  if (c.tag != "enhancer") throw FormatError("expected an 'enhancer' checkpoint, got '" + c.tag + "'");
  int hidden = 0;
  try {
    hidden = c.meta.at("hidden").get<int>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("enhancer metadata: ") + e.what());
  }
  EnhancerParams<float> params(0, hidden);
  ckpt::take_params(c, params.params());
  return params;
}

nn::Tensor<float> char_pixel_mask(const std::vector<const GrayImage*>& char_maps) {
  return nn::masks_to_tensor(char_maps);
}

std::vector<nn::Tensor<float>> decode_corpus(const diffusion::Vae& vae, const Corpus& corpus) {
  std::vector<nn::Tensor<float>> out;
  out.reserve(corpus.size());
  for (std::size_t start = 0; start < corpus.size(); start += 32) {
    std::vector<const RgbImage*> images;
    for (std::size_t i = start; i < std::min(corpus.size(), start + 32); ++i) images.push_back(&corpus[i].image);
    const auto decoded = vae.decode(vae.encode(nn::images_to_tensor(images)));
    for (int i = 0; i < decoded.n; ++i) out.push_back(nn::slice_batch(decoded, i));
  }
  return out;
}

EnhanceTrainReport train_enhancer(EnhancerParams<float>& params, const diffusion::Vae& vae, const Corpus& corpus,
                                  const diffusion::TrainOptions& options, double kappa) {
  if (corpus.empty()) throw ContractError("training corpus is empty");
  for (const auto& item : corpus) {
    if (item.char_map.width != item.image.width || item.char_map.height != item.image.height) {
      throw ContractError("corpus character mask does not match its image");
    }
  }
  if (options.steps < 0 || options.batch <= 0) throw ContractError("invalid training options");
  const auto decoded = decode_corpus(vae, corpus);
  auto rng = make_rng(options.seed, 0x74656e68);
  std::uniform_int_distribution<std::size_t> pick(0, corpus.size() - 1);
  auto plist = params.params();
  nn::Adam<float> opt(plist, options.lr);
  EnhanceTrainReport report;
  for (int step = 0; step < options.steps; ++step) {
    std::vector<const RgbImage*> images;
    std::vector<const GrayImage*> maps;
    nn::Tensor<float> base(options.batch, 3, diffusion::kImageSize, diffusion::kImageSize);
    for (int b = 0; b < options.batch; ++b) {
      const auto k = pick(rng);
      images.push_back(&corpus[k].image);
      maps.push_back(&corpus[k].char_map);
      std::copy(decoded[k].data.begin(), decoded[k].data.end(), base.sample(b));
    }
    const auto target = nn::images_to_tensor(images);
    const auto mask = char_pixel_mask(maps);
    nn::zero_grads(plist);
    const double loss = enhancer_loss(params, base, target, mask, kappa, true);
    if (step == 0) report.initial_loss = loss;
    opt.clip_grad_norm(1.0);
    opt.step();
    report.losses.push_back(loss);
    if (options.on_step) options.on_step(step, loss);
  }
  return report;
}

template PatchGrid<float> split(const nn::Tensor<float>&);
template PatchGrid<double> split(const nn::Tensor<double>&);
template struct EnhancerParams<float>;
template struct EnhancerParams<double>;
template nn::Tensor<float> enhance(const nn::Tensor<float>&, const EnhancerParams<float>&);
template nn::Tensor<double> enhance(const nn::Tensor<double>&, const EnhancerParams<double>&);
template nn::Tensor<float> merge(const nn::Tensor<float>&, const nn::Tensor<float>&, const PatchGrid<float>&,
                                 const std::vector<Grid<double>>&);
template nn::Tensor<double> merge(const nn::Tensor<double>&, const nn::Tensor<double>&, const PatchGrid<double>&,
                                  const std::vector<Grid<double>>&);
template nn::Tensor<float> enhance_decoded(const nn::Tensor<float>&, const EnhancerParams<float>&);
template nn::Tensor<double> enhance_decoded(const nn::Tensor<double>&, const EnhancerParams<double>&);
template double enhancer_loss(EnhancerParams<float>&, const nn::Tensor<float>&, const nn::Tensor<float>&,
                              const nn::Tensor<float>&, double, bool);
template double enhancer_loss(EnhancerParams<double>&, const nn::Tensor<double>&, const nn::Tensor<double>&,
                              const nn::Tensor<double>&, double, bool);

}  // namespace customtext::enhance
