#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "customtext/checkpoint.hpp"
#include "customtext/corpus.hpp"
#include "customtext/diffusion.hpp"
#include "customtext/grid.hpp"
#include "customtext/nn.hpp"

namespace customtext::enhance {

inline constexpr int kPatchCount = 9;

// Half-size crops at offsets {0, H/4, H/2} x {0, W/4, W/2}, each bilinearly
// upscaled to H x W. Tiles are stored as a batch of 9, row-major over
// (offset_y, offset_x).
template <typename T>
struct PatchGrid {
  int height = 0;
  int width = 0;
  std::vector<std::pair<int, int>> offsets;  // (x, y)
  nn::Tensor<T> tiles;                       // (9, c, H, W)
};

template <typename T>
PatchGrid<T> split(const nn::Tensor<T>& decoded);

// Three 1x1 stages: zero conv, hidden conv, zero conv, SiLU in between.
template <typename T>
struct EnhancerParams {
  explicit EnhancerParams(std::uint64_t seed = 0, int hidden = 16);

  nn::Conv2d<T> first, middle, last;
  nn::SiLU<T> act1, act2;

  nn::ParamList<T> params();
  std::string checksum() const;
};

// Residual for a batch of tiles (pure).
template <typename T>
nn::Tensor<T> enhance(const nn::Tensor<T>& tiles, const EnhancerParams<T>& params);

// Raised-cosine bumps peaking at each patch centre, clipped to the patch
// footprint and normalised to sum to one per pixel. Row-major like split().
std::vector<Grid<double>> center_weight(int height, int width);

// base + sum_i weight_i * downscale(residual_i) placed at patch i's footprint,
// downscale being a 2x2 average.
template <typename T>
nn::Tensor<T> merge(const nn::Tensor<T>& base, const nn::Tensor<T>& residuals, const PatchGrid<T>& grid,
                    const std::vector<Grid<double>>& weights);

// split -> enhance -> merge for every image of a (n, 3, H, W) batch.
template <typename T>
nn::Tensor<T> enhance_decoded(const nn::Tensor<T>& decoded, const EnhancerParams<T>& params);

// mean((y - gt)^2) + kappa * mean(mask * (y - gt)^2) for y = enhance_decoded(decoded).
// `mask` is (n, 1, H, W) with 1 on character pixels. When `accumulate` is set,
// parameter gradients are added to the enhancer's grad buffers.
template <typename T>
double enhancer_loss(EnhancerParams<T>& params, const nn::Tensor<T>& decoded, const nn::Tensor<T>& target,
                     const nn::Tensor<T>& mask, double kappa, bool accumulate);

ckpt::Checkpoint to_checkpoint(const EnhancerParams<float>& params);
EnhancerParams<float> from_checkpoint(const ckpt::Checkpoint& ckpt);

struct EnhanceTrainReport {
  std::vector<double> losses;
  double initial_loss = 0;  // loss of the untouched vanilla decoder on the first batch
};

// Vanilla reconstructions decode(encode(x)) for every corpus image.
std::vector<nn::Tensor<float>> decode_corpus(const diffusion::Vae& vae, const Corpus& corpus);

EnhanceTrainReport train_enhancer(EnhancerParams<float>& params, const diffusion::Vae& vae, const Corpus& corpus,
                                  const diffusion::TrainOptions& options, double kappa = 5.0);

// Character pixels (index > 0) of each corpus item as (n, 1, H, W).
nn::Tensor<float> char_pixel_mask(const std::vector<const GrayImage*>& char_maps);

}  // namespace customtext::enhance
