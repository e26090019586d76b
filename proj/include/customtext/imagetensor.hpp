#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "customtext/grid.hpp"
#include "customtext/nn.hpp"

namespace customtext::nn {

// Pixel byte v <-> value v/127.5 - 1 in [-1, 1].
inline float byte_to_unit(std::uint8_t v) { return static_cast<float>(v) / 127.5f - 1.0f; }

inline std::uint8_t unit_to_byte(float v) {
  const float s = std::round((std::clamp(v, -1.0f, 1.0f) + 1.0f) * 127.5f);
  return static_cast<std::uint8_t>(s);
}

inline void write_image(Tensor<float>& t, int index, const RgbImage& image) {
  if (t.c != 3 || t.h != image.height || t.w != image.width) throw ContractError("image does not fit tensor slot");
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x)
      for (int c = 0; c < 3; ++c) t(index, c, y, x) = byte_to_unit(image.at(x, y)[c]);
}

inline Tensor<float> images_to_tensor(const std::vector<const RgbImage*>& images) {
  if (images.empty()) throw ContractError("no images");
  Tensor<float> t(static_cast<int>(images.size()), 3, images.front()->height, images.front()->width);
  for (std::size_t i = 0; i < images.size(); ++i) write_image(t, static_cast<int>(i), *images[i]);
  return t;
}

inline Tensor<float> image_to_tensor(const RgbImage& image) { return images_to_tensor({&image}); }

inline RgbImage tensor_to_image(const Tensor<float>& t, int index = 0) {
  if (t.c != 3) throw ContractError("image tensor must have 3 channels");
  RgbImage image(t.w, t.h);
  for (int y = 0; y < t.h; ++y)
    for (int x = 0; x < t.w; ++x)
      for (int c = 0; c < 3; ++c) image.at(x, y)[c] = unit_to_byte(t(index, c, y, x));
  return image;
}

inline IndexMap index_maps(const std::vector<const GrayImage*>& maps) {
  if (maps.empty()) throw ContractError("no index maps");
  IndexMap m(static_cast<int>(maps.size()), maps.front()->height, maps.front()->width);
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i]->width != m.w || maps[i]->height != m.h) throw ContractError("index map size mismatch");
    std::copy(maps[i]->data.begin(), maps[i]->data.end(), m.data.begin() + i * maps[i]->data.size());
  }
  return m;
}

// Binary masks (nonzero -> 1) as a 1-channel tensor.
inline Tensor<float> masks_to_tensor(const std::vector<const GrayImage*>& masks) {
  if (masks.empty()) throw ContractError("no masks");
  Tensor<float> t(static_cast<int>(masks.size()), 1, masks.front()->height, masks.front()->width);
  for (std::size_t i = 0; i < masks.size(); ++i) {
    if (masks[i]->width != t.w || masks[i]->height != t.h) throw ContractError("mask size mismatch");
    for (std::size_t k = 0; k < masks[i]->data.size(); ++k) t.data[i * t.plane() + k] = masks[i]->data[k] ? 1.0f : 0.0f;
  }
  return t;
}

}  // namespace customtext::nn
