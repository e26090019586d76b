#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "customtext/errors.hpp"

namespace customtext {

using Rgb8 = std::array<std::uint8_t, 3>;
using Rgba8 = std::array<std::uint8_t, 4>;

// Row-major 2-D raster.
template <typename T>
struct Grid {
  int width = 0;
  int height = 0;
  std::vector<T> data;

  Grid() = default;
  Grid(int w, int h, T fill = T{}) : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill) {
    if (w < 0 || h < 0) throw ContractError("negative grid dimensions");
  }

  T& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
  const T& at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
  bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
  std::size_t size() const { return data.size(); }
  bool empty() const { return data.empty(); }

  friend bool operator==(const Grid&, const Grid&) = default;
};

using RgbImage = Grid<Rgb8>;
using RgbaImage = Grid<Rgba8>;
using GrayImage = Grid<std::uint8_t>;

}  // namespace customtext
