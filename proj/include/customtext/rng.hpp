#pragma once

#include <cstdint>
#include <random>

#include "customtext/nn.hpp"

namespace customtext {

// Independent, reproducible stream `stream` derived from `seed`.
inline std::mt19937_64 make_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

template <typename T>
void fill_normal(nn::Tensor<T>& t, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  for (auto& v : t.data) v = static_cast<T>(dist(rng));
}

template <typename T>
nn::Tensor<T> normal_like(int n, int c, int h, int w, std::mt19937_64& rng) {
  nn::Tensor<T> t(n, c, h, w);
  fill_normal(t, rng);
  return t;
}

}  // namespace customtext
