#pragma once

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "customtext/errors.hpp"
#include "customtext/nn.hpp"

namespace customtext::ckpt {

inline constexpr std::uint32_t kFormatVersion = 1;

struct Array {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

// Binary layout, all integers u32 little-endian:
//   "CTXT" version tag_len tag meta_len meta(json) n_arrays
//   per array: name_len name ndim dims... count f32...
struct Checkpoint {
  std::string tag;
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Array> arrays;

  const Array& get(const std::string& name) const;
};

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt);
Checkpoint deserialize(std::span<const std::uint8_t> bytes);

void save(const std::filesystem::path& path, const Checkpoint& ckpt);
// Throws NotFoundError when the file is missing and FormatError when the tag
// differs from `expected_tag` (empty accepts any tag).
Checkpoint load(const std::filesystem::path& path, const std::string& expected_tag = "");

template <typename T>
void put_params(Checkpoint& ckpt, const nn::ParamList<T>& params) {
  for (const auto* p : params) {
    Array a{p->name, p->shape, {}};
    a.data.reserve(p->size());
    for (T v : p->value) a.data.push_back(static_cast<float>(v));
    ckpt.arrays.push_back(std::move(a));
  }
}

template <typename T>
void take_params(const Checkpoint& ckpt, const nn::ParamList<T>& params) {
  for (auto* p : params) {
    const auto& a = ckpt.get(p->name);
    if (a.shape != p->shape) throw FormatError("checkpoint array " + p->name + " has an unexpected shape");
    for (std::size_t i = 0; i < a.data.size(); ++i) p->value[i] = static_cast<T>(a.data[i]);
  }
}

// SHA-256 over the raw parameter bytes in list order.
template <typename T>
std::string param_checksum(const nn::ParamList<T>& params);

}  // namespace customtext::ckpt
