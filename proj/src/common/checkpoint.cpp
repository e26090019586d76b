#include "customtext/checkpoint.hpp"

#include <cstring>

#include "customtext/io.hpp"

namespace customtext::ckpt {

namespace {

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

void put_string(std::vector<std::uint8_t>& out, const std::string& s) {
  put_u32(out, static_cast<std::uint32_t>(s.size()));
  out.insert(out.end(), s.begin(), s.end());
}

struct Reader {
  std::span<const std::uint8_t> bytes;
  std::size_t pos = 0;

  void need(std::size_t n) const {
    if (pos + n > bytes.size()) throw FormatError("checkpoint is truncated");
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(bytes[pos + i]) << (8 * i);
    pos += 4;
    return v;
  }
  std::string str() {
    const auto n = u32();
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes.data() + pos), n);
    pos += n;
    return s;
  }
};

}  // namespace

const Array& Checkpoint::get(const std::string& name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw FormatError("checkpoint '" + tag + "' has no array " + name);
}

std::vector<std::uint8_t> serialize(const Checkpoint& ckpt) {
  std::vector<std::uint8_t> out{'C', 'T', 'X', 'T'};
  put_u32(out, kFormatVersion);
  put_string(out, ckpt.tag);
  put_string(out, ckpt.meta.dump());
  put_u32(out, static_cast<std::uint32_t>(ckpt.arrays.size()));
  for (const auto& a : ckpt.arrays) {
    put_string(out, a.name);
    put_u32(out, static_cast<std::uint32_t>(a.shape.size()));
    std::size_t count = 1;
    for (int d : a.shape) {
      put_u32(out, static_cast<std::uint32_t>(d));
      count *= static_cast<std::size_t>(d);
    }
    if (count != a.data.size()) throw ContractError("array " + a.name + " data does not match its shape");
    put_u32(out, static_cast<std::uint32_t>(count));
    for (float f : a.data) {
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      put_u32(out, bits);
    }
  }
  return out;
}

Checkpoint deserialize(std::span<const std::uint8_t> bytes) {
  Reader r{bytes};
  r.need(4);
  if (std::memcmp(bytes.data(), "CTXT", 4) != 0) throw FormatError("not a checkpoint (bad magic)");
  r.pos = 4;
  const auto version = r.u32();
  if (version != kFormatVersion) throw FormatError("unsupported checkpoint version " + std::to_string(version));
  Checkpoint ckpt;
  ckpt.tag = r.str();
  try {
    ckpt.meta = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint metadata: ") + e.what());
  }
  const auto n = r.u32();
  for (std::uint32_t k = 0; k < n; ++k) {
    Array a;
    a.name = r.str();
    const auto ndim = r.u32();
    std::size_t count = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      a.shape.push_back(static_cast<int>(r.u32()));
      count *= static_cast<std::size_t>(a.shape.back());
    }
    if (r.u32() != count) throw FormatError("array " + a.name + " count does not match its shape");
    r.need(count * 4);
    a.data.resize(count);
    for (auto& f : a.data) {
      const auto bits = r.u32();
      std::memcpy(&f, &bits, 4);
    }
    ckpt.arrays.push_back(std::move(a));
  }
  if (r.pos != bytes.size()) throw FormatError("trailing bytes after checkpoint arrays");
  return ckpt;
}

void save(const std::filesystem::path& path, const Checkpoint& ckpt) { io::write_file(path, serialize(ckpt)); }

Checkpoint load(const std::filesystem::path& path, const std::string& expected_tag) {
  if (!std::filesystem::exists(path)) throw NotFoundError("checkpoint not found: " + path.string());
  auto ckpt = deserialize(io::read_file(path));
  if (!expected_tag.empty() && ckpt.tag != expected_tag) {
    throw FormatError("checkpoint " + path.string() + " holds '" + ckpt.tag + "', expected '" + expected_tag + "'");
  }
  return ckpt;
}

template <typename T>
std::string param_checksum(const nn::ParamList<T>& params) {
  std::vector<std::uint8_t> bytes;
  for (const auto* p : params) {
    const auto* raw = reinterpret_cast<const std::uint8_t*>(p->value.data());
    bytes.insert(bytes.end(), raw, raw + p->value.size() * sizeof(T));
  }
  return io::sha256_hex(bytes);
}

template std::string param_checksum<float>(const nn::ParamList<float>&);
template std::string param_checksum<double>(const nn::ParamList<double>&);

}  // namespace customtext::ckpt
