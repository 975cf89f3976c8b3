#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <type_traits>
#include <vector>

#include "cct/error.hpp"
#include "cct/tensor.hpp"

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace cct {

enum class DType : std::uint8_t { f32 = 0, f64 = 1, u8 = 2, i64 = 3 };

template <class T>
constexpr DType dtype_of() {
  if constexpr (std::is_same_v<T, float>) return DType::f32;
  else if constexpr (std::is_same_v<T, double>) return DType::f64;
  else if constexpr (std::is_same_v<T, std::uint8_t>) return DType::u8;
  else {
    static_assert(std::is_same_v<T, std::int64_t>, "unsupported checkpoint dtype");
    return DType::i64;
  }
}

inline std::size_t dtype_size(DType d) {
  switch (d) {
    case DType::f32: return 4;
    case DType::f64: return 8;
    case DType::u8: return 1;
    case DType::i64: return 8;
  }
  fail(ErrorKind::format, "unknown dtype code " + std::to_string(static_cast<int>(d)));
}

struct NamedTensor {
  std::string name;
  DType dtype = DType::f32;
  Shape shape;
  std::vector<std::uint8_t> bytes;
};

/// Layout (little-endian):
///   "CCTK" u32 version, u16 len + model name, u32 epoch, u32 tensor count,
///   then per tensor: u16 len + name, u8 dtype, u8 ndim, u32 dims[ndim], raw data.
struct Checkpoint {
  static constexpr std::uint32_t version = 1;

  std::string model;
  std::uint32_t epoch = 0;
  std::vector<NamedTensor> tensors;

  template <class T>
  void put(const std::string& name, const Shape& shape, const T* data) {
    NamedTensor t{name, dtype_of<T>(), shape, {}};
    const auto n = static_cast<std::size_t>(numel_of(shape));
    t.bytes.resize(n * sizeof(T));
    if (n) std::memcpy(t.bytes.data(), data, t.bytes.size());
    tensors.push_back(std::move(t));
  }
  template <class T>
  void put(const std::string& name, const std::vector<T>& v) {
    put<T>(name, {static_cast<std::int64_t>(v.size())}, v.data());
  }
  template <class T>
  void put(const std::string& name, const Tensor<T>& t) {
    put<T>(name, t.shape(), t.ptr());
  }
  void put_text(const std::string& name, const std::string& s) {
    put<std::uint8_t>(name, {static_cast<std::int64_t>(s.size())}, reinterpret_cast<const std::uint8_t*>(s.data()));
  }
  void put_i64(const std::string& name, std::int64_t v) { put<std::int64_t>(name, {1}, &v); }
  void put_f64(const std::string& name, double v) { put<double>(name, {1}, &v); }

  bool has(const std::string& name) const { return find(name) != nullptr; }

  const NamedTensor* find(const std::string& name) const {
    for (const auto& t : tensors)
      if (t.name == name) return &t;
    return nullptr;
  }

  const NamedTensor& at(const std::string& name) const {
    const auto* t = find(name);
    if (t == nullptr) fail(ErrorKind::format, "checkpoint has no tensor '" + name + "'");
    return *t;
  }

  template <class T>
  std::vector<T> get(const std::string& name) const {
    const auto& t = at(name);
    if (t.dtype != dtype_of<T>()) fail(ErrorKind::format, "checkpoint tensor '" + name + "' has a different dtype");
    std::vector<T> out(t.bytes.size() / sizeof(T));
    if (!out.empty()) std::memcpy(out.data(), t.bytes.data(), t.bytes.size());
    return out;
  }
  std::string get_text(const std::string& name) const {
    const auto v = get<std::uint8_t>(name);
    return {v.begin(), v.end()};
  }
  std::int64_t get_i64(const std::string& name) const { return get<std::int64_t>(name).at(0); }
  double get_f64(const std::string& name) const { return get<double>(name).at(0); }

  /// Copies a stored tensor into `dst`, which must have the same shape.
  template <class T>
  void load_into(const std::string& name, Tensor<T>& dst) const {
    const auto& t = at(name);
    if (t.shape != dst.shape())
      fail(ErrorKind::format, "checkpoint tensor '" + name + "' has shape " + shape_str(t.shape) + ", model expects " +
                                  shape_str(dst.shape()));
    const auto v = get<T>(name);
    std::copy(v.begin(), v.end(), dst.data().begin());
  }

  std::vector<std::uint8_t> serialize() const {
    std::vector<std::uint8_t> out;
    auto raw = [&out](const void* p, std::size_t n) {
      const auto* b = static_cast<const std::uint8_t*>(p);
      out.insert(out.end(), b, b + n);
    };
    auto u8 = [&](std::uint8_t v) { raw(&v, 1); };
    auto u16 = [&](std::uint16_t v) { raw(&v, 2); };
    auto u32 = [&](std::uint32_t v) { raw(&v, 4); };
    auto str = [&](const std::string& s) {
      if (s.size() > 0xffff) fail(ErrorKind::format, "checkpoint name too long");
      u16(static_cast<std::uint16_t>(s.size()));
      raw(s.data(), s.size());
    };
    raw("CCTK", 4);
    u32(version);
    str(model);
    u32(epoch);
    u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
      str(t.name);
      u8(static_cast<std::uint8_t>(t.dtype));
      if (t.shape.size() > 255) fail(ErrorKind::format, "tensor rank too large for checkpoint");
      u8(static_cast<std::uint8_t>(t.shape.size()));
      for (auto d : t.shape) u32(static_cast<std::uint32_t>(d));
      raw(t.bytes.data(), t.bytes.size());
    }
    return out;
  }

  static Checkpoint deserialize(const std::vector<std::uint8_t>& in, const std::string& what = "checkpoint") {
    std::size_t off = 0;
    auto need = [&](std::size_t n) {
      if (off + n > in.size()) fail(ErrorKind::format, what + ": truncated at byte offset " + std::to_string(off));
    };
    auto raw = [&](void* p, std::size_t n) {
      need(n);
      std::memcpy(p, in.data() + off, n);
      off += n;
    };
    auto u8 = [&] { std::uint8_t v; raw(&v, 1); return v; };
    auto u16 = [&] { std::uint16_t v; raw(&v, 2); return v; };
    auto u32 = [&] { std::uint32_t v; raw(&v, 4); return v; };
    auto str = [&] {
      const auto n = u16();
      need(n);
      std::string s(reinterpret_cast<const char*>(in.data() + off), n);
      off += n;
      return s;
    };
    char magic[4];
    raw(magic, 4);
    if (std::memcmp(magic, "CCTK", 4) != 0) fail(ErrorKind::format, what + ": bad magic at byte offset 0");
    const auto ver = u32();
    if (ver != version) fail(ErrorKind::format, what + ": unsupported version " + std::to_string(ver));
    Checkpoint c;
    c.model = str();
    c.epoch = u32();
    const auto count = u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      NamedTensor t;
      t.name = str();
      t.dtype = static_cast<DType>(u8());
      const std::size_t es = dtype_size(t.dtype);
      const auto nd = u8();
      std::size_t n = 1;
      for (std::uint8_t k = 0; k < nd; ++k) {
        t.shape.push_back(u32());
        n *= static_cast<std::size_t>(t.shape.back());
      }
      need(n * es);
      t.bytes.assign(in.begin() + static_cast<std::ptrdiff_t>(off), in.begin() + static_cast<std::ptrdiff_t>(off + n * es));
      off += n * es;
      c.tensors.push_back(std::move(t));
    }
    if (off != in.size()) fail(ErrorKind::format, what + ": trailing data at byte offset " + std::to_string(off));
    return c;
  }

  void save(const std::filesystem::path& path) const {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto bytes = serialize();
    const auto tmp = std::filesystem::path(path.string() + ".tmp");
    {
      std::ofstream os(tmp, std::ios::binary);
      if (!os) fail(ErrorKind::io, "cannot write " + tmp.string());
      os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
      if (!os) fail(ErrorKind::io, "write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
  }

  static Checkpoint load(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) fail(ErrorKind::io, "cannot open checkpoint " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    return deserialize(bytes, path.string());
  }
};

}  // namespace cct
