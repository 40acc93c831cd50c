#pragma once

// Checkpoint container, version 1. All integers and floats little-endian.
//
//   offset  size  field
//   0       8     magic "PBCKPT\0\0"
//   8       4     u32 version (= 1)
//   12      8     u64 step (optimizer step counter)
//   20      4     u32 metadata length L, then L bytes of UTF-8 (JSON text)
//   ..      4     u32 array count N, then N records:
//                   u32 name length, name bytes,
//                   u32 rank, rank x u64 dims,
//                   prod(dims) x f64 values (row-major)
//
// Optimizer moments are stored as ordinary arrays named "adamw.m/<param>" and
// "adamw.v/<param>".

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "photobridge/ad/tensor.hpp"

namespace photobridge::ad {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

inline constexpr char kCheckpointMagic[8] = {'P', 'B', 'C', 'K', 'P', 'T', '\0', '\0'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct NamedArray {
  std::string name;
  Shape shape;
  std::vector<double> values;

  bool operator==(const NamedArray&) const = default;
};

struct Checkpoint {
  std::uint64_t step = 0;
  std::string metadata;
  std::vector<NamedArray> arrays;

  const NamedArray* find(const std::string& name) const {
    for (const auto& a : arrays) {
      if (a.name == name) return &a;
    }
    return nullptr;
  }

  bool operator==(const Checkpoint&) const = default;
};

namespace detail {

template <class U>
void put(std::ostream& os, U v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(U));
}

template <class U>
U get(std::istream& is, const std::string& path) {
  U v{};
  if (!is.read(reinterpret_cast<char*>(&v), sizeof(U))) throw DataError(path + ": truncated checkpoint");
  return v;
}

inline std::string get_string(std::istream& is, const std::string& path) {
  const auto n = get<std::uint32_t>(is, path);
  std::string s(n, '\0');
  if (n && !is.read(s.data(), n)) throw DataError(path + ": truncated checkpoint string");
  return s;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const Checkpoint& ck) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw DataError("cannot write checkpoint " + path);
  os.write(kCheckpointMagic, sizeof(kCheckpointMagic));
  detail::put<std::uint32_t>(os, kCheckpointVersion);
  detail::put<std::uint64_t>(os, ck.step);
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.metadata.size()));
  os.write(ck.metadata.data(), static_cast<std::streamsize>(ck.metadata.size()));
  detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(ck.arrays.size()));
  for (const auto& a : ck.arrays) {
    if (a.values.size() != shape_size(a.shape)) throw DimensionError("checkpoint array '" + a.name + "' shape mismatch");
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.name.size()));
    os.write(a.name.data(), static_cast<std::streamsize>(a.name.size()));
    detail::put<std::uint32_t>(os, static_cast<std::uint32_t>(a.shape.size()));
    for (auto d : a.shape) detail::put<std::uint64_t>(os, d);
    os.write(reinterpret_cast<const char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(double)));
  }
  if (!os) throw DataError("write failed for checkpoint " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw DataError("cannot open checkpoint " + path);
  char magic[8];
  if (!is.read(magic, 8) || std::memcmp(magic, kCheckpointMagic, 8) != 0) throw DataError(path + ": not a checkpoint file");
  const auto version = detail::get<std::uint32_t>(is, path);
  if (version != kCheckpointVersion) throw DataError(path + ": unsupported checkpoint version " + std::to_string(version));
  Checkpoint ck;
  ck.step = detail::get<std::uint64_t>(is, path);
  ck.metadata = detail::get_string(is, path);
  const auto n = detail::get<std::uint32_t>(is, path);
  for (std::uint32_t k = 0; k < n; ++k) {
    NamedArray a;
    a.name = detail::get_string(is, path);
    const auto rank = detail::get<std::uint32_t>(is, path);
    for (std::uint32_t r = 0; r < rank; ++r) a.shape.push_back(detail::get<std::uint64_t>(is, path));
    a.values.resize(shape_size(a.shape));
    if (!a.values.empty() &&
        !is.read(reinterpret_cast<char*>(a.values.data()), static_cast<std::streamsize>(a.values.size() * sizeof(double)))) {
      throw DataError(path + ": truncated data for array '" + a.name + "'");
    }
    ck.arrays.push_back(std::move(a));
  }
  return ck;
}

}  // namespace photobridge::ad
