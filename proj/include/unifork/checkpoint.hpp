#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "unifork/tensor.hpp"

namespace unifork {

// Binary tensor archive:
//   "UFRK" | u32 version | records until EOF
//   record: u32 name_len | name | u8 dtype | u32 rank | u64 dims[rank] | f64 data[]
// All integers and floats little-endian.
namespace checkpoint {

inline constexpr char kMagic[4] = {'U', 'F', 'R', 'K'};
inline constexpr std::uint32_t kVersion = 1;
inline constexpr std::uint8_t kDtypeF64 = 0;

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {
template <typename T>
void put(std::string& out, T v) {
  static_assert(std::endian::native == std::endian::little, "big-endian hosts not supported");
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T get(const std::string& in, std::size_t& pos) {
  if (pos + sizeof(T) > in.size()) throw Error("checkpoint truncated");
  T v;
  std::memcpy(&v, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}
}  // namespace detail

inline std::string encode(const NamedTensors& tensors) {
  std::string out(kMagic, 4);
  detail::put<std::uint32_t>(out, kVersion);
  for (const auto& [name, t] : tensors) {
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    detail::put<std::uint8_t>(out, kDtypeF64);
    detail::put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) detail::put<std::uint64_t>(out, d);
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(double));
  }
  return out;
}

inline NamedTensors decode(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw Error("not a UFRK checkpoint");
  std::size_t pos = 4;
  const auto version = detail::get<std::uint32_t>(bytes, pos);
  if (version != kVersion) throw Error("unsupported checkpoint version " + std::to_string(version));
  NamedTensors out;
  while (pos < bytes.size()) {
    const auto len = detail::get<std::uint32_t>(bytes, pos);
    if (pos + len > bytes.size()) throw Error("checkpoint truncated");
    std::string name = bytes.substr(pos, len);
    pos += len;
    const auto dtype = detail::get<std::uint8_t>(bytes, pos);
    if (dtype != kDtypeF64) throw Error("unsupported dtype tag in checkpoint for " + name);
    const auto rank = detail::get<std::uint32_t>(bytes, pos);
    Shape shape(rank);
    for (auto& d : shape) d = detail::get<std::uint64_t>(bytes, pos);
    const std::size_t n = shape_numel(shape);
    if (pos + n * sizeof(double) > bytes.size()) throw Error("checkpoint truncated");
    std::vector<double> data(n);
    std::memcpy(data.data(), bytes.data() + pos, n * sizeof(double));
    pos += n * sizeof(double);
    out.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return out;
}

inline void write_file(const std::string& path, const std::string& bytes) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw Error("cannot open " + path + " for writing");
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw Error("failed writing " + path);
}

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open " + path);
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

inline void save(const std::string& path, const NamedTensors& tensors) { write_file(path, encode(tensors)); }
inline NamedTensors load(const std::string& path) { return decode(read_file(path)); }

}  // namespace checkpoint
}  // namespace unifork
