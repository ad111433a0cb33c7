#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "steadv/array.hpp"
#include "steadv/errors.hpp"

namespace steadv {

namespace detail {

inline void write_u32le(std::ostream& os, std::uint32_t v) {
  unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                        static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  os.write(reinterpret_cast<const char*>(b), 4);
}

inline void write_u64le(std::ostream& os, std::uint64_t v) {
  write_u32le(os, static_cast<std::uint32_t>(v));
  write_u32le(os, static_cast<std::uint32_t>(v >> 32));
}

inline std::uint32_t read_u32le(std::istream& is, const char* what) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4))
    throw IoError(std::string("tensor io: truncated file while reading ") + what);
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

inline std::uint64_t read_u64le(std::istream& is, const char* what) {
  std::uint64_t lo = read_u32le(is, what);
  std::uint64_t hi = read_u32le(is, what);
  return lo | (hi << 32);
}

inline void write_f32le(std::ostream& os, float f) {
  std::uint32_t bits;
  std::memcpy(&bits, &f, 4);
  write_u32le(os, bits);
}

inline float read_f32le(std::istream& is, const char* what) {
  std::uint32_t bits = read_u32le(is, what);
  float f;
  std::memcpy(&f, &bits, 4);
  return f;
}

}  // namespace detail

// Tensor container: magic "STT1", rank (u32 LE), dims (u32 LE each), then
// raw 32-bit LE floats in row-major order.
template <typename T>
void write_tensor(std::ostream& os, const Array<T>& a) {
  os.write("STT1", 4);
  detail::write_u32le(os, static_cast<std::uint32_t>(a.rank()));
  for (int i = 0; i < a.rank(); ++i) detail::write_u32le(os, static_cast<std::uint32_t>(a.dim(i)));
  for (std::int64_t i = 0; i < a.size(); ++i) detail::write_f32le(os, static_cast<float>(a[i]));
}

template <typename T = float>
Array<T> read_tensor(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, "STT1", 4) != 0)
    throw IoError("tensor io: bad magic bytes, expected STT1");
  std::uint32_t rank = detail::read_u32le(is, "rank");
  if (rank > 8) throw IoError("tensor io: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  for (std::uint32_t i = 0; i < rank; ++i)
    shape[i] = static_cast<int>(detail::read_u32le(is, "dims"));
  Array<T> out(shape);
  for (std::int64_t i = 0; i < out.size(); ++i)
    out[i] = static_cast<T>(detail::read_f32le(is, "data"));
  return out;
}

template <typename T>
void save_tensor(const std::string& path, const Array<T>& a) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("tensor io: cannot open for write: " + path);
  write_tensor(os, a);
  if (!os) throw IoError("tensor io: write failed: " + path);
}

template <typename T = float>
Array<T> load_tensor(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("tensor io: cannot open: " + path);
  return read_tensor<T>(is);
}

}  // namespace steadv
