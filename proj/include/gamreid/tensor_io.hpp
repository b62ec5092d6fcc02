#pragma once

// Binary tensor format:
//   "GAMT" | u8 version | u8 rank | rank x u64 LE extents | f64 LE payload
// The payload is always f64 regardless of the in-memory scalar type.

#include <array>
#include <bit>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <istream>
#include <ostream>
#include <string>

#include "gamreid/error.hpp"
#include "gamreid/tensor.hpp"

namespace gamreid {

inline constexpr std::array<char, 4> kTensorMagic{'G', 'A', 'M', 'T'};
inline constexpr std::uint8_t kTensorFormatVersion = 1;

namespace io {

inline void write_u64(std::ostream& os, std::uint64_t v) {
  std::array<char, 8> b;
  for (int i = 0; i < 8; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 8);
}

inline void write_u32(std::ostream& os, std::uint32_t v) {
  std::array<char, 4> b;
  for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
  os.write(b.data(), 4);
}

inline void write_f64(std::ostream& os, double v) { write_u64(os, std::bit_cast<std::uint64_t>(v)); }

inline void read_exact(std::istream& is, char* dst, std::size_t n, const char* what) {
  is.read(dst, static_cast<std::streamsize>(n));
  require(static_cast<std::size_t>(is.gcount()) == n, ErrorKind::format,
          std::string("truncated input while reading ") + what);
}

inline std::uint64_t read_u64(std::istream& is, const char* what) {
  std::array<unsigned char, 8> b;
  read_exact(is, reinterpret_cast<char*>(b.data()), 8, what);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint32_t read_u32(std::istream& is, const char* what) {
  std::array<unsigned char, 4> b;
  read_exact(is, reinterpret_cast<char*>(b.data()), 4, what);
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

inline std::uint8_t read_u8(std::istream& is, const char* what) {
  char c;
  read_exact(is, &c, 1, what);
  return static_cast<std::uint8_t>(c);
}

}  // namespace io

template <std::floating_point T>
void write_tensor(std::ostream& os, const BasicTensor<T>& t) {
  require(t.dim() <= 255, ErrorKind::usage, "write_tensor: rank too large");
  os.write(kTensorMagic.data(), 4);
  os.put(static_cast<char>(kTensorFormatVersion));
  os.put(static_cast<char>(t.dim()));
  for (auto e : t.shape()) io::write_u64(os, e);
  for (auto v : t.data()) io::write_f64(os, static_cast<double>(v));
}

template <std::floating_point T = double>
BasicTensor<T> read_tensor(std::istream& is) {
  std::array<char, 4> magic;
  io::read_exact(is, magic.data(), 4, "tensor magic");
  require(magic == kTensorMagic, ErrorKind::format, "bad tensor magic (expected GAMT)");
  const auto version = io::read_u8(is, "tensor version");
  require(version == kTensorFormatVersion, ErrorKind::format,
          "unsupported tensor format version " + std::to_string(version));
  const auto rank = io::read_u8(is, "tensor rank");
  require(rank >= 1, ErrorKind::format, "tensor rank must be at least 1");
  Shape shape(rank);
  std::uint64_t total = 1;
  for (auto& e : shape) {
    e = io::read_u64(is, "tensor extent");
    require(e > 0 && e < (1ULL << 40), ErrorKind::format, "implausible tensor extent");
    total *= e;
    require(total < (1ULL << 36), ErrorKind::format, "implausible tensor size");
  }
  std::vector<T> data(total);
  for (auto& v : data) v = static_cast<T>(std::bit_cast<double>(io::read_u64(is, "tensor payload")));
  return BasicTensor<T>(std::move(shape), std::move(data));
}

template <std::floating_point T>
void save_tensor(const std::filesystem::path& path, const BasicTensor<T>& t) {
  std::ofstream os(path, std::ios::binary);
  require(static_cast<bool>(os), ErrorKind::io, "cannot open " + path.string() + " for writing");
  write_tensor(os, t);
  require(static_cast<bool>(os), ErrorKind::io, "write failed: " + path.string());
}

template <std::floating_point T = double>
BasicTensor<T> load_tensor(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  require(static_cast<bool>(is), ErrorKind::io, "cannot open " + path.string());
  return read_tensor<T>(is);
}

}  // namespace gamreid
