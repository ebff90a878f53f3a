#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <utility>
#include <vector>

#include "shapereg/tensor.hpp"

namespace shapereg {

// Flat little-endian weight container.
// Layout: magic "SRTW", version u32, entry count u32, then per entry:
//   name length u16, UTF-8 name, rank u8, dims as u32s, float64 payload.

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

namespace detail {

inline void put_bytes(std::ostream& os, const void* p, size_t n) {
  os.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
}

inline void put_u16(std::ostream& os, uint16_t v) {
  unsigned char b[2] = {static_cast<unsigned char>(v & 0xff),
                        static_cast<unsigned char>(v >> 8)};
  put_bytes(os, b, 2);
}

inline void put_u32(std::ostream& os, uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  put_bytes(os, b, 4);
}

inline void put_f64(std::ostream& os, double v) {
  uint64_t bits;
  std::memcpy(&bits, &v, 8);
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(bits >> (8 * i));
  put_bytes(os, b, 8);
}

class Reader {
 public:
  Reader(std::istream& is, std::string path) : is_(is), path_(std::move(path)) {}

  void bytes(void* p, size_t n, const char* what) {
    is_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
    if (static_cast<size_t>(is_.gcount()) != n)
      throw std::runtime_error(path_ + ": truncated reading " +
                               std::string(what) + " at offset " +
                               std::to_string(offset_));
    offset_ += n;
  }

  uint16_t u16(const char* what) {
    unsigned char b[2];
    bytes(b, 2, what);
    return static_cast<uint16_t>(b[0] | (b[1] << 8));
  }

  uint32_t u32(const char* what) {
    unsigned char b[4];
    bytes(b, 4, what);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(b[i]) << (8 * i);
    return v;
  }

  uint8_t u8(const char* what) {
    unsigned char b;
    bytes(&b, 1, what);
    return b;
  }

  double f64(const char* what) {
    unsigned char b[8];
    bytes(b, 8, what);
    uint64_t bits = 0;
    for (int i = 0; i < 8; ++i) bits |= static_cast<uint64_t>(b[i]) << (8 * i);
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  size_t offset() const { return offset_; }
  const std::string& path() const { return path_; }

 private:
  std::istream& is_;
  std::string path_;
  size_t offset_ = 0;
};

}  // namespace detail

inline constexpr uint32_t kWeightFormatVersion = 1;

inline void save_tensors(const std::string& path, const NamedTensors& entries) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error(path + ": cannot open for writing");
  os.write("SRTW", 4);
  detail::put_u32(os, kWeightFormatVersion);
  detail::put_u32(os, static_cast<uint32_t>(entries.size()));
  for (const auto& [name, t] : entries) {
    require(name.size() <= 0xffff, "save_tensors: name too long: " + name);
    detail::put_u16(os, static_cast<uint16_t>(name.size()));
    detail::put_bytes(os, name.data(), name.size());
    unsigned char rank = static_cast<unsigned char>(t.rank());
    detail::put_bytes(os, &rank, 1);
    for (int i = 0; i < t.rank(); ++i)
      detail::put_u32(os, static_cast<uint32_t>(t.dim(i)));
    for (double v : t.values()) detail::put_f64(os, v);
  }
  if (!os) throw std::runtime_error(path + ": write failed");
}

inline NamedTensors load_tensors(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error(path + ": cannot open for reading");
  detail::Reader r(is, path);
  char magic[4];
  r.bytes(magic, 4, "magic");
  if (std::memcmp(magic, "SRTW", 4) != 0)
    throw std::runtime_error(path + ": bad magic at offset 0");
  uint32_t version = r.u32("version");
  if (version != kWeightFormatVersion)
    throw std::runtime_error(path + ": unsupported version " +
                             std::to_string(version));
  uint32_t count = r.u32("entry count");
  NamedTensors entries;
  entries.reserve(count);
  for (uint32_t e = 0; e < count; ++e) {
    uint16_t name_len = r.u16("name length");
    std::string name(name_len, '\0');
    if (name_len) r.bytes(name.data(), name_len, "name");
    uint8_t rank = r.u8("rank");
    Dims dims(rank);
    for (auto& d : dims) {
      uint32_t v = r.u32("dim");
      d = static_cast<int>(v);
    }
    long long n = dims_numel(dims);
    if (n < 0 || n > (1ll << 32))
      throw std::runtime_error(path + ": implausible entry size for '" +
                               name + "' at offset " +
                               std::to_string(r.offset()));
    std::vector<double> data(static_cast<size_t>(n));
    for (auto& v : data) v = r.f64("payload");
    entries.emplace_back(name, Tensor::from(dims, std::move(data)));
  }
  return entries;
}

}  // namespace shapereg
