#pragma once

// Little-endian binary primitives shared by the feature / map / depth
// container formats, plus the CRC32 used by the map trailer.

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include "hfloc/error.hpp"

namespace hfloc {

inline uint32_t crc32_bytes(const void* data, size_t size) {
  uLong crc = ::crc32(0L, Z_NULL, 0);
  crc = ::crc32(crc, static_cast<const Bytef*>(data),
                static_cast<uInt>(size));
  return static_cast<uint32_t>(crc);
}

// Append-only byte sink. Everything is written explicitly little-endian so
// the on-disk layout does not depend on the host.
class ByteWriter {
 public:
  void u8(uint8_t v) { buf_.push_back(static_cast<char>(v)); }

  void u32(uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  void u64(uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  }

  void f32(float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    u32(bits);
  }

  void f64(double v) {
    uint64_t bits;
    std::memcpy(&bits, &v, 8);
    u64(bits);
  }

  void bytes(const void* data, size_t size) {
    const char* p = static_cast<const char*>(data);
    buf_.insert(buf_.end(), p, p + size);
  }

  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }

  const std::vector<char>& data() const { return buf_; }
  size_t size() const { return buf_.size(); }

 private:
  std::vector<char> buf_;
};

// Bounds-checked reader over an in-memory buffer. Any read past the end
// throws CorruptFile; formats never recover from truncation.
class ByteReader {
 public:
  ByteReader(const char* data, size_t size) : data_(data), size_(size) {}
  explicit ByteReader(const std::vector<char>& buf)
      : ByteReader(buf.data(), buf.size()) {}

  uint8_t u8() {
    need(1);
    return static_cast<uint8_t>(data_[pos_++]);
  }

  uint32_t u32() {
    need(4);
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i)
      v |= static_cast<uint32_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 4;
    return v;
  }

  uint64_t u64() {
    need(8);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i)
      v |= static_cast<uint64_t>(static_cast<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += 8;
    return v;
  }

  float f32() {
    uint32_t bits = u32();
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
  }

  double f64() {
    uint64_t bits = u64();
    double v;
    std::memcpy(&v, &bits, 8);
    return v;
  }

  std::string str() {
    uint32_t n = u32();
    need(n);
    std::string s(data_ + pos_, n);
    pos_ += n;
    return s;
  }

  void bytes(void* out, size_t size) {
    need(size);
    std::memcpy(out, data_ + pos_, size);
    pos_ += size;
  }

  size_t pos() const { return pos_; }
  size_t remaining() const { return size_ - pos_; }
  void seek(size_t pos) {
    if (pos > size_) throw_error(ErrorCode::kCorruptFile, "seek past end");
    pos_ = pos;
  }

 private:
  void need(size_t n) const {
    if (pos_ + n > size_)
      throw_error(ErrorCode::kCorruptFile, "unexpected end of data");
  }

  const char* data_;
  size_t size_;
  size_t pos_ = 0;
};

inline std::vector<char> read_file_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw_error(ErrorCode::kIoError, "cannot open " + path);
  in.seekg(0, std::ios::end);
  std::streamoff size = in.tellg();
  in.seekg(0, std::ios::beg);
  std::vector<char> buf(static_cast<size_t>(size));
  if (size > 0 && !in.read(buf.data(), size))
    throw_error(ErrorCode::kIoError, "short read on " + path);
  return buf;
}

inline void write_file_bytes(const std::string& path,
                             const std::vector<char>& buf) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw_error(ErrorCode::kIoError, "cannot open " + path + " for writing");
  if (!buf.empty()) out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw_error(ErrorCode::kIoError, "short write on " + path);
}

// FNV-1a, used to derive per-item RNG streams from string ids. Stable
// across platforms, unlike std::hash.
inline uint64_t fnv1a64(const void* data, size_t size, uint64_t seed = 0xcbf29ce484222325ull) {
  const unsigned char* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < size; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

inline uint64_t fnv1a64(const std::string& s, uint64_t seed = 0xcbf29ce484222325ull) {
  return fnv1a64(s.data(), s.size(), seed);
}

}  // namespace hfloc
