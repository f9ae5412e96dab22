#pragma once

#include <cstddef>
#include <cstdint>
#include <cstring>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "splitckpt/errors.hpp"

namespace splitckpt {

using Bytes = std::vector<std::byte>;

inline Bytes to_bytes(std::string_view s) {
  Bytes out(s.size());
  if (!s.empty()) std::memcpy(out.data(), s.data(), s.size());
  return out;
}

inline std::string to_string(std::span<const std::byte> b) {
  return std::string(reinterpret_cast<const char*>(b.data()), b.size());
}

/// Little-endian append-only encoder.
class ByteWriter {
 public:
  ByteWriter() = default;
  explicit ByteWriter(std::size_t reserve) { buf_.reserve(reserve); }

  void u8(uint8_t v) { buf_.push_back(std::byte{v}); }
  void u16(uint16_t v) { put_le(v, 2); }
  void u32(uint32_t v) { put_le(v, 4); }
  void u64(uint64_t v) { put_le(v, 8); }
  void i32(int32_t v) { u32(static_cast<uint32_t>(v)); }

  void bytes(std::span<const std::byte> b) { buf_.insert(buf_.end(), b.begin(), b.end()); }
  /// u32 length prefix + raw bytes.
  void str(std::string_view s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(std::as_bytes(std::span(s.data(), s.size())));
  }
  /// Exactly `width` bytes, zero padded. Caller guarantees s.size() <= width.
  void fixed_str(std::string_view s, std::size_t width) {
    bytes(std::as_bytes(std::span(s.data(), s.size())));
    buf_.insert(buf_.end(), width - s.size(), std::byte{0});
  }

  void patch_u32(std::size_t at, uint32_t v) {
    for (int i = 0; i < 4; ++i) buf_[at + i] = std::byte(static_cast<uint8_t>(v >> (8 * i)));
  }
  void patch_u64(std::size_t at, uint64_t v) {
    for (int i = 0; i < 8; ++i) buf_[at + i] = std::byte(static_cast<uint8_t>(v >> (8 * i)));
  }

  std::size_t size() const { return buf_.size(); }
  const Bytes& data() const { return buf_; }
  Bytes take() { return std::move(buf_); }

 private:
  void put_le(uint64_t v, int n) {
    for (int i = 0; i < n; ++i) buf_.push_back(std::byte(static_cast<uint8_t>(v >> (8 * i))));
  }

  Bytes buf_;
};

/// Little-endian decoder over a borrowed buffer. Running off the end throws
/// Truncated.
class ByteReader {
 public:
  explicit ByteReader(std::span<const std::byte> data) : data_(data) {}

  uint8_t u8() { return static_cast<uint8_t>(get_le(1)); }
  uint16_t u16() { return static_cast<uint16_t>(get_le(2)); }
  uint32_t u32() { return static_cast<uint32_t>(get_le(4)); }
  uint64_t u64() { return get_le(8); }
  int32_t i32() { return static_cast<int32_t>(u32()); }

  std::span<const std::byte> bytes(std::size_t n) {
    need(n);
    auto out = data_.subspan(pos_, n);
    pos_ += n;
    return out;
  }
  std::string str() {
    const uint32_t n = u32();
    return to_string(bytes(n));
  }
  /// Reads `width` bytes and strips trailing zero padding.
  std::string fixed_str(std::size_t width) {
    auto b = bytes(width);
    std::size_t n = 0;
    while (n < width && b[n] != std::byte{0}) ++n;
    return to_string(b.first(n));
  }

  std::size_t position() const { return pos_; }
  std::size_t remaining() const { return data_.size() - pos_; }
  bool done() const { return pos_ == data_.size(); }

 private:
  void need(std::size_t n) const {
    if (data_.size() - pos_ < n) {
      throw Truncated("need " + std::to_string(n) + " bytes at offset " + std::to_string(pos_) +
                      ", have " + std::to_string(data_.size() - pos_));
    }
  }
  uint64_t get_le(int n) {
    need(static_cast<std::size_t>(n));
    uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= uint64_t(std::to_integer<uint8_t>(data_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }

  std::span<const std::byte> data_;
  std::size_t pos_ = 0;
};

}  // namespace splitckpt
