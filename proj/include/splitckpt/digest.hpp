#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>

namespace splitckpt {

/// Lower-case hex SHA-256.
std::string sha256_hex(std::span<const std::byte> data);

/// Streaming SHA-256.
class Sha256 {
 public:
  Sha256();
  ~Sha256();
  Sha256(const Sha256&) = delete;
  Sha256& operator=(const Sha256&) = delete;

  void update(std::span<const std::byte> data);
  std::string hex_digest();

 private:
  void* ctx_;
};

uint32_t crc32(std::span<const std::byte> data);

/// 64-bit FNV-1a, used for compact payload fingerprints in app logs.
uint64_t fnv1a64(std::span<const std::byte> data);

}  // namespace splitckpt
