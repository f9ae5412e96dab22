#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>

namespace splitckpt {

enum class BackendKind { DirFast, DirSlow, DirQuota };

/// A directory standing in for a storage tier: DirFast writes at full
/// speed (burst buffer), DirSlow is throttled (parallel filesystem under
/// load), DirQuota has a hard capacity.
struct StorageBackend {
  static constexpr uint64_t kDefaultSlowRate = 50ull << 20;  // bytes/s

  BackendKind kind = BackendKind::DirFast;
  std::filesystem::path root;
  uint64_t throttle_bytes_per_sec = kDefaultSlowRate;
  uint64_t capacity_bytes = 0;
  /// Number of ranks writing concurrently; a throttled link is shared.
  uint32_t writers = 1;

  /// "fast", "slow", "slow:<bytes/s>", "quota:<bytes>"; sizes accept K/M/G.
  static StorageBackend parse(std::string_view descriptor, std::filesystem::path root);
  std::string descriptor() const;

  /// Bytes already stored under root (regular files).
  uint64_t used_bytes() const;
  std::optional<uint64_t> available_bytes() const;
};

struct ImageReceipt {
  uint64_t bytes = 0;
  std::chrono::microseconds duration{0};
};

/// Preflight, then write to `path.tmp`, flush, rename to `path`. On any
/// failure the tmp file is removed and nothing appears under `path`.
/// Throws InsufficientSpace before writing a byte, or IoError.
ImageReceipt write_image_file(const StorageBackend& backend, const std::filesystem::path& path,
                              std::span<const std::byte> bytes);

/// Test hook: called with the destination path; returning a byte count makes
/// the write fail with IoError after that many bytes hit the tmp file.
using FaultInjector = std::function<std::optional<uint64_t>(const std::filesystem::path&)>;
void set_fault_injector(FaultInjector injector);

uint64_t parse_size(std::string_view text);  // "64M", "4096", "1G"

}  // namespace splitckpt
