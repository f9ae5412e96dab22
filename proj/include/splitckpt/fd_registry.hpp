#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "splitckpt/region_registry.hpp"

namespace splitckpt {

struct FdBand {
  int lo = 900;
  int hi = 1000;  // exclusive
  bool contains(int fd) const { return fd >= lo && fd < hi; }
};

struct FdEntry {
  int fd = -1;
  Half half = Half::Upper;
  std::string description;
  bool operator==(const FdEntry&) const = default;
};

/// Per-half descriptor bookkeeping. The lower half only ever receives
/// numbers from the reserved band; the upper half never does, so a fresh
/// lower half cannot take a number the restored upper half expects.
class FdRegistry {
 public:
  static constexpr int kMaxFd = 1 << 20;
  static constexpr std::size_t kMaxDescriptionBytes = 128;

  explicit FdRegistry(FdBand band = {});

  int allocate(Half half, std::string description);
  /// Claim a specific number (restart path). Throws FdConflict if taken or
  /// if the number is on the wrong side of the band.
  void reserve(int fd, Half half, std::string description);
  void release(int fd);

  std::vector<FdEntry> entries() const;
  std::set<int> fds(Half half) const;
  const FdBand& band() const { return band_; }

 private:
  FdBand band_;
  std::map<int, FdEntry> entries_;
  ChangesPending changes_;
};

}  // namespace splitckpt
