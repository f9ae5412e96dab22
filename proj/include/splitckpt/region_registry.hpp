#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <type_traits>
#include <vector>

#include "splitckpt/errors.hpp"
#include "splitckpt/guarded.hpp"

namespace splitckpt {

inline constexpr uint64_t kPageSize = 4096;
inline constexpr std::size_t kMaxLabelBytes = 64;

/// Which side of the split a region or descriptor belongs to.
enum class Half : uint8_t { Upper = 0, Lower = 1 };
const char* to_string(Half h);

struct ArenaConfig {
  uint64_t lower_base = uint64_t{1} << 40;
  uint64_t lower_size = uint64_t{1} << 30;
  /// Lowest address reserve_any will hand out for Upper regions.
  uint64_t search_floor = 0x10000;
};

struct MemoryRegion {
  uint64_t start = 0;
  uint64_t length = 0;
  Half tag = Half::Upper;
  std::string label;
  /// Exactly `length` bytes for Upper regions; empty for Lower ones.
  std::vector<std::byte> payload;

  uint64_t end() const { return start + length; }
  bool operator==(const MemoryRegion&) const = default;
};

/// Simulated address space: an annotated, overlap-free table of tagged
/// regions. Lower regions live inside a reserved arena; Upper regions never
/// do. Every mutation is validated before commit and leaves the table
/// untouched on error (the MAP_FIXED_NOREPLACE contract).
class AddressSpace {
 public:
  explicit AddressSpace(ArenaConfig arena = {});

  const MemoryRegion& reserve_fixed(uint64_t start, uint64_t length, Half tag,
                                    std::string_view label);
  const MemoryRegion& reserve_any(uint64_t length, Half tag, std::string_view label);
  void release(uint64_t start);

  /// Upper regions with payloads, sorted by start.
  std::vector<MemoryRegion> snapshot_upper() const;

  const std::map<uint64_t, MemoryRegion>& regions() const { return regions_; }
  const MemoryRegion* find(uint64_t start) const;
  const MemoryRegion* find_label(std::string_view label) const;
  std::span<std::byte> payload(uint64_t start);

  /// Regions of `tag` overlapping [start, start+length).
  std::vector<RegionSpan> conflicts(uint64_t start, uint64_t length) const;

  uint64_t upper_bytes() const;
  std::size_t size() const { return regions_.size(); }
  const ArenaConfig& arena() const { return arena_; }
  uint64_t lower_end() const { return arena_.lower_base + arena_.lower_size; }

  /// One `START LENGTH TAG LABEL` line per region (hex), sorted by start.
  std::string dump() const;

 private:
  void check_request(uint64_t start, uint64_t length, Half tag, std::string_view label) const;
  const MemoryRegion& insert(uint64_t start, uint64_t length, Half tag, std::string_view label);
  bool first_fit(uint64_t lo, uint64_t hi, uint64_t length, uint64_t& out) const;

  ArenaConfig arena_;
  std::map<uint64_t, MemoryRegion> regions_;
  ChangesPending changes_;
};

/// View an Upper payload as an array of trivially copyable T.
template <class T>
std::span<T> as_span(std::span<std::byte> bytes) {
  static_assert(std::is_trivially_copyable_v<T>);
  return {reinterpret_cast<T*>(bytes.data()), bytes.size() / sizeof(T)};
}

inline uint64_t round_up_to_page(uint64_t n) { return (n + kPageSize - 1) / kPageSize * kPageSize; }

}  // namespace splitckpt
