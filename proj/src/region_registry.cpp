#include "splitckpt/region_registry.hpp"

#include <fmt/format.h>

#include <algorithm>

namespace splitckpt {

namespace {

using u128 = unsigned __int128;

constexpr u128 kAddressLimit = u128{1} << 64;

RegionSpan span_of(const MemoryRegion& r) { return {r.start, r.length, r.label}; }

std::string describe(uint64_t start, uint64_t length) {
  return fmt::format("[{:#x}, {:#x})", start, static_cast<uint64_t>(start + length));
}

}  // namespace

const char* to_string(Half h) { return h == Half::Upper ? "upper" : "lower"; }

AddressSpace::AddressSpace(ArenaConfig arena) : arena_(arena) {
  if (arena_.lower_base % kPageSize != 0 || arena_.lower_size % kPageSize != 0 ||
      arena_.lower_size == 0 || u128{arena_.lower_base} + arena_.lower_size > kAddressLimit) {
    throw AlignmentError("lower arena must be page aligned and non-empty");
  }
}

void AddressSpace::check_request(uint64_t start, uint64_t length, Half tag,
                                 std::string_view label) const {
  if (length == 0 || start % kPageSize != 0 || length % kPageSize != 0) {
    throw AlignmentError(fmt::format("region {:#x}+{:#x} is not page aligned", start, length));
  }
  if (u128{start} + length > kAddressLimit) {
    throw AlignmentError(fmt::format("region {:#x}+{:#x} wraps the address space", start, length));
  }
  if (label.size() > kMaxLabelBytes || label.find('\0') != std::string_view::npos) {
    throw RegionError(fmt::format("bad region label '{}' (max {} bytes, no NUL)", label,
                                  kMaxLabelBytes));
  }
  const u128 end = u128{start} + length;
  const bool inside = start >= arena_.lower_base && end <= lower_end();
  const bool disjoint = end <= arena_.lower_base || start >= lower_end();
  if (tag == Half::Lower && !inside) {
    throw ArenaViolation(fmt::format("lower region '{}' {} outside lower arena {}", label,
                                     describe(start, length),
                                     describe(arena_.lower_base, arena_.lower_size)));
  }
  if (tag == Half::Upper && !disjoint) {
    throw ArenaViolation(fmt::format("upper region '{}' {} intersects lower arena {}", label,
                                     describe(start, length),
                                     describe(arena_.lower_base, arena_.lower_size)));
  }
}

std::vector<RegionSpan> AddressSpace::conflicts(uint64_t start, uint64_t length) const {
  std::vector<RegionSpan> out;
  const u128 end = u128{start} + length;
  auto it = regions_.upper_bound(start);
  if (it != regions_.begin()) {
    auto prev = std::prev(it);
    if (u128{prev->second.start} + prev->second.length > start) out.push_back(span_of(prev->second));
  }
  for (; it != regions_.end() && it->first < end; ++it) out.push_back(span_of(it->second));
  return out;
}

const MemoryRegion& AddressSpace::insert(uint64_t start, uint64_t length, Half tag,
                                         std::string_view label) {
  MemoryRegion r;
  r.start = start;
  r.length = length;
  r.tag = tag;
  r.label = std::string(label);
  if (tag == Half::Upper) r.payload.assign(length, std::byte{0});
  return regions_.emplace(start, std::move(r)).first->second;
}

const MemoryRegion& AddressSpace::reserve_fixed(uint64_t start, uint64_t length, Half tag,
                                                std::string_view label) {
  auto pending = changes_.begin("AddressSpace::reserve_fixed");
  check_request(start, length, tag, label);
  auto hits = conflicts(start, length);
  if (!hits.empty()) {
    std::string names;
    for (const auto& h : hits) {
      names += fmt::format(" '{}'{}", h.label, describe(h.start, h.length));
    }
    throw OverlapError(fmt::format("region '{}' {} overlaps{}", label, describe(start, length), names),
                       std::move(hits));
  }
  return insert(start, length, tag, label);
}

bool AddressSpace::first_fit(uint64_t lo, uint64_t hi_exclusive_minus_one, uint64_t length,
                             uint64_t& out) const {
  // hi is passed as last address (inclusive) so the full 2^64 range fits.
  const u128 hi = u128{hi_exclusive_minus_one} + 1;
  u128 cand = lo;
  auto it = regions_.upper_bound(lo);
  if (it != regions_.begin()) {
    auto prev = std::prev(it);
    cand = std::max<u128>(cand, u128{prev->second.start} + prev->second.length);
  }
  for (; it != regions_.end() && it->first < cand + length; ++it) {
    cand = std::max<u128>(cand, u128{it->second.start} + it->second.length);
  }
  if (cand + length > hi) return false;
  out = static_cast<uint64_t>(cand);
  return true;
}

const MemoryRegion& AddressSpace::reserve_any(uint64_t length, Half tag, std::string_view label) {
  auto pending = changes_.begin("AddressSpace::reserve_any");
  if (length == 0 || length % kPageSize != 0) {
    throw AlignmentError(fmt::format("length {:#x} is not a positive page multiple", length));
  }
  uint64_t at = 0;
  bool found = false;
  if (tag == Half::Lower) {
    found = first_fit(arena_.lower_base, lower_end() - 1, length, at);
  } else {
    const uint64_t floor = round_up_to_page(arena_.search_floor);
    if (floor < arena_.lower_base) found = first_fit(floor, arena_.lower_base - 1, length, at);
    if (!found && lower_end() != 0) {
      found = first_fit(std::max(floor, lower_end()), ~uint64_t{0}, length, at);
    }
  }
  if (!found) {
    throw ArenaExhausted(fmt::format("no {} gap of {:#x} bytes for '{}'", to_string(tag), length,
                                     label));
  }
  check_request(at, length, tag, label);
  return insert(at, length, tag, label);
}

void AddressSpace::release(uint64_t start) {
  auto pending = changes_.begin("AddressSpace::release");
  auto it = regions_.find(start);
  if (it == regions_.end()) throw UnknownRegion(fmt::format("no region starts at {:#x}", start));
  regions_.erase(it);
}

std::vector<MemoryRegion> AddressSpace::snapshot_upper() const {
  std::vector<MemoryRegion> out;
  for (const auto& [start, r] : regions_) {
    if (r.tag == Half::Upper) out.push_back(r);
  }
  return out;
}

const MemoryRegion* AddressSpace::find(uint64_t start) const {
  auto it = regions_.find(start);
  return it == regions_.end() ? nullptr : &it->second;
}

const MemoryRegion* AddressSpace::find_label(std::string_view label) const {
  for (const auto& [start, r] : regions_) {
    if (r.label == label) return &r;
  }
  return nullptr;
}

std::span<std::byte> AddressSpace::payload(uint64_t start) {
  auto it = regions_.find(start);
  if (it == regions_.end()) throw UnknownRegion(fmt::format("no region starts at {:#x}", start));
  return it->second.payload;
}

uint64_t AddressSpace::upper_bytes() const {
  uint64_t total = 0;
  for (const auto& [start, r] : regions_) {
    if (r.tag == Half::Upper) total += r.length;
  }
  return total;
}

std::string AddressSpace::dump() const {
  std::string out;
  for (const auto& [start, r] : regions_) {
    out += fmt::format("{:016x} {:016x} {} {}\n", r.start, r.length, to_string(r.tag), r.label);
  }
  return out;
}

}  // namespace splitckpt
