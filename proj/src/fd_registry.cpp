#include "splitckpt/fd_registry.hpp"

#include <fmt/format.h>

namespace splitckpt {

FdRegistry::FdRegistry(FdBand band) : band_(band) {
  if (band_.lo < 0 || band_.hi <= band_.lo || band_.hi > kMaxFd) {
    throw std::invalid_argument("bad fd band");
  }
}

int FdRegistry::allocate(Half half, std::string description) {
  auto pending = changes_.begin("FdRegistry::allocate");
  const int lo = half == Half::Lower ? band_.lo : 0;
  const int hi = half == Half::Lower ? band_.hi : kMaxFd;
  for (int fd = lo; fd < hi; ++fd) {
    if (half == Half::Upper && band_.contains(fd)) {
      fd = band_.hi - 1;
      continue;
    }
    if (!entries_.contains(fd)) {
      if (description.size() > kMaxDescriptionBytes) description.resize(kMaxDescriptionBytes);
      entries_.emplace(fd, FdEntry{fd, half, std::move(description)});
      return fd;
    }
  }
  throw BandExhausted(fmt::format("no free {} fd in [{}, {})", to_string(half), lo, hi));
}

void FdRegistry::reserve(int fd, Half half, std::string description) {
  auto pending = changes_.begin("FdRegistry::reserve");
  if (fd < 0 || fd >= kMaxFd) throw FdConflict(fmt::format("fd {} out of range", fd));
  if ((half == Half::Lower) != band_.contains(fd)) {
    throw FdConflict(fmt::format("{} fd {} on the wrong side of band [{}, {})", to_string(half),
                                 fd, band_.lo, band_.hi));
  }
  if (auto it = entries_.find(fd); it != entries_.end()) {
    throw FdConflict(fmt::format("fd {} already held by {} half ({})", fd,
                                 to_string(it->second.half), it->second.description));
  }
  if (description.size() > kMaxDescriptionBytes) description.resize(kMaxDescriptionBytes);
  entries_.emplace(fd, FdEntry{fd, half, std::move(description)});
}

void FdRegistry::release(int fd) {
  auto pending = changes_.begin("FdRegistry::release");
  if (entries_.erase(fd) == 0) throw FdConflict(fmt::format("fd {} is not registered", fd));
}

std::vector<FdEntry> FdRegistry::entries() const {
  std::vector<FdEntry> out;
  out.reserve(entries_.size());
  for (const auto& [fd, e] : entries_) out.push_back(e);
  return out;
}

std::set<int> FdRegistry::fds(Half half) const {
  std::set<int> out;
  for (const auto& [fd, e] : entries_) {
    if (e.half == half) out.insert(fd);
  }
  return out;
}

}  // namespace splitckpt
