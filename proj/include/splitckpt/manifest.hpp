#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>

namespace splitckpt {

/// One file naming every rank's image, so restart tooling passes a single
/// path instead of world_size paths on a command line.
///
///   MANIFEST v1 epoch=<E> world=<N>
///   rank <r> <absolute path>
struct Manifest {
  uint32_t epoch = 0;
  uint32_t world_size = 0;
  std::map<uint32_t, std::filesystem::path> entries;

  bool operator==(const Manifest&) const = default;
};

std::string format_manifest(const Manifest& m);
Manifest parse_manifest(std::string_view text);
Manifest read_manifest(const std::filesystem::path& path);
/// Atomic (tmp + rename).
void write_manifest(const std::filesystem::path& path, const Manifest& m);

std::string manifest_filename(uint32_t epoch);

}  // namespace splitckpt
