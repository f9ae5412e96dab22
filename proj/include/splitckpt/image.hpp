#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "splitckpt/bytes.hpp"
#include "splitckpt/region_registry.hpp"
#include "splitckpt/runtime_types.hpp"

namespace splitckpt {

inline constexpr uint32_t kImageVersion = 1;
inline constexpr std::size_t kImageHeaderBytes = 64;
inline constexpr std::size_t kRegionEntryBytes = 8 + 8 + 1 + kMaxLabelBytes + 8;  // 89
inline constexpr std::size_t kCallLogEntryBytes = 8 + 1 + 4 * 8 + 8;              // 49
inline constexpr std::size_t kPendingEntryHeaderBytes = 4 * 4 + 8;                // 24
inline constexpr std::size_t kFdDescriptionBytes = 128;
inline constexpr std::size_t kFdEntryBytes = 4 + 1 + kFdDescriptionBytes;  // 133

struct ImageRegion {
  uint64_t start = 0;
  uint64_t length = 0;
  Half tag = Half::Upper;
  std::string label;
  Bytes payload;  // Upper only
  bool operator==(const ImageRegion&) const = default;
};

struct ImageFd {
  uint32_t fd = 0;
  Half half = Half::Upper;
  std::string description;
  bool operator==(const ImageFd&) const = default;
};

/// Per-rank snapshot of the upper half plus everything needed to rebuild
/// the lower half.
///
/// On-disk layout (little-endian):
///   header  "MCKP" u32 version u32 epoch u32 rank u32 world u64 uid
///           4 x u64 section body lengths, u32 CRC32 of the preceding 60 bytes
///   regions u32 count, count x {u64 start, u64 length, u8 tag, 64B label,
///           u64 payload_offset}, Upper payloads in entry order      | u32 CRC
///   calllog u32 count, count x {u64 seq, u8 opcode, 4 x u64 args, u64 result} | u32 CRC
///   pending u32 count, count x {u32 src, u32 dst, u32 comm, u32 tag,
///           u64 length, payload}                                    | u32 CRC
///   fds     u32 count, count x {u32 fd, u8 half, 128B description}  | u32 CRC
/// payload_offset is an absolute file offset; 0 for Lower regions.
struct CheckpointImage {
  uint32_t epoch = 0;
  uint32_t rank = 0;
  uint32_t world_size = 1;
  uint64_t uid = 0;
  std::vector<ImageRegion> regions;
  std::vector<CallLogEntry> call_log;
  std::vector<PendingMessage> pending;
  std::vector<ImageFd> fds;

  uint64_t upper_payload_bytes() const;
  bool operator==(const CheckpointImage&) const = default;
};

Bytes serialize_image(const CheckpointImage& img);
CheckpointImage parse_image(std::span<const std::byte> data);

/// Size serialize_image() will produce, without serializing.
uint64_t serialized_size(const CheckpointImage& img);

/// Region table in the same text form as AddressSpace::dump().
std::string dump_regions(const CheckpointImage& img);

std::string image_filename(uint32_t rank, uint32_t epoch);

/// Reads and parses an image file. Throws IoError if it cannot be read.
CheckpointImage read_image_file(const std::filesystem::path& path);

}  // namespace splitckpt
