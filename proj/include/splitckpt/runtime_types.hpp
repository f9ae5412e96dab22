#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "splitckpt/bytes.hpp"

namespace splitckpt {

/// (rank number, node name, unique process id): the tuple every log line
/// about a rank carries.
struct RankIdentity {
  uint32_t rank = 0;
  std::string node;
  uint64_t uid = 0;
  bool operator==(const RankIdentity&) const = default;
};

using CommId = uint32_t;
inline constexpr CommId kWorldComm = 0;

struct Communicator {
  CommId id = kWorldComm;
  std::vector<uint32_t> members;  // sorted ranks
  std::optional<CommId> parent;
  int32_t color = 0;
  int32_t key = 0;

  bool contains(uint32_t rank) const;
  /// Position of `rank` in members; throws InvalidRank if absent.
  std::size_t index_of(uint32_t rank) const;
  bool operator==(const Communicator&) const = default;
};

using CommTable = std::map<CommId, Communicator>;

enum class Opcode : uint8_t { Init = 0, CommSplit = 1, Finalize = 2 };
const char* to_string(Opcode op);

/// One state-mutating runtime call. Args for Init: (world, rank); for
/// CommSplit: (parent, color, key) with signed values sign-extended.
struct CallLogEntry {
  uint64_t seq = 0;
  Opcode opcode = Opcode::Init;
  std::array<uint64_t, 4> args{};
  uint64_t result = 0;
  bool operator==(const CallLogEntry&) const = default;
};

/// Byte counters are payload-only. Message counts ride along so a
/// zero-length message in flight is not mistaken for quiescence.
struct DrainLedger {
  uint64_t bytes_sent = 0;
  uint64_t bytes_received = 0;
  uint32_t pending_ops = 0;
  uint64_t messages_sent = 0;
  uint64_t messages_received = 0;
  bool operator==(const DrainLedger&) const = default;
};

/// A message that was taken off the wire but not consumed by the
/// application when the checkpoint was cut (dest == self), or an outbound
/// send that was frozen by the drain (source == self).
struct PendingMessage {
  uint32_t source = 0;
  uint32_t dest = 0;
  CommId comm = kWorldComm;
  int32_t tag = 0;
  Bytes payload;
  bool operator==(const PendingMessage&) const = default;
};

struct CompletionInfo {
  uint32_t source = 0;
  int32_t tag = 0;
  Bytes payload;
};

using OpToken = uint64_t;

inline uint64_t encode_signed(int64_t v) { return static_cast<uint64_t>(v); }
inline int32_t decode_signed32(uint64_t v) { return static_cast<int32_t>(static_cast<int64_t>(v)); }

}  // namespace splitckpt
