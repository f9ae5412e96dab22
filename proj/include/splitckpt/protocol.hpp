#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "splitckpt/bytes.hpp"
#include "splitckpt/net.hpp"

namespace splitckpt::proto {

/// Coordinator control-plane frame: u32 length (of type + payload), u16
/// message type, then little-endian fields in declaration order. Strings
/// are u32 length + UTF-8 bytes unless noted.
enum class MsgType : uint16_t {
  Register = 1,
  Heartbeat = 2,
  HeartbeatAck = 3,
  CkptRequest = 4,
  DrainReport = 5,
  QuiesceOk = 6,
  WriteImage = 7,
  Done = 8,
  CkptAbort = 9,
  RestartDone = 10,
  Deregister = 11,
  RegisterAck = 12,
  RegisterReject = 13,
  Resume = 14,
  Advance = 15,
  WriteFailed = 16,
  Trigger = 17,
  TriggerResult = 18,
};

enum class LaunchMode : uint8_t { Fresh = 0, Restart = 1 };

struct Register {
  uint32_t rank = 0;
  uint32_t world = 0;
  uint32_t epoch = 0;
  LaunchMode mode = LaunchMode::Fresh;
  uint64_t requested_uid = 0;
  uint32_t pid = 0;
  uint16_t listen_port = 0;
  std::string node;
  bool operator==(const Register&) const = default;
};
struct Heartbeat {
  uint64_t seq = 0;
  bool operator==(const Heartbeat&) const = default;
};
struct HeartbeatAck {
  uint64_t seq = 0;
  bool operator==(const HeartbeatAck&) const = default;
};
struct CkptRequest {
  uint32_t epoch = 0;
  uint64_t min_poll = 0;
  std::string backend;
  bool operator==(const CkptRequest&) const = default;
};
struct DrainReport {
  uint32_t epoch = 0;
  uint64_t bytes_sent = 0;
  uint64_t bytes_received = 0;
  uint32_t pending_ops = 0;
  uint64_t poll_count = 0;
  uint8_t at_cut = 0;
  uint64_t messages_sent = 0;
  uint64_t messages_received = 0;
  bool operator==(const DrainReport&) const = default;
};
struct QuiesceOk {
  uint32_t epoch = 0;
  bool operator==(const QuiesceOk&) const = default;
};
/// Payload is exactly the UTF-8 image path, no length prefix.
struct WriteImage {
  std::string path;
  bool operator==(const WriteImage&) const = default;
};
struct Done {
  uint64_t bytes = 0;
  uint64_t ms = 0;
  bool operator==(const Done&) const = default;
};
struct CkptAbort {
  uint32_t epoch = 0;
  std::string reason;
  bool operator==(const CkptAbort&) const = default;
};
struct RestartDone {
  uint32_t epoch = 0;
  bool operator==(const RestartDone&) const = default;
};
struct Deregister {
  bool operator==(const Deregister&) const = default;
};
struct PeerAddress {
  std::string host;
  uint16_t port = 0;
  bool operator==(const PeerAddress&) const = default;
};
struct RegisterAck {
  uint64_t uid = 0;
  uint32_t keepalive_ms = 0;
  uint32_t misses = 0;
  uint32_t drain_tick_ms = 0;
  std::vector<PeerAddress> peers;  // u32 count, then {host, u16 port}
  bool operator==(const RegisterAck&) const = default;
};
struct RegisterReject {
  std::string reason;
  bool operator==(const RegisterReject&) const = default;
};
struct Resume {
  uint32_t epoch = 0;
  bool operator==(const Resume&) const = default;
};
struct Advance {
  uint32_t epoch = 0;
  uint64_t target_poll = 0;
  bool operator==(const Advance&) const = default;
};
enum class WriteFailure : uint8_t { InsufficientSpace = 1, Io = 2, Other = 3 };
struct WriteFailed {
  uint32_t epoch = 0;
  WriteFailure kind = WriteFailure::Other;
  uint64_t required = 0;
  uint64_t available = 0;
  std::string message;
  bool operator==(const WriteFailed&) const = default;
};
struct Trigger {
  std::string backend;
  std::string out_dir;
  uint64_t min_poll = 0;
  bool operator==(const Trigger&) const = default;
};
struct TriggerResult {
  uint8_t ok = 0;
  std::string text;  // manifest path or error message
  bool operator==(const TriggerResult&) const = default;
};

using Message = std::variant<Register, Heartbeat, HeartbeatAck, CkptRequest, DrainReport,
                             QuiesceOk, WriteImage, Done, CkptAbort, RestartDone, Deregister,
                             RegisterAck, RegisterReject, Resume, Advance, WriteFailed, Trigger,
                             TriggerResult>;

MsgType type_of(const Message& m);
const char* to_string(MsgType t);

/// Full frame including the length prefix.
Bytes encode(const Message& m);
/// Decode type + payload (the bytes after the length prefix).
Message decode(std::span<const std::byte> body);

/// Incremental splitter for a byte stream of frames.
class FrameBuffer {
 public:
  Bytes& sink() { return buf_; }
  /// Pops the next complete frame, if any.
  std::optional<Message> next();

 private:
  Bytes buf_;
  std::size_t head_ = 0;
};

/// Blocking helpers for simple clients.
void send_message(int fd, const Message& m);
std::optional<Message> recv_message(int fd, std::chrono::milliseconds timeout);

}  // namespace splitckpt::proto
