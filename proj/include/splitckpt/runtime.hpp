#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <thread>
#include <vector>

#include "splitckpt/fd_registry.hpp"
#include "splitckpt/guarded.hpp"
#include "splitckpt/net.hpp"
#include "splitckpt/protocol.hpp"
#include "splitckpt/region_registry.hpp"
#include "splitckpt/runtime_types.hpp"

namespace splitckpt {

/// Collective tags are negative and therefore unreachable from the public
/// point-to-point API.
inline constexpr int32_t kBarrierTag = -1;
inline constexpr int32_t kAllreduceTag = -2;
inline constexpr int32_t kSplitTag = -3;

inline constexpr uint32_t kFrameMagic = 0x4D504D53;  // "MPMS"
inline constexpr std::size_t kFrameHeaderBytes = 24;

struct RuntimeConfig {
  uint32_t world_size = 1;
  uint32_t rank = 0;
  Endpoint coordinator;
  proto::LaunchMode mode = proto::LaunchMode::Fresh;
  uint32_t epoch = 0;  // restart: epoch of the image being restored
  uint64_t requested_uid = 0;
  std::string node;  // empty: hostname()
  std::chrono::milliseconds connect_timeout{10000};
  std::chrono::milliseconds register_timeout{120000};
  std::chrono::milliseconds peer_timeout{30000};
};

/// Coordinator instructions for the current epoch, as seen by the rank.
struct ControlView {
  uint64_t generation = 0;
  uint32_t epoch = 0;
  bool drain_requested = false;
  uint64_t target_poll = 0;
  std::string backend;
  std::optional<std::string> write_path;
  bool quiesced = false;
  bool resumed = false;
  bool aborted = false;
  std::string abort_reason;
  bool coordinator_lost = false;
  bool awaiting_restart = false;
  bool restart_released = false;
};

/// The lower half of one rank. Application calls come from one thread; a
/// progress thread owns socket reads, heartbeats and drain reports.
class Runtime {
 public:
  Runtime(GuardedCell<AddressSpace>& memory, GuardedCell<FdRegistry>& fds);
  ~Runtime();
  Runtime(const Runtime&) = delete;
  Runtime& operator=(const Runtime&) = delete;

  void mp_init(const RuntimeConfig& config);

  OpToken mp_isend(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload);
  OpToken mp_irecv(uint32_t source, CommId comm, int32_t tag);
  CompletionInfo mp_wait(OpToken token);

  void mp_send(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload);
  Bytes mp_recv(uint32_t source, CommId comm, int32_t tag);

  void mp_barrier(CommId comm);
  std::vector<double> mp_allreduce_sum_f64(CommId comm, std::span<const double> values);
  Communicator mp_comm_split(CommId parent, int32_t color, int32_t key);
  void mp_finalize();

  /// Re-executes a call log on this freshly initialized runtime. Throws
  /// ReplayMismatch on a seq gap, a foreign Init, or a differing result.
  CommTable replay_log(const std::vector<CallLogEntry>& log);

  RankIdentity identity() const;
  uint32_t rank() const { return config_.rank; }
  uint32_t world_size() const { return config_.world_size; }
  DrainLedger ledger();
  CommTable communicators();
  Communicator communicator(CommId id);
  std::vector<CallLogEntry> call_log();
  bool finalized() const { return finalized_.load(); }

  // Checkpoint-engine hooks.

  void note_poll(uint64_t poll_count);
  /// The current order if a drain is requested and `poll_count` reached the
  /// target, i.e. this rank must park now.
  std::optional<ControlView> checkpoint_due(uint64_t poll_count);
  ControlView control();
  ControlView wait_control(uint64_t seen_generation, std::chrono::milliseconds timeout);

  /// Freeze send initiation and mark this rank as parked at the cut.
  void enter_drain(uint32_t epoch);
  /// Unfreeze and hand deferred sends to the transport.
  void leave_drain();

  /// Inbox content (dest == self) then deferred sends (source == self).
  std::vector<PendingMessage> pending_messages();
  /// Restart: inbox entries go in front of anything already queued,
  /// outbound entries are sent by the next leave_drain().
  void restore_pending(const std::vector<PendingMessage>& pending);

  void report_write_done(uint64_t bytes, uint64_t ms);
  void report_write_failed(const proto::WriteFailed& failure);
  void report_restart_done(uint32_t epoch);

 private:
  struct ChannelKey {
    uint32_t source = 0;
    CommId comm = kWorldComm;
    int32_t tag = 0;
    auto operator<=>(const ChannelKey&) const = default;
  };
  struct TokenState {
    bool is_send = false;
    bool complete = false;
    /// Receives from another rank; a wait fails once that peer hung up.
    std::optional<uint32_t> peer;
    CompletionInfo info;
  };
  struct Deferred {
    OpToken token = 0;  // 0: restored from an image, nobody waits on it
    PendingMessage msg;
  };
  struct Core {
    CommTable comms;
    CommId next_comm = 1;
    std::vector<CallLogEntry> log;
    uint64_t next_seq = 1;
    DrainLedger ledger;
    std::map<ChannelKey, std::deque<Bytes>> inbox;
    uint64_t inbox_bytes = 0;
    std::map<ChannelKey, std::deque<OpToken>> posted;
    std::map<OpToken, TokenState> tokens;
    OpToken next_token = 1;
    bool frozen = false;
    std::vector<Deferred> deferred;
    bool at_cut = false;
    uint64_t poll_count = 0;
    ControlView control;
    bool report_now = false;
    std::optional<std::string> fatal;
    bool finalizing = false;
  };
  struct Peer {
    Socket sock;
    int vfd = -1;
    std::mutex write_mu;
    Bytes rbuf;
    std::size_t rhead = 0;
    std::atomic<bool> eof{false};
  };

  void check_user_tag(int32_t tag) const;
  void check_member(Core& c, CommId comm, uint32_t peer) const;
  OpToken isend_internal(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload);
  OpToken irecv_internal(uint32_t source, CommId comm, int32_t tag);
  void deliver_locked(Core& c, uint32_t source, CommId comm, int32_t tag, Bytes payload);
  void write_frame(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload);
  void append_log(Core& c, Opcode op, std::array<uint64_t, 4> args, uint64_t result);

  void send_coordinator(const proto::Message& m);
  void handle_coordinator(const proto::Message& m);
  void progress_loop();
  bool pump_peer(uint32_t r);
  void send_drain_report();
  void adjust_inbox_chunks();
  void wake_progress();
  void notify_all();
  uint64_t generation();
  void wait_for_change(uint64_t seen, std::chrono::milliseconds timeout);
  void stop_progress();
  void teardown();

  GuardedCell<AddressSpace>& memory_;
  GuardedCell<FdRegistry>& fds_;
  RuntimeConfig config_;
  std::string node_;
  uint64_t uid_ = 0;
  uint32_t keepalive_ms_ = 0;
  uint32_t misses_ = 0;
  uint32_t drain_tick_ms_ = 50;

  GuardedCell<Core> core_;

  Socket coord_;
  int coord_vfd_ = -1;
  std::mutex coord_write_mu_;
  proto::FrameBuffer coord_frames_;
  Socket listener_;
  int listen_vfd_ = -1;
  std::vector<std::unique_ptr<Peer>> peers_;
  std::vector<uint64_t> lower_regions_;
  std::vector<uint64_t> inbox_chunks_;

  int wake_fd_ = -1;
  std::thread progress_;
  std::atomic<bool> stop_{false};
  std::atomic<bool> initialized_{false};
  std::atomic<bool> finalized_{false};

  std::mutex notify_mu_;
  std::condition_variable notify_cv_;
  uint64_t notify_gen_ = 0;
};

}  // namespace splitckpt
