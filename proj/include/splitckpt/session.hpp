#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "splitckpt/fd_registry.hpp"
#include "splitckpt/guarded.hpp"
#include "splitckpt/image.hpp"
#include "splitckpt/net.hpp"
#include "splitckpt/region_registry.hpp"
#include "splitckpt/runtime.hpp"

namespace splitckpt {

struct SessionOptions {
  uint32_t world_size = 1;
  uint32_t rank = 0;
  Endpoint coordinator;
  uint64_t requested_uid = 0;
  std::string node;
  std::chrono::milliseconds connect_timeout{10000};
  std::chrono::milliseconds register_timeout{120000};
  std::chrono::milliseconds peer_timeout{30000};
};

/// Result of the last checkpoint this rank took part in.
struct CheckpointNote {
  uint32_t epoch = 0;
  uint64_t poll = 0;
  bool written = false;
  bool completed = false;  // RESUME received
  std::string outcome;     // "resumed", "aborted: ...", "coordinator lost", "advanced"
};

/// One rank: its simulated address space and descriptor table (both halves)
/// and the runtime living in the lower half. Applications keep every bit of
/// state they need across a restart in Upper regions.
class RankSession {
 public:
  static constexpr const char* kMetaLabel = "session.meta";

  /// Fresh start: stdio fds, app identity region, mp_init.
  static std::unique_ptr<RankSession> launch(const SessionOptions& opts, const std::string& app,
                                             const std::vector<std::string>& args);

  /// Restart one rank from its image: re-reserve Upper fds, mp_init in
  /// restart mode, replay the call log, restore Upper regions at their
  /// original addresses, queue pending messages, then wait at the
  /// coordinator's restart barrier.
  static std::unique_ptr<RankSession> restart_rank(const std::filesystem::path& image,
                                                   const SessionOptions& opts);
  /// Picks this rank's entry (opts.rank) from a manifest.
  static std::unique_ptr<RankSession> restart_from_manifest(const std::filesystem::path& manifest,
                                                            SessionOptions opts);

  ~RankSession();

  Runtime& rt() { return *rt_; }
  GuardedCell<AddressSpace>& memory() { return memory_; }
  GuardedCell<FdRegistry>& fds() { return fds_; }

  uint32_t rank() const { return rank_; }
  uint32_t world_size() const { return world_; }
  const std::string& app_name() const { return app_; }
  const std::vector<std::string>& args() const { return args_; }
  bool restarted() const { return restarted_; }
  std::optional<uint32_t> restored_epoch() const { return restored_epoch_; }
  uint64_t poll_count() const { return poll_; }
  const std::vector<CheckpointNote>& checkpoints() const { return notes_; }

  /// Cooperative checkpoint point, called between application steps. Parks
  /// here when the coordinator's cut is at this poll; returns once the
  /// epoch resumed or was abandoned.
  void ckpt_poll();

  /// Allocate a zeroed Upper region; returns its start.
  uint64_t alloc_upper(uint64_t bytes, const std::string& label);
  /// Payload of an Upper region by label. The span stays valid until the
  /// region is released.
  std::span<std::byte> upper(const std::string& label);
  std::optional<uint64_t> find_upper(const std::string& label);
  void release_upper(const std::string& label);

  CheckpointImage capture_image(uint32_t epoch);

  void finalize();

 private:
  explicit RankSession(const SessionOptions& opts);
  void write_meta_poll();
  void load_meta();
  void park(const ControlView& order);
  void write_image(const ControlView& order, const std::string& path);

  SessionOptions opts_;
  uint32_t rank_ = 0;
  uint32_t world_ = 1;
  GuardedCell<AddressSpace> memory_;
  GuardedCell<FdRegistry> fds_;
  std::unique_ptr<Runtime> rt_;
  std::string app_;
  std::vector<std::string> args_;
  uint64_t poll_ = 0;
  std::span<std::byte> meta_;
  bool restarted_ = false;
  std::optional<uint32_t> restored_epoch_;
  std::vector<CheckpointNote> notes_;
};

}  // namespace splitckpt
