#pragma once

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <cstdint>
#include <deque>
#include <filesystem>
#include <functional>
#include <future>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "splitckpt/guarded.hpp"
#include "splitckpt/net.hpp"
#include "splitckpt/protocol.hpp"
#include "splitckpt/quiescence.hpp"
#include "splitckpt/runtime_types.hpp"

namespace splitckpt {

struct CoordinatorConfig {
  Endpoint listen{"127.0.0.1", 0};
  uint32_t keepalive_ms = 5000;
  uint32_t misses = 3;
  uint32_t drain_tick_ms = 50;
  uint32_t ckpt_timeout_ms = 120000;
};

enum class Phase { Idle, Running, Draining, Quiesced, Writing, RestartReplay, Done };
const char* to_string(Phase p);

struct WriteReceipt {
  RankIdentity id;
  uint64_t bytes = 0;
  uint64_t ms = 0;
};

enum class CkptFailure { None, Aborted, Timeout, Busy, BadRequest };

struct CheckpointResult {
  bool ok = false;
  uint32_t epoch = 0;
  std::filesystem::path manifest;
  CkptFailure failure = CkptFailure::None;
  std::string error;
  std::vector<WriteReceipt> receipts;
  /// WRITE_IMAGE broadcast to the last DONE.
  std::chrono::microseconds write_time{0};
  /// CKPT_REQUEST to manifest.
  std::chrono::microseconds total_time{0};
  uint64_t image_bytes = 0;
  /// Every transport in-flight byte count observed at WRITE_IMAGE time is
  /// recorded by tests through the observer, not here.
};

/// Hooks run on the event-loop thread, outside the state guard.
struct CoordinatorObserver {
  std::function<void(uint32_t epoch)> before_write_image;
  std::function<void(uint32_t epoch, const std::string& reason)> on_abort;
  std::function<void(const RankIdentity& id, const std::string& reason)> on_rank_dead;
  std::function<void(uint32_t epoch)> on_restart_resume;
};

struct RankStatus {
  RankIdentity id;
  std::string phase;
  bool alive = true;
  std::optional<proto::DrainReport> report;
};

/// Central service: rank registry, heartbeats, epoch state machine, drain
/// aggregation and the restart barrier. All state changes happen on one
/// event-loop thread.
class Coordinator {
 public:
  explicit Coordinator(CoordinatorConfig config);
  ~Coordinator();
  Coordinator(const Coordinator&) = delete;
  Coordinator& operator=(const Coordinator&) = delete;

  /// Binds (BindFailure) and starts the event loop on a background thread.
  void start();
  /// Binds and runs the event loop on the calling thread until stop().
  void serve();
  void stop();
  Endpoint endpoint() const { return endpoint_; }
  const CoordinatorConfig& config() const { return config_; }

  /// Starts a checkpoint, or arms it for the next world if none is running.
  /// Ranks park at their first poll >= min_poll.
  std::future<CheckpointResult> request_checkpoint(std::string backend, std::filesystem::path out_dir,
                                                   uint64_t min_poll = 0);
  /// Blocking form; returns the manifest path or throws CkptAborted /
  /// CkptTimeout.
  std::filesystem::path trigger_checkpoint(const std::string& backend,
                                           const std::filesystem::path& out_dir);

  std::string rank_registry_dump();
  Phase phase();
  uint32_t epoch();
  std::vector<RankStatus> ranks();
  void set_observer(CoordinatorObserver observer);

  /// Waits until a complete world is registered and running.
  bool wait_running(std::chrono::milliseconds timeout);
  /// Waits until no world is registered (all ranks deregistered or dead).
  bool wait_idle(std::chrono::milliseconds timeout);

 private:
  struct Conn;
  struct RankEntry;
  struct World;
  struct Ckpt;
  struct State;
  struct Request {
    std::string backend;
    std::filesystem::path out_dir;
    uint64_t min_poll = 0;
    std::shared_ptr<std::promise<CheckpointResult>> promise;
    int control_fd = -1;
  };
  using Outbox = std::vector<std::pair<int, Bytes>>;
  using Deferred = std::vector<std::function<void()>>;

  void bind();
  void loop();
  void on_frame(int fd, const proto::Message& m, Outbox& out, Deferred& later);
  void on_disconnect(int fd, Outbox& out, Deferred& later);
  void on_register(State& s, int fd, const proto::Register& reg, Outbox& out, Deferred& later);
  void admit_world(State& s, Outbox& out, Deferred& later);
  void start_checkpoint(State& s, Request req, Outbox& out, Deferred& later);
  void on_report(State& s, uint32_t rank, const proto::DrainReport& rep, Outbox& out, Deferred& later);
  void begin_write(State& s, Outbox& out, Deferred& later);
  void maybe_finish_write(State& s, Outbox& out, Deferred& later);
  void abort_epoch(State& s, const std::string& reason, CkptFailure kind, Outbox& out, Deferred& later);
  void maybe_finish_abort(State& s, Outbox& out, Deferred& later);
  void declare_dead(State& s, uint32_t rank, const std::string& reason, Outbox& out, Deferred& later);
  void maybe_end_world(State& s, Outbox& out, Deferred& later);
  void on_timers(Outbox& out, Deferred& later);
  void drain_requests(Outbox& out, Deferred& later);
  void complete(State& s, CheckpointResult result, Deferred& later);
  void flush(Outbox& out);
  void wake();
  bool wait_until(const std::function<bool()>& pred, std::chrono::milliseconds timeout);

  CoordinatorConfig config_;
  Endpoint endpoint_;
  Socket listener_;
  int wake_fd_ = -1;
  std::thread thread_;
  std::atomic<bool> stop_{false};
  bool bound_ = false;

  std::unique_ptr<GuardedCell<State>> state_;
  std::map<int, std::unique_ptr<Conn>> conns_;

  std::mutex req_mu_;
  std::deque<Request> requests_;

  std::mutex obs_mu_;
  CoordinatorObserver observer_;

  std::mutex wait_mu_;
  std::condition_variable wait_cv_;
};

}  // namespace splitckpt
