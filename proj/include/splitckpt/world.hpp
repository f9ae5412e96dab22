#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "splitckpt/net.hpp"
#include "splitckpt/session.hpp"

namespace splitckpt {

/// Every rank of a world as a thread of the calling process. Used by tests
/// and the acceptance suite; the launcher runs the same code in separate
/// processes.
struct WorldOptions {
  uint32_t world_size = 1;
  std::string app;
  std::vector<std::string> args;
  Endpoint coordinator;
  /// Per-rank override, e.g. a proxy in front of one rank's control link.
  std::map<uint32_t, Endpoint> coordinator_for;
  std::string node = "localhost";
  std::chrono::milliseconds connect_timeout{10000};
  std::chrono::milliseconds register_timeout{60000};
  std::chrono::milliseconds peer_timeout{30000};
  /// Runs on the rank's thread once the session is up (after the restart
  /// barrier for restarted ranks) and before the first step.
  std::function<void(RankSession&)> on_session;
  /// Runs on the rank's thread after the app finished and finalized.
  std::function<void(RankSession&)> on_exit;
};

struct RankOutcome {
  uint32_t rank = 0;
  bool ok = false;
  std::string output;
  std::string error;
  bool restarted = false;
  uint64_t polls = 0;
  std::vector<CheckpointNote> checkpoints;
};

struct WorldOutcome {
  std::vector<RankOutcome> ranks;

  bool ok() const;
  /// Non-empty rank outputs in rank order, newline separated.
  std::string output() const;
  std::string errors() const;
};

WorldOutcome run_world(const WorldOptions& opts);
/// opts.world_size is taken from the manifest.
WorldOutcome restart_world(const std::filesystem::path& manifest, WorldOptions opts);

}  // namespace splitckpt
