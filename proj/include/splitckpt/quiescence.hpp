#pragma once

#include <cstdint>
#include <map>
#include <set>
#include <span>
#include <vector>

#include "splitckpt/protocol.hpp"

namespace splitckpt {

/// One round's condition: total bytes (and messages) sent equal total
/// received, and no rank has an outstanding operation.
bool round_balanced(std::span<const proto::DrainReport> round);

/// True iff each of the last `window` rounds is balanced.
bool quiescence_check(std::span<const std::vector<proto::DrainReport>> rounds, std::size_t window = 2);

/// Coordinator-side aggregation: a round closes when every live rank has
/// sent a report since the previous round closed.
class QuiescenceTracker {
 public:
  explicit QuiescenceTracker(std::size_t window = 2) : window_(window) {}

  void reset(std::set<uint32_t> ranks);
  void drop_rank(uint32_t rank);

  /// Records a report. Returns true when this report closed a round and the
  /// stability window is now satisfied with every rank parked at `target`.
  bool on_report(uint32_t rank, const proto::DrainReport& report, uint64_t target);

  /// Forget the streak (the cut target moved).
  void restart_window() { streak_ = 0; }

  const std::map<uint32_t, proto::DrainReport>& latest() const { return latest_; }
  std::size_t rounds_closed() const { return rounds_; }
  std::size_t streak() const { return streak_; }

 private:
  std::size_t window_;
  std::set<uint32_t> ranks_;
  std::set<uint32_t> fresh_;
  std::map<uint32_t, proto::DrainReport> latest_;
  std::size_t streak_ = 0;
  std::size_t rounds_ = 0;
};

}  // namespace splitckpt
