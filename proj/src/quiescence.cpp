#include "splitckpt/quiescence.hpp"

namespace splitckpt {

bool round_balanced(std::span<const proto::DrainReport> round) {
  uint64_t sent = 0, recv = 0, msent = 0, mrecv = 0;
  for (const auto& r : round) {
    if (r.pending_ops != 0) return false;
    sent += r.bytes_sent;
    recv += r.bytes_received;
    msent += r.messages_sent;
    mrecv += r.messages_received;
  }
  return sent == recv && msent == mrecv;
}

bool quiescence_check(std::span<const std::vector<proto::DrainReport>> rounds, std::size_t window) {
  if (window == 0 || rounds.size() < window) return false;
  for (std::size_t i = rounds.size() - window; i < rounds.size(); ++i) {
    if (!round_balanced(rounds[i])) return false;
  }
  return true;
}

void QuiescenceTracker::reset(std::set<uint32_t> ranks) {
  ranks_ = std::move(ranks);
  fresh_.clear();
  latest_.clear();
  streak_ = 0;
  rounds_ = 0;
}

void QuiescenceTracker::drop_rank(uint32_t rank) {
  ranks_.erase(rank);
  fresh_.erase(rank);
  latest_.erase(rank);
}

bool QuiescenceTracker::on_report(uint32_t rank, const proto::DrainReport& report, uint64_t target) {
  if (!ranks_.contains(rank)) return false;
  latest_[rank] = report;
  fresh_.insert(rank);
  if (fresh_.size() < ranks_.size()) return false;

  fresh_.clear();
  ++rounds_;
  std::vector<proto::DrainReport> round;
  bool parked = true;
  for (uint32_t r : ranks_) {
    const auto& rep = latest_.at(r);
    round.push_back(rep);
    if (!rep.at_cut || rep.poll_count != target) parked = false;
  }
  streak_ = parked && round_balanced(round) ? streak_ + 1 : 0;
  return streak_ >= window_;
}

}  // namespace splitckpt
