#include "splitckpt/world.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <thread>

#include "splitckpt/apps.hpp"
#include "splitckpt/manifest.hpp"

namespace splitckpt {

namespace {

SessionOptions session_options(const WorldOptions& o, uint32_t rank) {
  SessionOptions s;
  s.world_size = o.world_size;
  s.rank = rank;
  auto it = o.coordinator_for.find(rank);
  s.coordinator = it == o.coordinator_for.end() ? o.coordinator : it->second;
  s.node = o.node;
  s.connect_timeout = o.connect_timeout;
  s.register_timeout = o.register_timeout;
  s.peer_timeout = o.peer_timeout;
  return s;
}

template <class Make>
WorldOutcome run_ranks(const WorldOptions& opts, Make make) {
  WorldOutcome out;
  out.ranks.resize(opts.world_size);
  std::vector<std::thread> threads;
  threads.reserve(opts.world_size);
  for (uint32_t r = 0; r < opts.world_size; ++r) {
    threads.emplace_back([&, r] {
      RankOutcome& res = out.ranks[r];
      res.rank = r;
      try {
        std::unique_ptr<RankSession> s = make(session_options(opts, r));
        res.restarted = s->restarted();
        if (opts.on_session) opts.on_session(*s);
        res.output = run_app(*s);
        res.polls = s->poll_count();
        res.checkpoints = s->checkpoints();
        if (opts.on_exit) opts.on_exit(*s);
        res.ok = true;
      } catch (const std::exception& e) {
        res.error = e.what();
      }
    });
  }
  for (auto& t : threads) t.join();
  return out;
}

}  // namespace

bool WorldOutcome::ok() const {
  return !ranks.empty() && std::all_of(ranks.begin(), ranks.end(), [](const RankOutcome& r) { return r.ok; });
}

std::string WorldOutcome::output() const {
  std::string s;
  for (const auto& r : ranks) {
    if (r.output.empty()) continue;
    if (!s.empty()) s += '\n';
    s += r.output;
  }
  return s;
}

std::string WorldOutcome::errors() const {
  std::string s;
  for (const auto& r : ranks) {
    if (!r.ok) s += fmt::format("rank {}: {}\n", r.rank, r.error);
  }
  return s;
}

WorldOutcome run_world(const WorldOptions& opts) {
  return run_ranks(opts, [&](const SessionOptions& so) { return RankSession::launch(so, opts.app, opts.args); });
}

WorldOutcome restart_world(const std::filesystem::path& manifest, WorldOptions opts) {
  opts.world_size = read_manifest(manifest).world_size;
  return run_ranks(opts, [&](const SessionOptions& so) { return RankSession::restart_from_manifest(manifest, so); });
}

}  // namespace splitckpt
