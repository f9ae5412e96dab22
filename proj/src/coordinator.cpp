#include "splitckpt/coordinator.hpp"

#include <poll.h>
#include <sys/eventfd.h>
#include <sys/socket.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cerrno>
#include <cstring>
#include <set>

#include "splitckpt/errors.hpp"
#include "splitckpt/image.hpp"
#include "splitckpt/manifest.hpp"
#include "splitckpt/storage.hpp"

namespace splitckpt {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

const char* to_string(Phase p) {
  switch (p) {
    case Phase::Idle: return "Idle";
    case Phase::Running: return "Running";
    case Phase::Draining: return "Draining";
    case Phase::Quiesced: return "Quiesced";
    case Phase::Writing: return "Writing";
    case Phase::RestartReplay: return "RestartReplay";
    case Phase::Done: return "Done";
  }
  return "?";
}

struct Coordinator::Conn {
  Socket sock;
  proto::FrameBuffer frames;
  enum class Kind { Unknown, Rank, Control, Rejected } kind = Kind::Unknown;
  uint32_t rank = 0;
  uint64_t world_gen = 0;
};

struct Coordinator::RankEntry {
  RankIdentity id;
  uint32_t pid = 0;
  int fd = -1;
  uint16_t listen_port = 0;
  uint64_t requested_uid = 0;
  Clock::time_point last_ack;
  bool alive = true;
  bool deregistered = false;
  bool restart_done = false;
  enum class Write { None, Sent, Done, Failed } write = Write::None;
  uint64_t bytes = 0;
  uint64_t ms = 0;
  std::optional<proto::DrainReport> report;

  bool active() const { return alive && !deregistered; }
};

struct Coordinator::World {
  uint64_t gen = 0;
  uint32_t size = 0;
  proto::LaunchMode mode = proto::LaunchMode::Fresh;
  uint32_t epoch = 0;
  bool complete = false;
  std::map<uint32_t, RankEntry> ranks;
};

struct Coordinator::Ckpt {
  uint32_t epoch = 0;
  std::string backend;
  fs::path dir;
  uint64_t target = 0;
  QuiescenceTracker tracker;
  Clock::time_point started;
  Clock::time_point write_started;
  std::shared_ptr<std::promise<CheckpointResult>> promise;
  int control_fd = -1;
  bool aborting = false;
  std::string abort_reason;
  CkptFailure failure = CkptFailure::None;
  std::map<uint32_t, fs::path> paths;
};

struct Coordinator::State {
  Phase phase = Phase::Idle;
  uint32_t epoch = 0;
  std::optional<World> world;
  uint64_t next_world_gen = 1;
  std::deque<std::pair<int, proto::Register>> queued;
  std::optional<Ckpt> ckpt;
  std::deque<Request> armed;
  uint64_t next_uid = 1;
  std::set<uint64_t> used_uids;
  uint64_t heartbeat_seq = 0;
  Clock::time_point last_heartbeat;
  std::vector<int> closing;
};

namespace {

std::string who(const RankIdentity& id) { return fmt::format("({}, {}, {})", id.rank, id.node, id.uid); }

}  // namespace

Coordinator::Coordinator(CoordinatorConfig config)
    : config_(std::move(config)), state_(std::make_unique<GuardedCell<State>>()) {}

Coordinator::~Coordinator() {
  stop();
  if (wake_fd_ >= 0) ::close(wake_fd_);
}

void Coordinator::bind() {
  if (bound_) return;
  listener_ = listen_tcp(config_.listen);
  set_nonblocking(listener_.fd());
  endpoint_.host = (config_.listen.host.empty() || config_.listen.host == "0.0.0.0")
                       ? std::string("127.0.0.1")
                       : config_.listen.host;
  endpoint_.port = local_port(listener_);
  wake_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
  bound_ = true;
  spdlog::info("coordinator listening on {} (keepalive {} ms x {}, drain tick {} ms)",
               endpoint_.str(), config_.keepalive_ms, config_.misses, config_.drain_tick_ms);
}

void Coordinator::start() {
  bind();
  thread_ = std::thread([this] { loop(); });
}

void Coordinator::serve() {
  bind();
  loop();
}

void Coordinator::stop() {
  stop_ = true;
  wake();
  if (thread_.joinable()) thread_.join();
}

void Coordinator::wake() {
  if (wake_fd_ < 0) return;
  const uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof(one));
}

void Coordinator::set_observer(CoordinatorObserver observer) {
  std::lock_guard lk(obs_mu_);
  observer_ = std::move(observer);
}

// ---------------------------------------------------------------------------
// public queries

Phase Coordinator::phase() { return state_->lock("CoordinatorState")->phase; }

uint32_t Coordinator::epoch() { return state_->lock("CoordinatorState")->epoch; }

namespace {

template <class State, class Entry>
std::string rank_phase(const State& s, const Entry& e) {
  if (!e.alive) return "dead";
  if (e.deregistered) return "done";
  switch (s.phase) {
    case Phase::Draining: return e.report && e.report->at_cut ? "parked" : "draining";
    case Phase::Quiesced: return "quiesced";
    case Phase::Writing:
      return e.write == Entry::Write::Done     ? "written"
             : e.write == Entry::Write::Failed ? "failed"
                                               : "writing";
    case Phase::RestartReplay: return e.restart_done ? "replayed" : "replaying";
    default: return s.world->complete ? "running" : "registering";
  }
}

}  // namespace

std::vector<RankStatus> Coordinator::ranks() {
  auto s = state_->lock("CoordinatorState");
  std::vector<RankStatus> out;
  if (!s->world) return out;
  for (const auto& [r, e] : s->world->ranks) out.push_back({e.id, rank_phase(*s, e), e.alive, e.report});
  return out;
}

std::string Coordinator::rank_registry_dump() {
  auto s = state_->lock("CoordinatorState");
  std::string out = fmt::format("# coordinator phase={} epoch={} world={}\n", to_string(s->phase),
                                s->epoch, s->world ? s->world->size : 0);
  if (!s->world) return out;
  for (const auto& [r, e] : s->world->ranks) {
    const std::string phase = rank_phase(*s, e);
    const uint64_t sent = e.report ? e.report->bytes_sent : 0;
    const uint64_t recv = e.report ? e.report->bytes_received : 0;
    const uint32_t pending = e.report ? e.report->pending_ops : 0;
    out += fmt::format("rank={} node={} uid={} phase={} sent={} recv={} pending={}\n", e.id.rank,
                       e.id.node, e.id.uid, phase, sent, recv, pending);
  }
  return out;
}

bool Coordinator::wait_until(const std::function<bool()>& pred, milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  std::unique_lock lk(wait_mu_);
  while (true) {
    lk.unlock();
    const bool ok = pred();
    lk.lock();
    if (ok) return true;
    if (Clock::now() >= deadline) return false;
    wait_cv_.wait_for(lk, milliseconds(50));
  }
}

bool Coordinator::wait_running(milliseconds timeout) {
  return wait_until(
      [this] {
        auto s = state_->lock("CoordinatorState");
        return s->world && s->world->complete && s->phase == Phase::Running;
      },
      timeout);
}

bool Coordinator::wait_idle(milliseconds timeout) {
  return wait_until([this] { return !state_->lock("CoordinatorState")->world; }, timeout);
}

std::future<CheckpointResult> Coordinator::request_checkpoint(std::string backend, fs::path out_dir,
                                                              uint64_t min_poll) {
  Request req;
  req.backend = std::move(backend);
  req.out_dir = std::move(out_dir);
  req.min_poll = min_poll;
  req.promise = std::make_shared<std::promise<CheckpointResult>>();
  auto fut = req.promise->get_future();
  {
    std::lock_guard lk(req_mu_);
    requests_.push_back(std::move(req));
  }
  wake();
  return fut;
}

fs::path Coordinator::trigger_checkpoint(const std::string& backend, const fs::path& out_dir) {
  const CheckpointResult r = request_checkpoint(backend, out_dir).get();
  if (r.ok) return r.manifest;
  if (r.failure == CkptFailure::Timeout) throw CkptTimeout(r.error);
  throw CkptAborted(r.error);
}

// ---------------------------------------------------------------------------
// event loop

void Coordinator::loop() {
  {
    auto s = state_->lock("CoordinatorState");
    s->last_heartbeat = Clock::now();
  }
  std::vector<pollfd> pfds;
  std::vector<int> fds;
  while (!stop_) {
    pfds.clear();
    fds.clear();
    pfds.push_back({listener_.fd(), POLLIN, 0});
    pfds.push_back({wake_fd_, POLLIN, 0});
    for (const auto& [fd, c] : conns_) {
      pfds.push_back({fd, POLLIN, 0});
      fds.push_back(fd);
    }
    const int timeout = static_cast<int>(std::clamp<uint32_t>(config_.drain_tick_ms, 5, 50));
    const int rc = ::poll(pfds.data(), pfds.size(), timeout);
    if (rc < 0 && errno != EINTR) {
      spdlog::error("coordinator poll failed: {}", std::strerror(errno));
      break;
    }

    Outbox out;
    Deferred later;
    if (rc > 0 && (pfds[0].revents & POLLIN)) {
      while (true) {
        const int fd = ::accept4(listener_.fd(), nullptr, nullptr, SOCK_NONBLOCK | SOCK_CLOEXEC);
        if (fd < 0) break;
        set_nodelay(fd);
        auto c = std::make_unique<Conn>();
        c->sock = Socket(fd);
        conns_[fd] = std::move(c);
      }
    }
    if (rc > 0 && (pfds[1].revents & POLLIN)) {
      uint64_t v;
      while (::read(wake_fd_, &v, sizeof(v)) > 0) {
      }
    }
    for (std::size_t i = 0; rc > 0 && i < fds.size(); ++i) {
      if (!(pfds[i + 2].revents & (POLLIN | POLLHUP | POLLERR))) continue;
      const int fd = fds[i];
      auto it = conns_.find(fd);
      if (it == conns_.end()) continue;
      bool closed = false;
      try {
        const long n = read_available(fd, it->second->frames.sink());
        while (auto m = it->second->frames.next()) on_frame(fd, *m, out, later);
        closed = n == 0;
      } catch (const std::exception& e) {
        spdlog::warn("coordinator: dropping connection {}: {}", fd, e.what());
        closed = true;
      }
      if (closed) {
        on_disconnect(fd, out, later);
        conns_.erase(fd);
      }
    }
    drain_requests(out, later);
    on_timers(out, later);

    for (auto& f : later) f();
    flush(out);
    std::vector<int> closing;
    {
      auto s = state_->lock("CoordinatorState");
      closing.swap(s->closing);
    }
    for (int fd : closing) conns_.erase(fd);
    {
      std::lock_guard lk(wait_mu_);
    }
    wait_cv_.notify_all();
  }
  conns_.clear();
  listener_.close();
}

void Coordinator::flush(Outbox& out) {
  for (auto& [fd, bytes] : out) {
    if (!conns_.contains(fd)) continue;
    try {
      send_all(fd, bytes);
    } catch (const TransportError& e) {
      spdlog::warn("coordinator: write to connection {} failed: {}", fd, e.what());
    }
  }
  out.clear();
}

void Coordinator::drain_requests(Outbox& out, Deferred& later) {
  std::deque<Request> reqs;
  {
    std::lock_guard lk(req_mu_);
    reqs.swap(requests_);
  }
  if (reqs.empty()) return;
  auto s = state_->lock("CoordinatorState");
  for (auto& r : reqs) start_checkpoint(*s, std::move(r), out, later);
}

void Coordinator::on_frame(int fd, const proto::Message& m, Outbox& out, Deferred& later) {
  Conn& conn = *conns_.at(fd);
  auto s = state_->lock("CoordinatorState");

  if (auto* reg = std::get_if<proto::Register>(&m)) {
    on_register(*s, fd, *reg, out, later);
    return;
  }
  if (auto* trig = std::get_if<proto::Trigger>(&m)) {
    conn.kind = Conn::Kind::Control;
    Request req;
    req.backend = trig->backend;
    req.out_dir = trig->out_dir;
    req.min_poll = trig->min_poll;
    req.promise = std::make_shared<std::promise<CheckpointResult>>();
    req.control_fd = fd;
    start_checkpoint(*s, std::move(req), out, later);
    return;
  }
  if (conn.kind != Conn::Kind::Rank || !s->world || conn.world_gen != s->world->gen) return;
  auto eit = s->world->ranks.find(conn.rank);
  if (eit == s->world->ranks.end() || eit->second.fd != fd) return;
  RankEntry& e = eit->second;
  auto& ck = s->ckpt;

  std::visit(
      [&](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, proto::HeartbeatAck>) {
          e.last_ack = Clock::now();
        } else if constexpr (std::is_same_v<T, proto::DrainReport>) {
          on_report(*s, conn.rank, msg, out, later);
        } else if constexpr (std::is_same_v<T, proto::Done>) {
          if (!ck || e.write != RankEntry::Write::Sent) return;
          e.write = RankEntry::Write::Done;
          e.bytes = msg.bytes;
          e.ms = msg.ms;
          spdlog::info("receipt ({}, {}, {}, {}, {})", e.id.rank, e.id.node, e.id.uid, msg.bytes, msg.ms);
          if (ck->aborting) {
            maybe_finish_abort(*s, out, later);
          } else {
            maybe_finish_write(*s, out, later);
          }
        } else if constexpr (std::is_same_v<T, proto::WriteFailed>) {
          if (!ck || e.write != RankEntry::Write::Sent) return;
          e.write = RankEntry::Write::Failed;
          spdlog::warn("rank {} image write failed: {}", who(e.id), msg.message);
          if (ck->aborting) {
            maybe_finish_abort(*s, out, later);
          } else {
            abort_epoch(*s, fmt::format("rank {} could not write its image: {}", who(e.id), msg.message),
                        CkptFailure::Aborted, out, later);
          }
        } else if constexpr (std::is_same_v<T, proto::RestartDone>) {
          e.restart_done = true;
          if (s->phase != Phase::RestartReplay) return;
          for (const auto& [r, x] : s->world->ranks) {
            if (x.active() && !x.restart_done) return;
          }
          for (const auto& [r, x] : s->world->ranks) {
            if (x.active()) out.emplace_back(x.fd, proto::encode(proto::Resume{s->world->epoch}));
          }
          s->phase = Phase::Running;
          spdlog::info("restart of epoch {} complete, world of {} resumed", s->world->epoch, s->world->size);
          const uint32_t ep = s->world->epoch;
          {
            std::lock_guard lk(obs_mu_);
            if (observer_.on_restart_resume) {
              auto cb = observer_.on_restart_resume;
              later.push_back([cb, ep] { cb(ep); });
            }
          }
          if (!s->armed.empty()) {
            Request req = std::move(s->armed.front());
            s->armed.pop_front();
            start_checkpoint(*s, std::move(req), out, later);
          }
        } else if constexpr (std::is_same_v<T, proto::Deregister>) {
          e.deregistered = true;
          spdlog::info("rank {} deregistered", who(e.id));
          if (ck && !ck->aborting) {
            abort_epoch(*s, fmt::format("rank {} finished before the checkpoint cut", who(e.id)),
                        CkptFailure::Aborted, out, later);
          } else if (ck) {
            maybe_finish_abort(*s, out, later);
          }
          maybe_end_world(*s, out, later);
        } else {
          spdlog::warn("rank {} sent unexpected {}", who(e.id), proto::to_string(proto::type_of(m)));
        }
      },
      m);
}

void Coordinator::on_register(State& s, int fd, const proto::Register& reg, Outbox& out, Deferred& later) {
  Conn& conn = *conns_.at(fd);
  conn.kind = Conn::Kind::Rank;
  auto reject = [&](const std::string& reason) {
    spdlog::warn("rejecting REGISTER (rank {}, {}, pid {}): {}", reg.rank, reg.node, reg.pid, reason);
    out.emplace_back(fd, proto::encode(proto::RegisterReject{reason}));
    conn.kind = Conn::Kind::Rejected;
  };
  if (s.world && s.world->complete) {
    // Next world: admitted once every rank of the current one is gone.
    s.queued.emplace_back(fd, reg);
    return;
  }
  if (!s.world) {
    if (reg.world == 0) return reject("world size 0");
    World w;
    w.gen = s.next_world_gen++;
    w.size = reg.world;
    w.mode = reg.mode;
    w.epoch = reg.epoch;
    s.world = std::move(w);
  }
  World& w = *s.world;
  if (reg.world != w.size || reg.mode != w.mode || reg.epoch != w.epoch) {
    return reject(fmt::format("world mismatch: registering world {} epoch {}, current world {} epoch {}",
                              reg.world, reg.epoch, w.size, w.epoch));
  }
  if (reg.rank >= w.size) return reject(fmt::format("rank {} outside world of {}", reg.rank, w.size));
  if (w.ranks.contains(reg.rank)) {
    return reject(fmt::format("duplicate REGISTER for rank {} in epoch {}", reg.rank, reg.epoch));
  }
  RankEntry e;
  e.id = {reg.rank, reg.node, 0};
  e.pid = reg.pid;
  e.fd = fd;
  e.listen_port = reg.listen_port;
  e.requested_uid = reg.requested_uid;
  w.ranks.emplace(reg.rank, std::move(e));
  conn.rank = reg.rank;
  conn.world_gen = w.gen;
  if (w.ranks.size() == w.size) admit_world(s, out, later);
}

void Coordinator::admit_world(State& s, Outbox& out, Deferred& later) {
  World& w = *s.world;
  w.complete = true;
  const auto now = Clock::now();
  proto::RegisterAck ack;
  ack.keepalive_ms = config_.keepalive_ms;
  ack.misses = config_.misses;
  ack.drain_tick_ms = config_.drain_tick_ms;
  for (auto& [r, e] : w.ranks) {
    uint64_t uid = e.requested_uid;
    if (uid == 0 || s.used_uids.contains(uid)) {
      while (s.used_uids.contains(s.next_uid)) ++s.next_uid;
      uid = s.next_uid++;
    }
    s.used_uids.insert(uid);
    e.id.uid = uid;
    e.last_ack = now;
    ack.peers.push_back({"127.0.0.1", e.listen_port});
  }
  s.epoch = std::max(s.epoch, w.epoch);
  s.phase = w.mode == proto::LaunchMode::Restart ? Phase::RestartReplay : Phase::Running;
  s.last_heartbeat = now;
  for (const auto& [r, e] : w.ranks) {
    spdlog::info("rank {} registered (pid {}, {})", who(e.id), e.pid,
                 w.mode == proto::LaunchMode::Restart ? "restart" : "launch");
  }
  // An armed checkpoint reaches the ranks ahead of REGISTER_ACK, so no rank
  // can pass the requested poll before it knows about the cut.
  if (w.mode == proto::LaunchMode::Fresh && !s.armed.empty()) {
    Request req = std::move(s.armed.front());
    s.armed.pop_front();
    start_checkpoint(s, std::move(req), out, later);
  }
  for (const auto& [r, e] : w.ranks) {
    proto::RegisterAck a = ack;
    a.uid = e.id.uid;
    out.emplace_back(e.fd, proto::encode(a));
  }
}

void Coordinator::complete(State& s, CheckpointResult result, Deferred& later) {
  if (!s.ckpt) return;
  auto promise = s.ckpt->promise;
  const int control_fd = s.ckpt->control_fd;
  if (control_fd >= 0 && conns_.contains(control_fd)) {
    proto::TriggerResult tr{static_cast<uint8_t>(result.ok ? 1 : 0),
                            result.ok ? result.manifest.string() : result.error};
    const Bytes frame = proto::encode(tr);
    later.push_back([this, control_fd, frame] {
      if (!conns_.contains(control_fd)) return;
      try {
        send_all(control_fd, frame);
      } catch (const TransportError&) {
      }
    });
  }
  later.push_back([promise, result = std::move(result)]() mutable { promise->set_value(std::move(result)); });
  s.ckpt.reset();
}

void Coordinator::start_checkpoint(State& s, Request req, Outbox& out, Deferred& later) {
  auto fail = [&](CkptFailure kind, const std::string& why) {
    CheckpointResult r;
    r.failure = kind;
    r.error = why;
    spdlog::warn("checkpoint request refused: {}", why);
    if (req.control_fd >= 0) {
      out.emplace_back(req.control_fd, proto::encode(proto::TriggerResult{0, why}));
    }
    auto p = req.promise;
    later.push_back([p, r]() { p->set_value(r); });
  };
  try {
    (void)StorageBackend::parse(req.backend, req.out_dir);
  } catch (const std::exception& e) {
    return fail(CkptFailure::BadRequest, e.what());
  }
  if (s.ckpt) return fail(CkptFailure::Busy, "a checkpoint is already in progress");
  if (!s.world || !s.world->complete || s.phase == Phase::RestartReplay) {
    spdlog::info("checkpoint armed (min poll {}), waiting for a running world", req.min_poll);
    s.armed.push_back(std::move(req));
    return;
  }
  if (s.phase != Phase::Running) return fail(CkptFailure::Busy, fmt::format("phase is {}", to_string(s.phase)));

  std::error_code ec;
  fs::path dir = fs::absolute(req.out_dir, ec);
  if (!ec) fs::create_directories(dir, ec);
  if (ec) return fail(CkptFailure::BadRequest, fmt::format("output directory {}: {}", req.out_dir.string(), ec.message()));

  Ckpt c;
  c.epoch = ++s.epoch;
  c.backend = req.backend;
  c.dir = dir.lexically_normal();
  c.target = req.min_poll;
  c.started = Clock::now();
  c.promise = req.promise;
  c.control_fd = req.control_fd;
  std::set<uint32_t> live;
  for (auto& [r, e] : s.world->ranks) {
    e.write = RankEntry::Write::None;
    e.report.reset();
    if (e.active()) live.insert(r);
  }
  c.tracker.reset(live);
  s.ckpt = std::move(c);
  s.phase = Phase::Draining;
  spdlog::info("epoch {}: CKPT_REQUEST to {} ranks (backend {}, min poll {}, dir {})", s.ckpt->epoch,
               live.size(), req.backend, req.min_poll, s.ckpt->dir.string());
  for (uint32_t r : live) {
    out.emplace_back(s.world->ranks.at(r).fd,
                     proto::encode(proto::CkptRequest{s.ckpt->epoch, req.min_poll, req.backend}));
  }
}

void Coordinator::on_report(State& s, uint32_t rank, const proto::DrainReport& rep, Outbox& out, Deferred& later) {
  auto& e = s.world->ranks.at(rank);
  e.report = rep;
  if (!s.ckpt || s.ckpt->aborting || s.phase != Phase::Draining || rep.epoch != s.ckpt->epoch) return;
  Ckpt& c = *s.ckpt;
  const uint64_t floor = rep.at_cut ? rep.poll_count : rep.poll_count + 1;
  if (floor > c.target) {
    c.target = floor;
    c.tracker.restart_window();
    for (const auto& [r, x] : s.world->ranks) {
      if (x.active()) out.emplace_back(x.fd, proto::encode(proto::Advance{c.epoch, c.target}));
    }
  }
  if (c.tracker.on_report(rank, rep, c.target)) begin_write(s, out, later);
}

void Coordinator::begin_write(State& s, Outbox& out, Deferred& later) {
  Ckpt& c = *s.ckpt;
  s.phase = Phase::Quiesced;
  for (const auto& [r, x] : s.world->ranks) {
    if (x.active()) out.emplace_back(x.fd, proto::encode(proto::QuiesceOk{c.epoch}));
  }
  {
    std::lock_guard lk(obs_mu_);
    if (observer_.before_write_image) {
      auto cb = observer_.before_write_image;
      const uint32_t ep = c.epoch;
      later.push_back([cb, ep] { cb(ep); });
    }
  }
  s.phase = Phase::Writing;
  later.push_back([this] {
    // Runs right before the WRITE_IMAGE frames are flushed.
    auto st = state_->lock("CoordinatorState");
    if (st->ckpt) st->ckpt->write_started = Clock::now();
  });
  spdlog::info("epoch {}: quiesced at poll {} after {} report rounds", c.epoch, c.target,
               c.tracker.rounds_closed());
  for (auto& [r, x] : s.world->ranks) {
    if (!x.active()) continue;
    const fs::path path = c.dir / image_filename(r, c.epoch);
    c.paths[r] = path;
    x.write = RankEntry::Write::Sent;
    out.emplace_back(x.fd, proto::encode(proto::WriteImage{path.string()}));
  }
}

void Coordinator::maybe_finish_write(State& s, Outbox& out, Deferred& later) {
  Ckpt& c = *s.ckpt;
  for (const auto& [r, x] : s.world->ranks) {
    if (x.active() && x.write != RankEntry::Write::Done) return;
  }
  const auto now = Clock::now();
  Manifest m;
  m.epoch = c.epoch;
  m.world_size = s.world->size;
  m.entries = c.paths;
  const fs::path manifest = c.dir / manifest_filename(c.epoch);
  try {
    write_manifest(manifest, m);
  } catch (const std::exception& e) {
    abort_epoch(s, fmt::format("cannot write manifest: {}", e.what()), CkptFailure::Aborted, out, later);
    return;
  }
  CheckpointResult result;
  result.ok = true;
  result.epoch = c.epoch;
  result.manifest = manifest;
  result.write_time = std::chrono::duration_cast<std::chrono::microseconds>(now - c.write_started);
  result.total_time = std::chrono::duration_cast<std::chrono::microseconds>(now - c.started);
  for (const auto& [r, x] : s.world->ranks) {
    result.receipts.push_back({x.id, x.bytes, x.ms});
    result.image_bytes += x.bytes;
  }
  for (const auto& [r, x] : s.world->ranks) {
    if (x.active()) out.emplace_back(x.fd, proto::encode(proto::Resume{c.epoch}));
  }
  s.phase = Phase::Running;
  spdlog::info("epoch {}: manifest {} ({} bytes, write phase {:.3f} ms)", c.epoch, manifest.string(),
               result.image_bytes, result.write_time.count() / 1000.0);
  complete(s, std::move(result), later);
}

void Coordinator::abort_epoch(State& s, const std::string& reason, CkptFailure kind, Outbox& out, Deferred& later) {
  Ckpt& c = *s.ckpt;
  if (c.aborting) return;
  c.aborting = true;
  c.abort_reason = reason;
  c.failure = kind;
  spdlog::warn("epoch {}: CKPT_ABORT: {}", c.epoch, reason);
  if (s.world) {
    for (const auto& [r, x] : s.world->ranks) {
      if (x.active()) out.emplace_back(x.fd, proto::encode(proto::CkptAbort{c.epoch, reason}));
    }
  }
  {
    std::lock_guard lk(obs_mu_);
    if (observer_.on_abort) {
      auto cb = observer_.on_abort;
      const uint32_t ep = c.epoch;
      later.push_back([cb, ep, reason] { cb(ep, reason); });
    }
  }
  maybe_finish_abort(s, out, later);
}

void Coordinator::maybe_finish_abort(State& s, Outbox& /*out*/, Deferred& later) {
  Ckpt& c = *s.ckpt;
  if (s.world) {
    for (const auto& [r, x] : s.world->ranks) {
      if (x.active() && x.write == RankEntry::Write::Sent) return;  // outcome still unknown
    }
  }
  // No manifest for this epoch, so no image may stay under a final name.
  const uint32_t world = s.world ? s.world->size : 0;
  for (uint32_t r = 0; r < world; ++r) {
    std::error_code ec;
    const fs::path p = c.dir / image_filename(r, c.epoch);
    fs::remove(p, ec);
    fs::path tmp = p;
    tmp += ".tmp";
    fs::remove(tmp, ec);
  }
  CheckpointResult result;
  result.epoch = c.epoch;
  result.failure = c.failure;
  result.error = c.abort_reason;
  if (s.world) s.phase = Phase::Running;
  complete(s, std::move(result), later);
}

void Coordinator::declare_dead(State& s, uint32_t rank, const std::string& reason, Outbox& out, Deferred& later) {
  RankEntry& e = s.world->ranks.at(rank);
  if (!e.alive) return;
  e.alive = false;
  spdlog::warn("rank {} declared dead: {}", who(e.id), reason);
  s.closing.push_back(e.fd);
  {
    std::lock_guard lk(obs_mu_);
    if (observer_.on_rank_dead) {
      auto cb = observer_.on_rank_dead;
      const RankIdentity id = e.id;
      later.push_back([cb, id, reason] { cb(id, reason); });
    }
  }
  if (s.ckpt) {
    s.ckpt->tracker.drop_rank(rank);
    if (!s.ckpt->aborting) {
      abort_epoch(s, fmt::format("rank {} died: {}", who(e.id), reason), CkptFailure::Aborted, out, later);
    } else {
      maybe_finish_abort(s, out, later);
    }
  }
  maybe_end_world(s, out, later);
}

void Coordinator::maybe_end_world(State& s, Outbox& out, Deferred& later) {
  if (!s.world || !s.world->complete) return;
  for (const auto& [r, x] : s.world->ranks) {
    if (x.active()) return;
  }
  spdlog::info("world of {} finished", s.world->size);
  if (s.ckpt) {
    s.ckpt->failure = s.ckpt->aborting ? s.ckpt->failure : CkptFailure::Aborted;
    if (s.ckpt->abort_reason.empty()) s.ckpt->abort_reason = "world ended during the checkpoint";
    s.ckpt->aborting = true;
    maybe_finish_abort(s, out, later);
  }
  s.world.reset();
  s.phase = Phase::Done;
  auto queued = std::move(s.queued);
  s.queued.clear();
  for (auto& [fd, reg] : queued) {
    if (conns_.contains(fd)) on_register(s, fd, reg, out, later);
  }
}

void Coordinator::on_disconnect(int fd, Outbox& out, Deferred& later) {
  auto s = state_->lock("CoordinatorState");
  for (auto it = s->queued.begin(); it != s->queued.end();) {
    it = it->first == fd ? s->queued.erase(it) : std::next(it);
  }
  if (s->ckpt && s->ckpt->control_fd == fd) s->ckpt->control_fd = -1;
  const Conn& conn = *conns_.at(fd);
  if (conn.kind != Conn::Kind::Rank || !s->world || conn.world_gen != s->world->gen) return;
  auto it = s->world->ranks.find(conn.rank);
  if (it == s->world->ranks.end() || it->second.fd != fd) return;
  if (!s->world->complete) {
    s->world->ranks.erase(it);
    if (s->world->ranks.empty()) s->world.reset();
    return;
  }
  if (it->second.active()) declare_dead(*s, conn.rank, "connection closed", out, later);
}

void Coordinator::on_timers(Outbox& out, Deferred& later) {
  auto s = state_->lock("CoordinatorState");
  const auto now = Clock::now();
  if (s->world && s->world->complete) {
    if (now - s->last_heartbeat >= milliseconds(config_.keepalive_ms)) {
      s->last_heartbeat = now;
      ++s->heartbeat_seq;
      for (const auto& [r, x] : s->world->ranks) {
        if (x.active()) out.emplace_back(x.fd, proto::encode(proto::Heartbeat{s->heartbeat_seq}));
      }
    }
    const auto limit = milliseconds(uint64_t{config_.keepalive_ms} * std::max<uint32_t>(1, config_.misses));
    std::vector<uint32_t> dead;
    for (const auto& [r, x] : s->world->ranks) {
      if (x.active() && now - x.last_ack > limit) dead.push_back(r);
    }
    for (uint32_t r : dead) {
      if (!s->world) break;
      declare_dead(*s, r, fmt::format("no heartbeat ack for {} ms", limit.count()), out, later);
    }
  }
  if (s->ckpt && !s->ckpt->aborting && s->phase == Phase::Draining &&
      now - s->ckpt->started > milliseconds(config_.ckpt_timeout_ms)) {
    abort_epoch(*s, fmt::format("no quiescence within {} ms", config_.ckpt_timeout_ms),
                CkptFailure::Timeout, out, later);
  }
}

}  // namespace splitckpt
