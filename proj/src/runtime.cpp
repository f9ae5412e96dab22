#include "splitckpt/runtime.hpp"

#include <poll.h>
#include <sys/eventfd.h>
#include <unistd.h>

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cstring>
#include <set>

namespace splitckpt {

using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

namespace {

constexpr uint64_t kInboxChunk = 64 * 1024;
constexpr uint32_t kHelloMagic = 0x4D504D48;  // "MPMH"

Bytes frame_header(uint32_t comm, uint32_t src, uint32_t dst, int32_t tag, uint32_t len) {
  ByteWriter w(kFrameHeaderBytes);
  w.u32(kFrameMagic);
  w.u32(comm);
  w.u32(src);
  w.u32(dst);
  w.i32(tag);
  w.u32(len);
  return w.take();
}

Bytes doubles_to_bytes(std::span<const double> v) {
  Bytes out(v.size() * sizeof(double));
  if (!v.empty()) std::memcpy(out.data(), v.data(), out.size());
  return out;
}

std::vector<double> bytes_to_doubles(std::span<const std::byte> b) {
  std::vector<double> out(b.size() / sizeof(double));
  if (!out.empty()) std::memcpy(out.data(), b.data(), out.size() * sizeof(double));
  return out;
}

}  // namespace

bool Communicator::contains(uint32_t rank) const {
  return std::binary_search(members.begin(), members.end(), rank);
}

std::size_t Communicator::index_of(uint32_t rank) const {
  auto it = std::lower_bound(members.begin(), members.end(), rank);
  if (it == members.end() || *it != rank) {
    throw InvalidRank(fmt::format("rank {} is not a member of communicator {}", rank, id));
  }
  return static_cast<std::size_t>(it - members.begin());
}

const char* to_string(Opcode op) {
  switch (op) {
    case Opcode::Init: return "Init";
    case Opcode::CommSplit: return "CommSplit";
    case Opcode::Finalize: return "Finalize";
  }
  return "?";
}

Runtime::Runtime(GuardedCell<AddressSpace>& memory, GuardedCell<FdRegistry>& fds)
    : memory_(memory), fds_(fds) {}

Runtime::~Runtime() {
  if (!finalized_) teardown();
}

RankIdentity Runtime::identity() const { return {config_.rank, node_, uid_}; }

// ---------------------------------------------------------------------------
// bootstrap

void Runtime::mp_init(const RuntimeConfig& config) {
  if (initialized_) throw std::logic_error("mp_init called twice");
  if (config.world_size == 0 || config.rank >= config.world_size) {
    throw InvalidRank(fmt::format("rank {} outside world of {}", config.rank, config.world_size));
  }
  config_ = config;
  node_ = config.node.empty() ? hostname() : config.node;

  {
    auto mem = memory_.lock("AddressSpace");
    lower_regions_.push_back(mem->reserve_any(kPageSize, Half::Lower, "rt.control").start);
    for (uint32_t r = 0; r < config.world_size; ++r) {
      if (r == config.rank) continue;
      lower_regions_.push_back(
          mem->reserve_any(kPageSize, Half::Lower, fmt::format("rt.peer.{}", r)).start);
    }
  }

  auto coord = connect_tcp(config.coordinator, config.connect_timeout);
  if (!coord) {
    throw CoordinatorUnreachable(fmt::format("coordinator {} unreachable after {} ms",
                                             config.coordinator.str(),
                                             config.connect_timeout.count()));
  }
  coord_ = std::move(*coord);
  coord_vfd_ = fds_.lock("FdRegistry")->allocate(Half::Lower, "coordinator " + config.coordinator.str());

  listener_ = listen_tcp({"127.0.0.1", 0});
  const uint16_t port = local_port(listener_);
  listen_vfd_ = fds_.lock("FdRegistry")->allocate(Half::Lower, fmt::format("listen 127.0.0.1:{}", port));

  proto::Register reg;
  reg.rank = config.rank;
  reg.world = config.world_size;
  reg.epoch = config.epoch;
  reg.mode = config.mode;
  reg.requested_uid = config.requested_uid;
  reg.pid = static_cast<uint32_t>(::getpid());
  reg.listen_port = port;
  reg.node = node_;
  proto::send_message(coord_.fd(), reg);

  std::optional<proto::RegisterAck> ack;
  const auto deadline = Clock::now() + config.register_timeout;
  while (!ack) {
    const auto left = std::chrono::duration_cast<milliseconds>(deadline - Clock::now());
    if (left.count() <= 0) {
      throw CoordinatorUnreachable(fmt::format("no REGISTER_ACK from {} within {} ms",
                                               config.coordinator.str(),
                                               config.register_timeout.count()));
    }
    std::optional<proto::Message> m;
    try {
      m = proto::recv_message(coord_.fd(), left);
    } catch (const TransportError& e) {
      throw CoordinatorUnreachable(fmt::format("coordinator closed during registration: {}", e.what()));
    }
    if (!m) continue;
    if (auto* a = std::get_if<proto::RegisterAck>(&*m)) {
      ack = *a;
    } else if (auto* rej = std::get_if<proto::RegisterReject>(&*m)) {
      throw RegistrationRejected(rej->reason);
    } else {
      handle_coordinator(*m);
    }
  }
  if (ack->peers.size() != config.world_size) {
    throw ProtocolError(fmt::format("REGISTER_ACK lists {} peers for world {}", ack->peers.size(),
                                    config.world_size));
  }
  uid_ = ack->uid;
  keepalive_ms_ = ack->keepalive_ms;
  misses_ = ack->misses;
  drain_tick_ms_ = std::max<uint32_t>(1, ack->drain_tick_ms);

  // Lower ranks accept, higher ranks connect; each link opens with a hello.
  peers_.resize(config.world_size);
  for (uint32_t j = 0; j < config.rank; ++j) {
    Endpoint ep{ack->peers[j].host, ack->peers[j].port};
    auto s = connect_tcp(ep, config.peer_timeout);
    if (!s) throw PeerTimeout(fmt::format("rank {} could not reach rank {} at {}", config.rank, j, ep.str()));
    ByteWriter hello;
    hello.u32(kHelloMagic);
    hello.u32(config.rank);
    send_all(s->fd(), hello.data());
    peers_[j] = std::make_unique<Peer>();
    peers_[j]->sock = std::move(*s);
  }
  for (uint32_t n = config.rank + 1; n < config.world_size; ++n) {
    auto s = accept_tcp(listener_, config.peer_timeout);
    if (!s) throw PeerTimeout(fmt::format("rank {} timed out waiting for peers", config.rank));
    std::byte hello[8];
    if (!recv_exact(s->fd(), hello, config.peer_timeout)) {
      throw PeerTimeout(fmt::format("rank {}: peer hello timed out", config.rank));
    }
    ByteReader r(hello);
    const uint32_t magic = r.u32();
    const uint32_t from = r.u32();
    if (magic != kHelloMagic || from <= config.rank || from >= config.world_size || peers_[from]) {
      throw ProtocolError(fmt::format("rank {}: bad peer hello", config.rank));
    }
    peers_[from] = std::make_unique<Peer>();
    peers_[from]->sock = std::move(*s);
  }
  for (uint32_t j = 0; j < config.world_size; ++j) {
    if (!peers_[j]) continue;
    set_nonblocking(peers_[j]->sock.fd());
    peers_[j]->vfd = fds_.lock("FdRegistry")->allocate(Half::Lower, fmt::format("peer rank {}", j));
  }
  set_nonblocking(coord_.fd());

  {
    auto c = core_.lock("RuntimeCore");
    Communicator world;
    world.id = kWorldComm;
    for (uint32_t r = 0; r < config.world_size; ++r) world.members.push_back(r);
    c->comms[kWorldComm] = world;
    c->next_comm = 1;
    c->control.awaiting_restart = config.mode == proto::LaunchMode::Restart;
    append_log(*c, Opcode::Init, {config.world_size, config.rank, 0, 0}, kWorldComm);
  }

  wake_fd_ = ::eventfd(0, EFD_NONBLOCK | EFD_CLOEXEC);
  initialized_ = true;
  progress_ = std::thread([this] { progress_loop(); });
  spdlog::debug("(rank {}, {}, uid {}) runtime up, world {}", config.rank, node_, uid_,
                config.world_size);
}

void Runtime::append_log(Core& c, Opcode op, std::array<uint64_t, 4> args, uint64_t result) {
  c.log.push_back({c.next_seq++, op, args, result});
}

// ---------------------------------------------------------------------------
// point-to-point

void Runtime::check_user_tag(int32_t tag) const {
  if (tag < 0) throw InvalidTag(fmt::format("tag {} is reserved for collectives", tag));
}

void Runtime::check_member(Core& c, CommId comm, uint32_t peer) const {
  if (!initialized_ || finalized_) throw std::logic_error("runtime not running");
  auto it = c.comms.find(comm);
  if (it == c.comms.end()) throw InvalidCommunicator(fmt::format("unknown communicator {}", comm));
  if (!it->second.contains(peer)) {
    throw InvalidRank(fmt::format("rank {} is not a member of communicator {}", peer, comm));
  }
  if (!it->second.contains(config_.rank)) {
    throw InvalidCommunicator(fmt::format("rank {} is not in communicator {}", config_.rank, comm));
  }
}

OpToken Runtime::mp_isend(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload) {
  check_user_tag(tag);
  return isend_internal(dest, comm, tag, payload);
}

OpToken Runtime::mp_irecv(uint32_t source, CommId comm, int32_t tag) {
  check_user_tag(tag);
  return irecv_internal(source, comm, tag);
}

OpToken Runtime::isend_internal(uint32_t dest, CommId comm, int32_t tag,
                                std::span<const std::byte> payload) {
  if (payload.size() > UINT32_MAX) throw std::invalid_argument("payload too large");
  bool to_wire = false;
  OpToken token = 0;
  {
    auto c = core_.lock("RuntimeCore");
    check_member(*c, comm, dest);
    token = c->next_token++;
    TokenState ts;
    ts.is_send = true;
    // Self-sends never touch the transport, so the freeze does not apply.
    if (c->frozen && dest != config_.rank) {
      c->deferred.push_back({token, {config_.rank, dest, comm, tag, Bytes(payload.begin(), payload.end())}});
    } else {
      ts.complete = true;
      c->ledger.bytes_sent += payload.size();
      c->ledger.messages_sent += 1;
      if (dest == config_.rank) {
        deliver_locked(*c, config_.rank, comm, tag, Bytes(payload.begin(), payload.end()));
      } else {
        to_wire = true;
      }
    }
    c->tokens.emplace(token, std::move(ts));
  }
  if (to_wire) write_frame(dest, comm, tag, payload);
  notify_all();
  return token;
}

void Runtime::write_frame(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload) {
  Peer& p = *peers_.at(dest);
  const Bytes header = frame_header(comm, config_.rank, dest, tag, static_cast<uint32_t>(payload.size()));
  std::lock_guard lk(p.write_mu);
  WireProbe::global().handed += header.size() + payload.size();
  send_all(p.sock.fd(), header);
  if (!payload.empty()) send_all(p.sock.fd(), payload);
}

OpToken Runtime::irecv_internal(uint32_t source, CommId comm, int32_t tag) {
  OpToken token = 0;
  {
    auto c = core_.lock("RuntimeCore");
    check_member(*c, comm, source);
    token = c->next_token++;
    TokenState ts;
    const ChannelKey ch{source, comm, tag};
    auto in = c->inbox.find(ch);
    if (in != c->inbox.end() && !in->second.empty()) {
      ts.complete = true;
      ts.info = {source, tag, std::move(in->second.front())};
      in->second.pop_front();
      c->inbox_bytes -= ts.info.payload.size();
      if (in->second.empty()) c->inbox.erase(in);
    } else {
      c->posted[ch].push_back(token);
      if (source != config_.rank) ts.peer = source;
    }
    c->tokens.emplace(token, std::move(ts));
  }
  return token;
}

void Runtime::deliver_locked(Core& c, uint32_t source, CommId comm, int32_t tag, Bytes payload) {
  c.ledger.bytes_received += payload.size();
  c.ledger.messages_received += 1;
  const ChannelKey ch{source, comm, tag};
  auto posted = c.posted.find(ch);
  if (posted != c.posted.end() && !posted->second.empty()) {
    const OpToken t = posted->second.front();
    posted->second.pop_front();
    if (posted->second.empty()) c.posted.erase(posted);
    auto& ts = c.tokens.at(t);
    ts.complete = true;
    ts.info = {source, tag, std::move(payload)};
    return;
  }
  c.inbox_bytes += payload.size();
  c.inbox[ch].push_back(std::move(payload));
}

CompletionInfo Runtime::mp_wait(OpToken token) {
  while (true) {
    const uint64_t gen = generation();
    {
      auto c = core_.lock("RuntimeCore");
      auto it = c->tokens.find(token);
      if (it == c->tokens.end()) throw UnknownToken(fmt::format("unknown token {}", token));
      if (it->second.complete) {
        CompletionInfo info = std::move(it->second.info);
        c->tokens.erase(it);
        return info;
      }
      if (c->fatal) throw TransportError(*c->fatal);
      // Frames are delivered before EOF is flagged, so nothing more can
      // arrive for this receive.
      if (const auto& peer = it->second.peer; peer && peers_[*peer]->eof) {
        throw TransportError(fmt::format("rank {}: peer rank {} closed its connection", config_.rank, *peer));
      }
    }
    wait_for_change(gen, milliseconds(200));
  }
}

void Runtime::mp_send(uint32_t dest, CommId comm, int32_t tag, std::span<const std::byte> payload) {
  mp_wait(mp_isend(dest, comm, tag, payload));
}

Bytes Runtime::mp_recv(uint32_t source, CommId comm, int32_t tag) {
  return mp_wait(mp_irecv(source, comm, tag)).payload;
}

// ---------------------------------------------------------------------------
// collectives

void Runtime::mp_barrier(CommId comm) {
  const Communicator c = communicator(comm);
  const std::size_t n = c.members.size();
  const std::size_t i = c.index_of(config_.rank);
  const std::byte token[1] = {std::byte{1}};
  for (std::size_t k = 1; k < n; k <<= 1) {
    const uint32_t to = c.members[(i + k) % n];
    const uint32_t from = c.members[(i + n - k) % n];
    const OpToken t = isend_internal(to, comm, kBarrierTag, token);
    mp_wait(irecv_internal(from, comm, kBarrierTag));
    mp_wait(t);
  }
}

std::vector<double> Runtime::mp_allreduce_sum_f64(CommId comm, std::span<const double> values) {
  const Communicator c = communicator(comm);
  const uint32_t root = c.members.front();
  if (config_.rank != root) {
    mp_wait(isend_internal(root, comm, kAllreduceTag, doubles_to_bytes(values)));
    const Bytes reply = mp_wait(irecv_internal(root, comm, kAllreduceTag)).payload;
    if (reply.empty()) throw ProtocolError("empty allreduce reply");
    if (reply[0] != std::byte{0}) throw LengthMismatch("allreduce vector lengths differ across ranks");
    return bytes_to_doubles(std::span(reply).subspan(1));
  }
  std::vector<double> acc(values.begin(), values.end());
  bool mismatch = false;
  for (std::size_t m = 1; m < c.members.size(); ++m) {
    const Bytes b = mp_wait(irecv_internal(c.members[m], comm, kAllreduceTag)).payload;
    if (b.size() != acc.size() * sizeof(double)) {
      mismatch = true;
      continue;
    }
    const auto v = bytes_to_doubles(b);
    for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += v[j];
  }
  Bytes reply;
  reply.push_back(std::byte{static_cast<uint8_t>(mismatch ? 1 : 0)});
  if (!mismatch) {
    const Bytes body = doubles_to_bytes(acc);
    reply.insert(reply.end(), body.begin(), body.end());
  }
  std::vector<OpToken> sends;
  for (std::size_t m = 1; m < c.members.size(); ++m) {
    sends.push_back(isend_internal(c.members[m], comm, kAllreduceTag, reply));
  }
  for (OpToken t : sends) mp_wait(t);
  if (mismatch) throw LengthMismatch("allreduce vector lengths differ across ranks");
  return acc;
}

Communicator Runtime::mp_comm_split(CommId parent, int32_t color, int32_t key) {
  Communicator p;
  CommId my_next = 0;
  {
    auto c = core_.lock("RuntimeCore");
    auto it = c->comms.find(parent);
    if (it == c->comms.end()) throw InvalidCommunicator(fmt::format("unknown communicator {}", parent));
    if (!it->second.contains(config_.rank)) {
      throw InvalidCommunicator(fmt::format("rank {} is not in communicator {}", config_.rank, parent));
    }
    p = it->second;
    my_next = c->next_comm;
  }

  struct Row {
    uint32_t rank;
    int32_t color;
    int32_t key;
    uint32_t next;
  };
  std::vector<Row> rows;
  const uint32_t root = p.members.front();
  if (config_.rank == root) {
    rows.push_back({root, color, key, my_next});
    for (std::size_t m = 1; m < p.members.size(); ++m) {
      const Bytes b = mp_wait(irecv_internal(p.members[m], parent, kSplitTag)).payload;
      ByteReader r(b);
      Row row{p.members[m], r.i32(), r.i32(), r.u32()};
      rows.push_back(row);
    }
    ByteWriter w;
    for (const Row& row : rows) {
      w.u32(row.rank);
      w.i32(row.color);
      w.i32(row.key);
      w.u32(row.next);
    }
    std::vector<OpToken> sends;
    for (std::size_t m = 1; m < p.members.size(); ++m) {
      sends.push_back(isend_internal(p.members[m], parent, kSplitTag, w.data()));
    }
    for (OpToken t : sends) mp_wait(t);
  } else {
    ByteWriter w;
    w.i32(color);
    w.i32(key);
    w.u32(my_next);
    mp_wait(isend_internal(root, parent, kSplitTag, w.data()));
    const Bytes b = mp_wait(irecv_internal(root, parent, kSplitTag)).payload;
    ByteReader r(b);
    while (!r.done()) {
      Row row{r.u32(), r.i32(), r.i32(), r.u32()};
      rows.push_back(row);
    }
  }

  uint32_t base = 0;
  std::set<int32_t> colors;
  for (const Row& row : rows) {
    base = std::max(base, row.next);
    colors.insert(row.color);
  }
  Communicator out;
  out.id = base + static_cast<CommId>(std::distance(colors.begin(), colors.find(color)));
  out.parent = parent;
  out.color = color;
  out.key = key;
  for (const Row& row : rows) {
    if (row.color == color) out.members.push_back(row.rank);
  }
  std::sort(out.members.begin(), out.members.end());

  {
    auto c = core_.lock("RuntimeCore");
    c->comms[out.id] = out;
    c->next_comm = std::max<CommId>(c->next_comm, base + static_cast<CommId>(colors.size()));
    append_log(*c, Opcode::CommSplit,
               {parent, encode_signed(color), encode_signed(key), 0}, out.id);
  }
  return out;
}

CommTable Runtime::replay_log(const std::vector<CallLogEntry>& log) {
  if (log.empty() || log.front().opcode != Opcode::Init) {
    throw ReplayMismatch("call log does not start with Init");
  }
  for (std::size_t i = 0; i < log.size(); ++i) {
    if (log[i].seq != i + 1) {
      throw ReplayMismatch(fmt::format("call log seq gap: entry {} has seq {}", i, log[i].seq));
    }
  }
  const auto& init = log.front();
  if (init.args[0] != config_.world_size || init.args[1] != config_.rank) {
    throw ReplayMismatch(fmt::format("log Init(world={}, rank={}) does not match this runtime ({}, {})",
                                     init.args[0], init.args[1], config_.world_size, config_.rank));
  }
  if (call_log().size() != 1) throw ReplayMismatch("replay needs a freshly initialized runtime");
  for (std::size_t i = 1; i < log.size(); ++i) {
    const auto& e = log[i];
    if (e.opcode != Opcode::CommSplit) {
      throw ReplayMismatch(fmt::format("cannot replay {} at seq {}", to_string(e.opcode), e.seq));
    }
    const auto got = mp_comm_split(static_cast<CommId>(e.args[0]), decode_signed32(e.args[1]),
                                   decode_signed32(e.args[2]));
    if (got.id != e.result) {
      throw ReplayMismatch(fmt::format("seq {}: CommSplit produced id {}, log says {}", e.seq,
                                       got.id, e.result));
    }
  }
  if (call_log() != log) throw ReplayMismatch("replayed call log differs from the image");
  return communicators();
}

void Runtime::mp_finalize() {
  if (!initialized_ || finalized_) throw std::logic_error("runtime not running");
  {
    auto c = core_.lock("RuntimeCore");
    if (!c->tokens.empty()) {
      throw PendingOperations(fmt::format("{} operations still outstanding", c->tokens.size()));
    }
    c->finalizing = true;
  }
  for (auto& p : peers_) {
    if (!p) continue;
    std::lock_guard lk(p->write_mu);
    p->sock.shutdown_write();
  }
  // Wait for every peer's half-close, so no peer tears down a socket with
  // our frames still unread.
  const auto deadline = Clock::now() + config_.peer_timeout;
  while (true) {
    const uint64_t gen = generation();
    bool all = true;
    for (auto& p : peers_) {
      if (p && !p->eof) all = false;
    }
    if (all) break;
    if (Clock::now() >= deadline) {
      spdlog::warn("(rank {}, {}, uid {}) peers did not close within {} ms", config_.rank, node_,
                   uid_, config_.peer_timeout.count());
      break;
    }
    if (core_.lock("RuntimeCore")->fatal) break;
    wait_for_change(gen, milliseconds(100));
  }
  {
    auto c = core_.lock("RuntimeCore");
    append_log(*c, Opcode::Finalize, {}, 0);
  }
  stop_progress();
  try {
    std::lock_guard lk(coord_write_mu_);
    proto::send_message(coord_.fd(), proto::Deregister{});
  } catch (const std::exception& e) {
    spdlog::warn("(rank {}, {}, uid {}) DEREGISTER not delivered: {}", config_.rank, node_, uid_,
                 e.what());
  }
  teardown();
  finalized_ = true;
}

// ---------------------------------------------------------------------------
// inspection

DrainLedger Runtime::ledger() {
  auto c = core_.lock("RuntimeCore");
  DrainLedger l = c->ledger;
  l.pending_ops = static_cast<uint32_t>(c->tokens.size());
  return l;
}

CommTable Runtime::communicators() { return core_.lock("RuntimeCore")->comms; }

Communicator Runtime::communicator(CommId id) {
  auto c = core_.lock("RuntimeCore");
  auto it = c->comms.find(id);
  if (it == c->comms.end()) throw InvalidCommunicator(fmt::format("unknown communicator {}", id));
  return it->second;
}

std::vector<CallLogEntry> Runtime::call_log() { return core_.lock("RuntimeCore")->log; }

// ---------------------------------------------------------------------------
// checkpoint-engine hooks

void Runtime::note_poll(uint64_t poll_count) { core_.lock("RuntimeCore")->poll_count = poll_count; }

std::optional<ControlView> Runtime::checkpoint_due(uint64_t poll_count) {
  auto c = core_.lock("RuntimeCore");
  c->poll_count = poll_count;
  const auto& ctl = c->control;
  if (ctl.drain_requested && !ctl.coordinator_lost && poll_count >= ctl.target_poll) return ctl;
  return std::nullopt;
}

ControlView Runtime::control() { return core_.lock("RuntimeCore")->control; }

ControlView Runtime::wait_control(uint64_t seen_generation, milliseconds timeout) {
  const auto deadline = Clock::now() + timeout;
  while (true) {
    const uint64_t gen = generation();
    {
      auto c = core_.lock("RuntimeCore");
      if (c->control.generation != seen_generation || Clock::now() >= deadline) return c->control;
    }
    wait_for_change(gen, std::min(timeout, milliseconds(100)));
  }
}

void Runtime::enter_drain(uint32_t epoch) {
  {
    auto c = core_.lock("RuntimeCore");
    c->frozen = true;
    c->at_cut = true;
    c->report_now = true;
  }
  spdlog::debug("(rank {}, {}, uid {}) parked for epoch {}", config_.rank, node_, uid_, epoch);
  wake_progress();
}

void Runtime::leave_drain() {
  std::vector<Deferred> flush;
  {
    auto c = core_.lock("RuntimeCore");
    c->frozen = false;
    c->at_cut = false;
    c->report_now = true;
    flush = std::move(c->deferred);
    c->deferred.clear();
    for (const auto& d : flush) {
      c->ledger.bytes_sent += d.msg.payload.size();
      c->ledger.messages_sent += 1;
    }
  }
  for (const auto& d : flush) {
    write_frame(d.msg.dest, d.msg.comm, d.msg.tag, d.msg.payload);
  }
  {
    auto c = core_.lock("RuntimeCore");
    for (const auto& d : flush) {
      if (d.token == 0) continue;
      if (auto it = c->tokens.find(d.token); it != c->tokens.end()) it->second.complete = true;
    }
  }
  wake_progress();
  notify_all();
}

std::vector<PendingMessage> Runtime::pending_messages() {
  auto c = core_.lock("RuntimeCore");
  std::vector<PendingMessage> out;
  for (const auto& [ch, queue] : c->inbox) {
    for (const auto& payload : queue) out.push_back({ch.source, config_.rank, ch.comm, ch.tag, payload});
  }
  for (const auto& d : c->deferred) out.push_back(d.msg);
  return out;
}

void Runtime::restore_pending(const std::vector<PendingMessage>& pending) {
  auto c = core_.lock("RuntimeCore");
  std::map<ChannelKey, std::deque<Bytes>> restored;
  for (const auto& p : pending) {
    if (p.dest == config_.rank) {
      restored[{p.source, p.comm, p.tag}].push_back(p.payload);
    } else if (p.source == config_.rank) {
      c->deferred.push_back({0, p});
    } else {
      throw RestartError(fmt::format("pending message {}->{} belongs to neither side of rank {}",
                                     p.source, p.dest, config_.rank));
    }
  }
  for (auto& [ch, queue] : restored) {
    auto& live = c->inbox[ch];
    for (auto it = queue.rbegin(); it != queue.rend(); ++it) {
      c->inbox_bytes += it->size();
      live.push_front(std::move(*it));
    }
    // A receive posted before restoration must see restored data first.
    auto posted = c->posted.find(ch);
    while (posted != c->posted.end() && !posted->second.empty() && !live.empty()) {
      auto& ts = c->tokens.at(posted->second.front());
      posted->second.pop_front();
      ts.complete = true;
      ts.info = {ch.source, ch.tag, std::move(live.front())};
      c->inbox_bytes -= ts.info.payload.size();
      live.pop_front();
    }
  }
}

void Runtime::report_write_done(uint64_t bytes, uint64_t ms) { send_coordinator(proto::Done{bytes, ms}); }

void Runtime::report_write_failed(const proto::WriteFailed& failure) { send_coordinator(failure); }

void Runtime::report_restart_done(uint32_t epoch) { send_coordinator(proto::RestartDone{epoch}); }

// ---------------------------------------------------------------------------
// coordinator link

void Runtime::send_coordinator(const proto::Message& m) {
  std::lock_guard lk(coord_write_mu_);
  if (!coord_.valid()) return;
  try {
    proto::send_message(coord_.fd(), m);
  } catch (const TransportError& e) {
    spdlog::warn("(rank {}, {}, uid {}) coordinator write failed: {}", config_.rank, node_, uid_,
                 e.what());
  }
}

void Runtime::handle_coordinator(const proto::Message& m) {
  bool changed = true;
  std::visit(
      [&](const auto& msg) {
        using T = std::decay_t<decltype(msg)>;
        if constexpr (std::is_same_v<T, proto::Heartbeat>) {
          changed = false;
          send_coordinator(proto::HeartbeatAck{msg.seq});
        } else if constexpr (std::is_same_v<T, proto::CkptRequest>) {
          auto c = core_.lock("RuntimeCore");
          auto& ctl = c->control;
          ctl.epoch = msg.epoch;
          ctl.drain_requested = true;
          ctl.target_poll = msg.min_poll;
          ctl.backend = msg.backend;
          ctl.write_path.reset();
          ctl.quiesced = ctl.resumed = ctl.aborted = false;
          ctl.abort_reason.clear();
          c->report_now = true;
        } else if constexpr (std::is_same_v<T, proto::Advance>) {
          auto c = core_.lock("RuntimeCore");
          if (msg.epoch == c->control.epoch) c->control.target_poll = msg.target_poll;
        } else if constexpr (std::is_same_v<T, proto::QuiesceOk>) {
          auto c = core_.lock("RuntimeCore");
          if (msg.epoch == c->control.epoch) c->control.quiesced = true;
        } else if constexpr (std::is_same_v<T, proto::WriteImage>) {
          core_.lock("RuntimeCore")->control.write_path = msg.path;
        } else if constexpr (std::is_same_v<T, proto::CkptAbort>) {
          auto c = core_.lock("RuntimeCore");
          if (msg.epoch == c->control.epoch) {
            c->control.aborted = true;
            c->control.abort_reason = msg.reason;
            c->control.drain_requested = false;
          }
        } else if constexpr (std::is_same_v<T, proto::Resume>) {
          auto c = core_.lock("RuntimeCore");
          if (c->control.awaiting_restart) {
            c->control.awaiting_restart = false;
            c->control.restart_released = true;
          } else if (msg.epoch == c->control.epoch) {
            c->control.resumed = true;
            c->control.drain_requested = false;
          }
        } else {
          changed = false;
          spdlog::warn("(rank {}, {}, uid {}) unexpected {} from coordinator", config_.rank, node_,
                       uid_, proto::to_string(proto::type_of(m)));
        }
      },
      m);
  if (changed) {
    auto c = core_.lock("RuntimeCore");
    c->control.generation++;
  }
  if (changed) notify_all();
}

void Runtime::send_drain_report() {
  proto::DrainReport rep;
  {
    auto c = core_.lock("RuntimeCore");
    rep.epoch = c->control.epoch;
    rep.bytes_sent = c->ledger.bytes_sent;
    rep.bytes_received = c->ledger.bytes_received;
    rep.pending_ops = static_cast<uint32_t>(c->tokens.size());
    rep.poll_count = c->poll_count;
    rep.at_cut = c->at_cut ? 1 : 0;
    rep.messages_sent = c->ledger.messages_sent;
    rep.messages_received = c->ledger.messages_received;
  }
  send_coordinator(rep);
}

// ---------------------------------------------------------------------------
// progress thread

bool Runtime::pump_peer(uint32_t r) {
  Peer& p = *peers_[r];
  const long n = read_available(p.sock.fd(), p.rbuf);
  if (n > 0) WireProbe::global().drained += static_cast<uint64_t>(n);
  while (true) {
    const std::size_t avail = p.rbuf.size() - p.rhead;
    if (avail < kFrameHeaderBytes) break;
    ByteReader h(std::span(p.rbuf).subspan(p.rhead, kFrameHeaderBytes));
    const uint32_t magic = h.u32();
    const uint32_t comm = h.u32();
    const uint32_t src = h.u32();
    const uint32_t dst = h.u32();
    const int32_t tag = h.i32();
    const uint32_t len = h.u32();
    if (magic != kFrameMagic || src != r || dst != config_.rank) {
      throw ProtocolError(fmt::format("rank {}: malformed frame from rank {}", config_.rank, r));
    }
    if (avail < kFrameHeaderBytes + len) break;
    const auto body = std::span(p.rbuf).subspan(p.rhead + kFrameHeaderBytes, len);
    Bytes payload(body.begin(), body.end());
    p.rhead += kFrameHeaderBytes + len;
    {
      auto c = core_.lock("RuntimeCore");
      deliver_locked(*c, src, comm, tag, std::move(payload));
    }
    notify_all();
  }
  if (p.rhead == p.rbuf.size()) {
    p.rbuf.clear();
    p.rhead = 0;
  } else if (p.rhead > (1u << 20)) {
    p.rbuf.erase(p.rbuf.begin(), p.rbuf.begin() + static_cast<std::ptrdiff_t>(p.rhead));
    p.rhead = 0;
  }
  return n != 0;
}

void Runtime::adjust_inbox_chunks() {
  uint64_t bytes = 0;
  {
    auto c = core_.lock("RuntimeCore");
    bytes = c->inbox_bytes;
  }
  const std::size_t want = static_cast<std::size_t>((bytes + kInboxChunk - 1) / kInboxChunk);
  if (want == inbox_chunks_.size()) return;
  auto mem = memory_.lock("AddressSpace");
  try {
    while (inbox_chunks_.size() < want) {
      inbox_chunks_.push_back(
          mem->reserve_any(kInboxChunk, Half::Lower, fmt::format("rt.inbox.{}", inbox_chunks_.size()))
              .start);
    }
  } catch (const ArenaExhausted& e) {
    spdlog::warn("(rank {}, {}, uid {}) inbox arena full: {}", config_.rank, node_, uid_, e.what());
  }
  while (inbox_chunks_.size() > want) {
    mem->release(inbox_chunks_.back());
    inbox_chunks_.pop_back();
  }
}

void Runtime::progress_loop() {
  auto last_heartbeat = Clock::now();
  auto last_report = Clock::now() - milliseconds(drain_tick_ms_);
  bool coord_open = true;

  auto mark_lost = [&](const std::string& why) {
    if (!coord_open) return;
    coord_open = false;
    {
      auto c = core_.lock("RuntimeCore");
      if (c->finalizing) return;
      c->control.coordinator_lost = true;
      c->control.drain_requested = false;
      c->control.generation++;
    }
    spdlog::warn("(rank {}, {}, uid {}) coordinator lost: {}", config_.rank, node_, uid_, why);
    notify_all();
  };

  std::vector<pollfd> pfds;
  std::vector<int> owner;  // -2 wake, -1 coordinator, r peer
  while (!stop_) {
    pfds.clear();
    owner.clear();
    pfds.push_back({wake_fd_, POLLIN, 0});
    owner.push_back(-2);
    if (coord_open) {
      pfds.push_back({coord_.fd(), POLLIN, 0});
      owner.push_back(-1);
    }
    for (uint32_t r = 0; r < peers_.size(); ++r) {
      if (peers_[r] && !peers_[r]->eof) {
        pfds.push_back({peers_[r]->sock.fd(), POLLIN, 0});
        owner.push_back(static_cast<int>(r));
      }
    }
    const int timeout = static_cast<int>(std::clamp<uint32_t>(drain_tick_ms_, 1, 100));
    int rc = ::poll(pfds.data(), pfds.size(), timeout);
    if (rc < 0 && errno != EINTR) break;

    try {
      for (std::size_t i = 0; rc > 0 && i < pfds.size(); ++i) {
        if (!(pfds[i].revents & (POLLIN | POLLHUP | POLLERR))) continue;
        if (owner[i] == -2) {
          uint64_t v;
          while (::read(wake_fd_, &v, sizeof(v)) > 0) {
          }
        } else if (owner[i] == -1) {
          const long n = read_available(coord_.fd(), coord_frames_.sink());
          while (auto m = coord_frames_.next()) {
            if (std::holds_alternative<proto::Heartbeat>(*m)) last_heartbeat = Clock::now();
            handle_coordinator(*m);
          }
          if (n == 0) mark_lost("connection closed");
        } else {
          const auto r = static_cast<uint32_t>(owner[i]);
          // A half-close is how a finalizing peer says it will send no more;
          // it only matters to receives still waiting on that peer.
          if (!pump_peer(r)) peers_[r]->eof = true;
          notify_all();
        }
      }
    } catch (const ProtocolError& e) {
      // A corrupt coordinator stream and a corrupt peer stream are both
      // unrecoverable for this rank.
      auto c = core_.lock("RuntimeCore");
      c->fatal = e.what();
      notify_all();
    } catch (const TransportError& e) {
      auto c = core_.lock("RuntimeCore");
      if (!c->finalizing) c->fatal = e.what();
      notify_all();
    }

    const auto now = Clock::now();
    if (coord_open && keepalive_ms_ > 0 &&
        now - last_heartbeat > milliseconds(uint64_t{keepalive_ms_} * std::max<uint32_t>(1, misses_))) {
      mark_lost(fmt::format("no heartbeat for {} ms", uint64_t{keepalive_ms_} * misses_));
    }

    bool report = false;
    {
      auto c = core_.lock("RuntimeCore");
      if (c->control.drain_requested && !c->control.coordinator_lost &&
          (c->report_now || now - last_report >= milliseconds(drain_tick_ms_))) {
        report = true;
      }
      c->report_now = false;
    }
    if (report && coord_open) {
      send_drain_report();
      last_report = now;
    }
    adjust_inbox_chunks();
  }
}

// ---------------------------------------------------------------------------
// plumbing

void Runtime::wake_progress() {
  if (wake_fd_ < 0) return;
  const uint64_t one = 1;
  [[maybe_unused]] auto n = ::write(wake_fd_, &one, sizeof(one));
}

void Runtime::notify_all() {
  {
    std::lock_guard lk(notify_mu_);
    ++notify_gen_;
  }
  notify_cv_.notify_all();
}

uint64_t Runtime::generation() {
  std::lock_guard lk(notify_mu_);
  return notify_gen_;
}

void Runtime::wait_for_change(uint64_t seen, milliseconds timeout) {
  std::unique_lock lk(notify_mu_);
  notify_cv_.wait_for(lk, timeout, [&] { return notify_gen_ != seen; });
}

void Runtime::stop_progress() {
  stop_ = true;
  wake_progress();
  if (progress_.joinable()) progress_.join();
}

void Runtime::teardown() {
  stop_progress();
  for (auto& p : peers_) {
    if (!p) continue;
    p->sock.close();
  }
  coord_.close();
  listener_.close();
  if (wake_fd_ >= 0) {
    ::close(wake_fd_);
    wake_fd_ = -1;
  }
  try {
    auto fds = fds_.lock("FdRegistry");
    for (auto& p : peers_) {
      if (p && p->vfd >= 0) fds->release(std::exchange(p->vfd, -1));
    }
    if (coord_vfd_ >= 0) fds->release(std::exchange(coord_vfd_, -1));
    if (listen_vfd_ >= 0) fds->release(std::exchange(listen_vfd_, -1));
  } catch (const std::exception& e) {
    spdlog::warn("releasing runtime fds: {}", e.what());
  }
  try {
    auto mem = memory_.lock("AddressSpace");
    for (uint64_t s : inbox_chunks_) mem->release(s);
    for (uint64_t s : lower_regions_) mem->release(s);
  } catch (const std::exception& e) {
    spdlog::warn("releasing runtime regions: {}", e.what());
  }
  inbox_chunks_.clear();
  lower_regions_.clear();
}

}  // namespace splitckpt
