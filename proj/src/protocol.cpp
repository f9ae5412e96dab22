#include "splitckpt/protocol.hpp"

#include <fmt/format.h>

namespace splitckpt::proto {

namespace {

constexpr uint32_t kMaxFrame = 1u << 24;

template <class... Ts>
struct Overload : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overload(Ts...) -> Overload<Ts...>;

void encode_body(ByteWriter& w, const Message& m) {
  std::visit(
      Overload{
          [&](const Register& r) {
            w.u32(r.rank);
            w.u32(r.world);
            w.u32(r.epoch);
            w.u8(static_cast<uint8_t>(r.mode));
            w.u64(r.requested_uid);
            w.u32(r.pid);
            w.u16(r.listen_port);
            w.str(r.node);
          },
          [&](const Heartbeat& h) { w.u64(h.seq); },
          [&](const HeartbeatAck& h) { w.u64(h.seq); },
          [&](const CkptRequest& c) {
            w.u32(c.epoch);
            w.u64(c.min_poll);
            w.str(c.backend);
          },
          [&](const DrainReport& d) {
            w.u32(d.epoch);
            w.u64(d.bytes_sent);
            w.u64(d.bytes_received);
            w.u32(d.pending_ops);
            w.u64(d.poll_count);
            w.u8(d.at_cut);
            w.u64(d.messages_sent);
            w.u64(d.messages_received);
          },
          [&](const QuiesceOk& q) { w.u32(q.epoch); },
          [&](const WriteImage& wi) { w.bytes(std::as_bytes(std::span(wi.path))); },
          [&](const Done& d) {
            w.u64(d.bytes);
            w.u64(d.ms);
          },
          [&](const CkptAbort& a) {
            w.u32(a.epoch);
            w.str(a.reason);
          },
          [&](const RestartDone& r) { w.u32(r.epoch); },
          [&](const Deregister&) {},
          [&](const RegisterAck& a) {
            w.u64(a.uid);
            w.u32(a.keepalive_ms);
            w.u32(a.misses);
            w.u32(a.drain_tick_ms);
            w.u32(static_cast<uint32_t>(a.peers.size()));
            for (const auto& p : a.peers) {
              w.str(p.host);
              w.u16(p.port);
            }
          },
          [&](const RegisterReject& r) { w.str(r.reason); },
          [&](const Resume& r) { w.u32(r.epoch); },
          [&](const Advance& a) {
            w.u32(a.epoch);
            w.u64(a.target_poll);
          },
          [&](const WriteFailed& f) {
            w.u32(f.epoch);
            w.u8(static_cast<uint8_t>(f.kind));
            w.u64(f.required);
            w.u64(f.available);
            w.str(f.message);
          },
          [&](const Trigger& t) {
            w.str(t.backend);
            w.str(t.out_dir);
            w.u64(t.min_poll);
          },
          [&](const TriggerResult& t) {
            w.u8(t.ok);
            w.str(t.text);
          },
      },
      m);
}

}  // namespace

MsgType type_of(const Message& m) { return static_cast<MsgType>(m.index() + 1); }

const char* to_string(MsgType t) {
  switch (t) {
    case MsgType::Register: return "REGISTER";
    case MsgType::Heartbeat: return "HEARTBEAT";
    case MsgType::HeartbeatAck: return "HEARTBEAT_ACK";
    case MsgType::CkptRequest: return "CKPT_REQUEST";
    case MsgType::DrainReport: return "DRAIN_REPORT";
    case MsgType::QuiesceOk: return "QUIESCE_OK";
    case MsgType::WriteImage: return "WRITE_IMAGE";
    case MsgType::Done: return "DONE";
    case MsgType::CkptAbort: return "CKPT_ABORT";
    case MsgType::RestartDone: return "RESTART_DONE";
    case MsgType::Deregister: return "DEREGISTER";
    case MsgType::RegisterAck: return "REGISTER_ACK";
    case MsgType::RegisterReject: return "REGISTER_REJECT";
    case MsgType::Resume: return "RESUME";
    case MsgType::Advance: return "ADVANCE";
    case MsgType::WriteFailed: return "WRITE_FAILED";
    case MsgType::Trigger: return "TRIGGER";
    case MsgType::TriggerResult: return "TRIGGER_RESULT";
  }
  return "UNKNOWN";
}

Bytes encode(const Message& m) {
  ByteWriter w;
  w.u32(0);
  w.u16(static_cast<uint16_t>(type_of(m)));
  encode_body(w, m);
  w.patch_u32(0, static_cast<uint32_t>(w.size() - 4));
  return w.take();
}

Message decode(std::span<const std::byte> body) {
  ByteReader r(body);
  const auto type = static_cast<MsgType>(r.u16());
  Message out;
  switch (type) {
    case MsgType::Register: {
      Register m;
      m.rank = r.u32();
      m.world = r.u32();
      m.epoch = r.u32();
      const uint8_t mode = r.u8();
      if (mode > 1) throw ProtocolError("bad launch mode");
      m.mode = static_cast<LaunchMode>(mode);
      m.requested_uid = r.u64();
      m.pid = r.u32();
      m.listen_port = r.u16();
      m.node = r.str();
      out = m;
      break;
    }
    case MsgType::Heartbeat: out = Heartbeat{r.u64()}; break;
    case MsgType::HeartbeatAck: out = HeartbeatAck{r.u64()}; break;
    case MsgType::CkptRequest: {
      CkptRequest m;
      m.epoch = r.u32();
      m.min_poll = r.u64();
      m.backend = r.str();
      out = m;
      break;
    }
    case MsgType::DrainReport: {
      DrainReport m;
      m.epoch = r.u32();
      m.bytes_sent = r.u64();
      m.bytes_received = r.u64();
      m.pending_ops = r.u32();
      m.poll_count = r.u64();
      m.at_cut = r.u8();
      m.messages_sent = r.u64();
      m.messages_received = r.u64();
      out = m;
      break;
    }
    case MsgType::QuiesceOk: out = QuiesceOk{r.u32()}; break;
    case MsgType::WriteImage: out = WriteImage{splitckpt::to_string(r.bytes(r.remaining()))}; break;
    case MsgType::Done: {
      Done m;
      m.bytes = r.u64();
      m.ms = r.u64();
      out = m;
      break;
    }
    case MsgType::CkptAbort: {
      CkptAbort m;
      m.epoch = r.u32();
      m.reason = r.str();
      out = m;
      break;
    }
    case MsgType::RestartDone: out = RestartDone{r.u32()}; break;
    case MsgType::Deregister: out = Deregister{}; break;
    case MsgType::RegisterAck: {
      RegisterAck m;
      m.uid = r.u64();
      m.keepalive_ms = r.u32();
      m.misses = r.u32();
      m.drain_tick_ms = r.u32();
      const uint32_t n = r.u32();
      if (n > 1u << 16) throw ProtocolError("peer table too large");
      for (uint32_t i = 0; i < n; ++i) {
        PeerAddress p;
        p.host = r.str();
        p.port = r.u16();
        m.peers.push_back(std::move(p));
      }
      out = m;
      break;
    }
    case MsgType::RegisterReject: out = RegisterReject{r.str()}; break;
    case MsgType::Resume: out = Resume{r.u32()}; break;
    case MsgType::Advance: {
      Advance m;
      m.epoch = r.u32();
      m.target_poll = r.u64();
      out = m;
      break;
    }
    case MsgType::WriteFailed: {
      WriteFailed m;
      m.epoch = r.u32();
      m.kind = static_cast<WriteFailure>(r.u8());
      m.required = r.u64();
      m.available = r.u64();
      m.message = r.str();
      out = m;
      break;
    }
    case MsgType::Trigger: {
      Trigger m;
      m.backend = r.str();
      m.out_dir = r.str();
      m.min_poll = r.u64();
      out = m;
      break;
    }
    case MsgType::TriggerResult: {
      TriggerResult m;
      m.ok = r.u8();
      m.text = r.str();
      out = m;
      break;
    }
    default:
      throw ProtocolError(fmt::format("unknown message type {}", static_cast<unsigned>(type)));
  }
  if (!r.done()) {
    throw ProtocolError(fmt::format("{} frame has {} trailing bytes", to_string(type), r.remaining()));
  }
  return out;
}

std::optional<Message> FrameBuffer::next() {
  const std::size_t avail = buf_.size() - head_;
  if (avail < 4) return std::nullopt;
  ByteReader r(std::span<const std::byte>(buf_).subspan(head_, 4));
  const uint32_t len = r.u32();
  if (len < 2 || len > kMaxFrame) throw ProtocolError(fmt::format("bad frame length {}", len));
  if (avail < 4 + std::size_t{len}) return std::nullopt;
  Message m = decode(std::span<const std::byte>(buf_).subspan(head_ + 4, len));
  head_ += 4 + len;
  if (head_ == buf_.size()) {
    buf_.clear();
    head_ = 0;
  } else if (head_ > 65536) {
    buf_.erase(buf_.begin(), buf_.begin() + static_cast<std::ptrdiff_t>(head_));
    head_ = 0;
  }
  return m;
}

void send_message(int fd, const Message& m) { send_all(fd, encode(m)); }

std::optional<Message> recv_message(int fd, std::chrono::milliseconds timeout) {
  std::byte len_buf[4];
  if (!recv_exact(fd, len_buf, timeout)) return std::nullopt;
  ByteReader r(len_buf);
  const uint32_t len = r.u32();
  if (len < 2 || len > kMaxFrame) throw ProtocolError(fmt::format("bad frame length {}", len));
  Bytes body(len);
  if (!recv_exact(fd, body, timeout)) throw TransportError("timed out mid-frame");
  return decode(body);
}

}  // namespace splitckpt::proto
