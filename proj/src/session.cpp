#include "splitckpt/session.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <cstring>

#include "splitckpt/manifest.hpp"
#include "splitckpt/storage.hpp"

namespace splitckpt {

namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;
using std::chrono::milliseconds;

namespace {

Bytes encode_meta(uint64_t poll, const std::string& app, const std::vector<std::string>& args) {
  ByteWriter w;
  w.u64(poll);
  w.str(app);
  w.u32(static_cast<uint32_t>(args.size()));
  for (const auto& a : args) w.str(a);
  return w.take();
}

RuntimeConfig runtime_config(const SessionOptions& o, proto::LaunchMode mode, uint32_t epoch) {
  RuntimeConfig c;
  c.world_size = o.world_size;
  c.rank = o.rank;
  c.coordinator = o.coordinator;
  c.mode = mode;
  c.epoch = epoch;
  c.requested_uid = o.requested_uid;
  c.node = o.node;
  c.connect_timeout = o.connect_timeout;
  c.register_timeout = o.register_timeout;
  c.peer_timeout = o.peer_timeout;
  return c;
}

}  // namespace

RankSession::RankSession(const SessionOptions& opts)
    : opts_(opts), rank_(opts.rank), world_(opts.world_size) {
  rt_ = std::make_unique<Runtime>(memory_, fds_);
}

RankSession::~RankSession() = default;

std::unique_ptr<RankSession> RankSession::launch(const SessionOptions& opts, const std::string& app,
                                                 const std::vector<std::string>& args) {
  std::unique_ptr<RankSession> s(new RankSession(opts));
  s->app_ = app;
  s->args_ = args;
  {
    auto fds = s->fds_.lock("FdRegistry");
    fds->reserve(0, Half::Upper, "stdin");
    fds->reserve(1, Half::Upper, "stdout");
    fds->reserve(2, Half::Upper, "stderr");
  }
  const Bytes meta = encode_meta(0, app, args);
  const uint64_t start = s->alloc_upper(round_up_to_page(meta.size()), kMetaLabel);
  s->meta_ = s->memory_.lock("AddressSpace")->payload(start);
  std::memcpy(s->meta_.data(), meta.data(), meta.size());

  s->rt_->mp_init(runtime_config(opts, proto::LaunchMode::Fresh, 0));
  return s;
}

std::unique_ptr<RankSession> RankSession::restart_from_manifest(const fs::path& manifest,
                                                                SessionOptions opts) {
  const Manifest m = read_manifest(manifest);
  if (opts.world_size != 0 && opts.world_size != m.world_size) {
    throw RestartError(fmt::format("manifest world {} but this rank was started in a world of {}",
                                   m.world_size, opts.world_size));
  }
  opts.world_size = m.world_size;
  auto it = m.entries.find(opts.rank);
  if (it == m.entries.end()) throw MissingRank(opts.rank);
  return restart_rank(it->second, opts);
}

std::unique_ptr<RankSession> RankSession::restart_rank(const fs::path& image,
                                                       const SessionOptions& opts) {
  // (1) parse
  const CheckpointImage img = read_image_file(image);
  if (img.rank != opts.rank || img.world_size != opts.world_size) {
    throw RestartError(fmt::format("image {} is rank {}/{} but this is rank {}/{}", image.string(),
                                   img.rank, img.world_size, opts.rank, opts.world_size));
  }
  std::unique_ptr<RankSession> s(new RankSession(opts));
  s->restarted_ = true;
  s->restored_epoch_ = img.epoch;

  // (2) Upper fds first, so the fresh lower half cannot take their numbers.
  {
    auto fds = s->fds_.lock("FdRegistry");
    for (const auto& f : img.fds) {
      if (f.half == Half::Upper) fds->reserve(static_cast<int>(f.fd), Half::Upper, f.description);
    }
  }

  // (3) trivial lower half, (4) replay.
  s->rt_->mp_init(runtime_config(opts, proto::LaunchMode::Restart, img.epoch));
  s->rt_->replay_log(img.call_log);

  // (5) Upper regions at their original addresses.
  for (const auto& r : img.regions) {
    if (r.tag != Half::Upper) continue;
    auto mem = s->memory_.lock("AddressSpace");
    auto diagnostic = [&](const std::exception& e) {
      return fmt::format("restoring upper region '{}' at {:#x}+{:#x}: {}\nlive region table:\n{}image region table:\n{}",
                         r.label, r.start, r.length, e.what(), mem->dump(), dump_regions(img));
    };
    try {
      mem->reserve_fixed(r.start, r.length, Half::Upper, r.label);
    } catch (const OverlapError& e) {
      throw OverlapError(diagnostic(e), e.conflicts());
    } catch (const ArenaViolation& e) {
      throw ArenaViolation(diagnostic(e));
    } catch (const AlignmentError& e) {
      throw AlignmentError(diagnostic(e));
    } catch (const RegionError& e) {
      throw RestartError(diagnostic(e));
    }
    auto dst = mem->payload(r.start);
    std::memcpy(dst.data(), r.payload.data(), r.payload.size());
  }
  s->load_meta();

  // (6) pending messages, (7) restart barrier.
  s->rt_->restore_pending(img.pending);
  s->rt_->report_restart_done(img.epoch);
  const auto deadline = Clock::now() + opts.register_timeout;
  uint64_t seen = 0;
  while (true) {
    const ControlView v = s->rt_->wait_control(seen, milliseconds(500));
    seen = v.generation;
    if (v.restart_released) break;
    if (v.coordinator_lost) throw CoordinatorLost("coordinator lost during restart barrier");
    if (Clock::now() >= deadline) throw RestartError("timed out waiting for the restart barrier");
  }
  s->rt_->leave_drain();
  s->rt_->note_poll(s->poll_);
  spdlog::info("(rank {}, {}, uid {}) restarted from epoch {} at poll {}", s->rank_,
               s->rt_->identity().node, s->rt_->identity().uid, img.epoch, s->poll_);
  return s;
}

void RankSession::load_meta() {
  auto start = find_upper(kMetaLabel);
  if (!start) throw RestartError("image has no session.meta region");
  meta_ = memory_.lock("AddressSpace")->payload(*start);
  ByteReader r(meta_);
  poll_ = r.u64();
  app_ = r.str();
  const uint32_t n = r.u32();
  args_.clear();
  for (uint32_t i = 0; i < n; ++i) args_.push_back(r.str());
}

void RankSession::write_meta_poll() {
  for (int i = 0; i < 8; ++i) meta_[i] = std::byte(static_cast<uint8_t>(poll_ >> (8 * i)));
}

uint64_t RankSession::alloc_upper(uint64_t bytes, const std::string& label) {
  auto mem = memory_.lock("AddressSpace");
  return mem->reserve_any(round_up_to_page(std::max<uint64_t>(bytes, 1)), Half::Upper, label).start;
}

std::optional<uint64_t> RankSession::find_upper(const std::string& label) {
  auto mem = memory_.lock("AddressSpace");
  const MemoryRegion* r = mem->find_label(label);
  if (!r || r->tag != Half::Upper) return std::nullopt;
  return r->start;
}

std::span<std::byte> RankSession::upper(const std::string& label) {
  auto mem = memory_.lock("AddressSpace");
  const MemoryRegion* r = mem->find_label(label);
  if (!r || r->tag != Half::Upper) throw UnknownRegion("no upper region labelled " + label);
  return mem->payload(r->start);
}

void RankSession::release_upper(const std::string& label) {
  auto mem = memory_.lock("AddressSpace");
  const MemoryRegion* r = mem->find_label(label);
  if (!r || r->tag != Half::Upper) throw UnknownRegion("no upper region labelled " + label);
  mem->release(r->start);
}

void RankSession::ckpt_poll() {
  ++poll_;
  write_meta_poll();
  if (auto order = rt_->checkpoint_due(poll_)) park(*order);
}

void RankSession::park(const ControlView& order) {
  const uint32_t epoch = order.epoch;
  CheckpointNote note{epoch, poll_, false, false, {}};
  rt_->enter_drain(epoch);
  uint64_t seen = 0;
  while (true) {
    const ControlView v = rt_->wait_control(seen, milliseconds(1000));
    seen = v.generation;
    if (v.coordinator_lost) {
      note.outcome = "coordinator lost";
      break;
    }
    if (v.epoch != epoch) {
      note.outcome = "superseded";
      break;
    }
    if (v.aborted) {
      note.outcome = "aborted: " + v.abort_reason;
      break;
    }
    if (v.resumed) {
      note.completed = note.written;
      note.outcome = "resumed";
      break;
    }
    if (v.write_path && !note.written) {
      write_image(v, *v.write_path);
      note.written = true;
      continue;
    }
    if (!note.written && v.drain_requested && v.target_poll > poll_) {
      note.outcome = "advanced";
      break;
    }
  }
  rt_->leave_drain();
  if (note.outcome != "advanced") notes_.push_back(note);
}

void RankSession::write_image(const ControlView& order, const std::string& path) {
  const auto id = rt_->identity();
  try {
    StorageBackend backend = StorageBackend::parse(order.backend, fs::path(path).parent_path());
    backend.writers = world_;
    const Bytes bytes = serialize_image(capture_image(order.epoch));
    const ImageReceipt receipt = write_image_file(backend, path, bytes);
    const auto ms = static_cast<uint64_t>(
        std::chrono::duration_cast<milliseconds>(receipt.duration).count());
    spdlog::debug("(rank {}, {}, uid {}) wrote {} ({} bytes, {} ms)", id.rank, id.node, id.uid,
                  path, receipt.bytes, ms);
    rt_->report_write_done(receipt.bytes, ms);
  } catch (const InsufficientSpace& e) {
    spdlog::warn("(rank {}, {}, uid {}) {}", id.rank, id.node, id.uid, e.what());
    rt_->report_write_failed({order.epoch, proto::WriteFailure::InsufficientSpace, e.required(),
                              e.available(), e.what()});
  } catch (const IoError& e) {
    spdlog::warn("(rank {}, {}, uid {}) {}", id.rank, id.node, id.uid, e.what());
    rt_->report_write_failed({order.epoch, proto::WriteFailure::Io, 0, 0, e.what()});
  } catch (const std::exception& e) {
    spdlog::warn("(rank {}, {}, uid {}) image write failed: {}", id.rank, id.node, id.uid, e.what());
    rt_->report_write_failed({order.epoch, proto::WriteFailure::Other, 0, 0, e.what()});
  }
}

CheckpointImage RankSession::capture_image(uint32_t epoch) {
  CheckpointImage img;
  img.epoch = epoch;
  img.rank = rank_;
  img.world_size = world_;
  img.uid = rt_->identity().uid;
  {
    auto mem = memory_.lock("AddressSpace");
    for (const auto& [start, r] : mem->regions()) {
      ImageRegion ir{r.start, r.length, r.tag, r.label, {}};
      if (r.tag == Half::Upper) ir.payload = r.payload;
      img.regions.push_back(std::move(ir));
    }
  }
  img.call_log = rt_->call_log();
  img.pending = rt_->pending_messages();
  {
    auto fds = fds_.lock("FdRegistry");
    for (const auto& e : fds->entries()) {
      img.fds.push_back({static_cast<uint32_t>(e.fd), e.half, e.description});
    }
  }
  return img;
}

void RankSession::finalize() { rt_->mp_finalize(); }

}  // namespace splitckpt
