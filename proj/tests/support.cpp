#include "support.hpp"

#include <poll.h>
#include <unistd.h>

#include <spdlog/spdlog.h>

#include <cstdlib>
#include <random>
#include <set>

#include <fmt/format.h>

namespace splitckpt::testing {

namespace fs = std::filesystem;

namespace {

struct QuietLogs {
  QuietLogs() {
    const char* lvl = std::getenv("SPLITCKPT_LOG");
    spdlog::set_level(spdlog::level::from_str(lvl ? lvl : "error"));
  }
} quiet_logs;

}  // namespace

TempDir::TempDir() {
  std::random_device rd;
  for (int i = 0; i < 100; ++i) {
    path_ = fs::temp_directory_path() / fmt::format("splitckpt-test-{:08x}", rd());
    if (fs::create_directory(path_)) return;
  }
  throw std::runtime_error("cannot create temp dir");
}

TempDir::~TempDir() {
  std::error_code ec;
  fs::remove_all(path_, ec);
}

CoordinatorConfig fast_config() {
  CoordinatorConfig c;
  c.keepalive_ms = 1000;
  c.misses = 3;
  c.drain_tick_ms = 5;
  c.ckpt_timeout_ms = 60000;
  return c;
}

TestCoordinator::TestCoordinator(CoordinatorConfig cfg) : c_(std::make_unique<Coordinator>(cfg)) { c_->start(); }

TestCoordinator::~TestCoordinator() { c_->stop(); }

WorldOptions world_options(const Endpoint& coord, uint32_t world, const std::string& app,
                           std::vector<std::string> args) {
  WorldOptions o;
  o.world_size = world;
  o.app = app;
  o.args = std::move(args);
  o.coordinator = coord;
  o.register_timeout = std::chrono::seconds(60);
  o.peer_timeout = std::chrono::seconds(60);
  return o;
}

TcpProxy::TcpProxy(Endpoint upstream) : upstream_(std::move(upstream)) {
  listener_ = listen_tcp({"127.0.0.1", 0});
  endpoint_ = {"127.0.0.1", local_port(listener_)};
  thread_ = std::thread([this] { run(); });
}

TcpProxy::~TcpProxy() {
  stop_ = true;
  thread_.join();
}

void TcpProxy::run() {
  struct Pair {
    Socket a, b;
    bool done = false;
  };
  std::vector<Pair> pairs;
  std::vector<std::byte> buf(64 * 1024);
  while (!stop_) {
    std::vector<pollfd> pfds{{listener_.fd(), POLLIN, 0}};
    std::vector<std::size_t> owner;
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      if (pairs[i].done) continue;
      pfds.push_back({pairs[i].a.fd(), POLLIN, 0});
      pfds.push_back({pairs[i].b.fd(), POLLIN, 0});
      owner.push_back(i);
    }
    if (::poll(pfds.data(), pfds.size(), 20) <= 0) continue;
    if (pfds[0].revents & POLLIN) {
      if (auto a = accept_tcp(listener_, std::chrono::milliseconds(0))) {
        if (auto b = connect_tcp(upstream_, std::chrono::seconds(5))) pairs.push_back({std::move(*a), std::move(*b)});
      }
    }
    for (std::size_t k = 0; k < owner.size(); ++k) {
      Pair& p = pairs[owner[k]];
      for (int side = 0; side < 2 && !p.done; ++side) {
        if (!(pfds[1 + 2 * k + side].revents & (POLLIN | POLLHUP | POLLERR))) continue;
        Socket& from = side == 0 ? p.a : p.b;
        Socket& to = side == 0 ? p.b : p.a;
        const ssize_t n = ::read(from.fd(), buf.data(), buf.size());
        if (n <= 0) {
          // A blackholed path delivers no FIN either: keep both ends open.
          if (!blackhole_) {
            p.a.close();
            p.b.close();
          }
          p.done = true;
          continue;
        }
        if (blackhole_) continue;
        try {
          send_all(to.fd(), std::span(buf.data(), static_cast<std::size_t>(n)));
        } catch (const std::exception&) {
        }
      }
    }
  }
}

fs::path cli_path() { return SPLITCKPT_CLI_PATH; }

}  // namespace splitckpt::testing

namespace splitckpt::testing {

CheckpointImage random_image(uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto pick = [&](uint64_t n) { return n == 0 ? 0 : rng() % n; };
  CheckpointImage img;
  img.epoch = static_cast<uint32_t>(pick(1000));
  img.world_size = static_cast<uint32_t>(1 + pick(8));
  img.rank = static_cast<uint32_t>(pick(img.world_size));
  img.uid = rng();
  uint64_t upper_at = 0x10000;
  uint64_t lower_at = uint64_t{1} << 40;
  const auto nreg = pick(6);
  for (uint64_t i = 0; i < nreg; ++i) {
    ImageRegion r;
    r.length = (1 + pick(3)) * kPageSize;
    r.label = fmt::format("r{}.{}", i, std::string(pick(40), 'x'));
    if (rng() % 3 == 0) {
      r.tag = Half::Lower;
      r.start = lower_at;
      lower_at += r.length + kPageSize;
    } else {
      r.tag = Half::Upper;
      r.start = upper_at;
      upper_at += r.length + pick(4) * kPageSize;
      r.payload.resize(r.length);
      for (auto& b : r.payload) b = std::byte(static_cast<uint8_t>(rng()));
    }
    img.regions.push_back(std::move(r));
  }
  CallLogEntry init;
  init.seq = 1;
  init.opcode = Opcode::Init;
  init.args = {img.world_size, img.rank, 0, 0};
  img.call_log.push_back(init);
  const auto nsplit = pick(4);
  for (uint64_t i = 0; i < nsplit; ++i) {
    CallLogEntry e;
    e.seq = img.call_log.back().seq + 1;
    e.opcode = Opcode::CommSplit;
    e.args = {pick(i + 1), encode_signed(static_cast<int64_t>(pick(5)) - 2), pick(10), 0};
    e.result = i + 1;
    img.call_log.push_back(e);
  }
  const auto npend = pick(4);
  for (uint64_t i = 0; i < npend; ++i) {
    PendingMessage m;
    m.source = static_cast<uint32_t>(pick(img.world_size));
    m.dest = img.rank;
    m.comm = static_cast<CommId>(pick(3));
    m.tag = static_cast<int32_t>(pick(100));
    m.payload.resize(pick(300));
    for (auto& b : m.payload) b = std::byte(static_cast<uint8_t>(rng()));
    img.pending.push_back(std::move(m));
  }
  const auto nfd = pick(5);
  std::set<uint32_t> used;
  for (uint64_t i = 0; i < nfd; ++i) {
    ImageFd f;
    f.half = rng() % 2 ? Half::Lower : Half::Upper;
    f.fd = static_cast<uint32_t>(f.half == Half::Lower ? 900 + pick(100) : pick(900));
    if (!used.insert(f.fd).second) continue;
    f.description = std::string(pick(128), 'd');
    img.fds.push_back(std::move(f));
  }
  return img;
}

uint64_t expected_image_size(const CheckpointImage& img) {
  uint64_t n = 64;
  n += 4 + img.regions.size() * (8 + 8 + 1 + 64 + 8) + 4;
  for (const auto& r : img.regions) n += r.payload.size();
  n += 4 + img.call_log.size() * (8 + 1 + 32 + 8) + 4;
  n += 4 + 4;
  for (const auto& m : img.pending) n += 4 * 4 + 8 + m.payload.size();
  n += 4 + img.fds.size() * (4 + 1 + 128) + 4;
  return n;
}

}  // namespace splitckpt::testing
