#include "splitckpt/apps.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <cstring>
#include <mutex>
#include <random>
#include <tuple>

#include "splitckpt/digest.hpp"
#include "splitckpt/storage.hpp"

namespace splitckpt {

// ---------------------------------------------------------------------------
// Params

Params::Params(const std::vector<std::string>& args) {
  for (const auto& a : args) {
    const auto eq = a.find('=');
    if (eq == std::string::npos || eq == 0) throw InvalidParams(fmt::format("argument '{}' is not key=value", a));
    kv_[a.substr(0, eq)] = a.substr(eq + 1);
  }
}

void Params::allow(std::initializer_list<const char*> keys) const {
  for (const auto& [k, v] : kv_) {
    if (std::none_of(keys.begin(), keys.end(), [&](const char* x) { return k == x; })) {
      throw InvalidParams(fmt::format("unknown parameter '{}'", k));
    }
  }
}

uint64_t Params::u64(const std::string& key, uint64_t fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::size_t used = 0;
  uint64_t v = 0;
  try {
    v = std::stoull(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (it->second.empty() || used != it->second.size() || it->second[0] == '-') {
    throw InvalidParams(fmt::format("{}={} is not a non-negative integer", key, it->second));
  }
  return v;
}

double Params::f64(const std::string& key, double fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  std::size_t used = 0;
  double v = 0;
  try {
    v = std::stod(it->second, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != it->second.size()) {
    throw InvalidParams(fmt::format("{}={} is not a number", key, it->second));
  }
  return v;
}

uint64_t Params::size(const std::string& key, uint64_t fallback) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return fallback;
  try {
    return parse_size(it->second);
  } catch (const std::exception& e) {
    throw InvalidParams(fmt::format("{}: {}", key, e.what()));
  }
}

std::string Params::str(const std::string& key, const std::string& fallback) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? fallback : it->second;
}

// ---------------------------------------------------------------------------
// registry

namespace {

std::mutex g_registry_mu;

std::map<std::string, AppFactory>& registry();

template <class T>
std::span<T> view(RankSession& s, const std::string& label) {
  return as_span<T>(s.upper(label));
}

template <class T>
T& state_of(RankSession& s, const std::string& label) {
  return view<T>(s, label)[0];
}

template <class T>
T& alloc_state(RankSession& s, const std::string& label) {
  s.alloc_upper(sizeof(T), label);
  auto& st = state_of<T>(s, label);
  st = T{};
  return st;
}

/// Filler that makes the image size controllable from the command line.
void alloc_pad(RankSession& s, uint64_t bytes) {
  if (bytes == 0) return;
  s.alloc_upper(bytes, "app.pad");
  auto words = view<uint64_t>(s, "app.pad");
  uint64_t x = 0x9E3779B97F4A7C15ull * (s.rank() + 1);
  for (auto& w : words) {
    x ^= x << 13;
    x ^= x >> 7;
    x ^= x << 17;
    w = x;
  }
}

Bytes as_bytes_of(std::span<const double> v) {
  Bytes b(v.size() * sizeof(double));
  if (!v.empty()) std::memcpy(b.data(), v.data(), b.size());
  return b;
}

double to_double(const Bytes& b) {
  if (b.size() != sizeof(double)) throw ProtocolError(fmt::format("expected 8-byte halo, got {}", b.size()));
  double d;
  std::memcpy(&d, b.data(), sizeof d);
  return d;
}

std::span<const std::byte> bytes_of(const double& d) {
  return {reinterpret_cast<const std::byte*>(&d), sizeof d};
}

/// Rank 0 collects every rank's block (in rank order) into one vector.
std::vector<double> gather_blocks(RankSession& s, std::span<const double> local, int32_t tag) {
  Runtime& rt = s.rt();
  if (s.rank() != 0) {
    rt.mp_send(0, kWorldComm, tag, std::as_bytes(local));
    return {};
  }
  std::vector<double> all(local.begin(), local.end());
  for (uint32_t r = 1; r < s.world_size(); ++r) {
    const Bytes b = rt.mp_recv(r, kWorldComm, tag);
    const std::size_t n = b.size() / sizeof(double);
    const std::size_t at = all.size();
    all.resize(at + n);
    std::memcpy(all.data() + at, b.data(), n * sizeof(double));
  }
  return all;
}

// ---------------------------------------------------------------------------
// ring: a token per rank circulates to the right, mutated at every hop.

class RingApp final : public App {
 public:
  explicit RingApp(const Params& p) {
    p.allow({"steps", "msg", "pad"});
    steps_ = p.u64("steps", 100);
    msg_ = p.size("msg", 1024);
    pad_ = p.size("pad", 0);
    if (steps_ == 0) throw InvalidParams("ring: steps must be > 0");
    if (msg_ == 0 || msg_ > (16u << 20)) throw InvalidParams("ring: msg must be in (0, 16M]");
  }

  struct State {
    uint64_t step, steps, msg, sent, recv;
  };

  void start(RankSession& s) override {
    auto& st = alloc_state<State>(s, "ring.state");
    st.steps = steps_;
    st.msg = msg_;
    s.alloc_upper(msg_, "ring.token");
    auto tok = s.upper("ring.token").first(msg_);
    for (std::size_t i = 0; i < tok.size(); ++i) tok[i] = std::byte(static_cast<uint8_t>(s.rank() * 37 + i));
    alloc_pad(s, pad_);
    send(s, st, tok);
  }

  void resume(RankSession&) override {}

  bool step(RankSession& s) override {
    auto& st = state_of<State>(s, "ring.state");
    if (st.step == st.steps) return false;
    auto tok = receive(s, st);
    for (std::size_t i = 0; i < tok.size(); ++i) {
      tok[i] = std::byte(static_cast<uint8_t>(std::to_integer<uint8_t>(tok[i]) * 131 + s.rank() + st.step + i));
    }
    send(s, st, tok);
    ++st.step;
    return true;
  }

  std::string finish(RankSession& s) override {
    auto& st = state_of<State>(s, "ring.state");
    auto tok = receive(s, st);
    return fmt::format("ring rank={} sent={} recv={} sha256={}", s.rank(), st.sent, st.recv, sha256_hex(tok));
  }

 private:
  static uint32_t right(const RankSession& s) { return (s.rank() + 1) % s.world_size(); }
  static uint32_t left(const RankSession& s) { return (s.rank() + s.world_size() - 1) % s.world_size(); }

  void send(RankSession& s, State& st, std::span<const std::byte> tok) {
    s.rt().mp_send(right(s), kWorldComm, 7, tok);
    st.sent += tok.size();
  }

  std::span<std::byte> receive(RankSession& s, State& st) {
    const Bytes b = s.rt().mp_recv(left(s), kWorldComm, 7);
    auto tok = s.upper("ring.token").first(st.msg);
    if (b.size() != tok.size()) throw ProtocolError(fmt::format("ring token of {} bytes, expected {}", b.size(), tok.size()));
    std::memcpy(tok.data(), b.data(), b.size());
    st.recv += b.size();
    return tok;
  }

  uint64_t steps_, msg_, pad_;
};

// ---------------------------------------------------------------------------
// heat: 1-D explicit diffusion, one halo exchange per step.

class HeatApp final : public App {
 public:
  explicit HeatApp(const Params& p) {
    p.allow({"steps", "grid", "init", "pad"});
    steps_ = p.u64("steps", 100);
    grid_ = p.u64("grid", 4096);
    init_ = p.str("init", "ramp");
    pad_ = p.size("pad", 0);
    if (steps_ == 0) throw InvalidParams("heat: steps must be > 0");
    if (init_ != "ramp" && init_ != "zero" && init_ != "spike") throw InvalidParams("heat: init must be ramp, zero or spike");
  }

  struct State {
    uint64_t step, steps, grid, first, count;
  };

  void start(RankSession& s) override {
    if (grid_ < s.world_size()) {
      throw InvalidParams(fmt::format("heat: grid {} smaller than world {}", grid_, s.world_size()));
    }
    auto& st = alloc_state<State>(s, "heat.state");
    const auto b = apps::block_of(grid_, s.world_size(), s.rank());
    st.steps = steps_;
    st.grid = grid_;
    st.first = b.first;
    st.count = b.count;
    s.alloc_upper((b.count + 2) * sizeof(double), "heat.u");
    auto u = view<double>(s, "heat.u");
    const auto global = apps::heat_initial(grid_, init_);
    std::fill(u.begin(), u.end(), 0.0);
    std::copy_n(global.begin() + static_cast<std::ptrdiff_t>(b.first), b.count, u.begin() + 1);
    alloc_pad(s, pad_);
  }

  void resume(RankSession&) override {}

  bool step(RankSession& s) override {
    auto& st = state_of<State>(s, "heat.state");
    if (st.step == st.steps) return false;
    auto u = view<double>(s, "heat.u");
    const uint64_t n = st.count;
    Runtime& rt = s.rt();
    const uint32_t r = s.rank();
    const bool has_left = r > 0;
    const bool has_right = r + 1 < s.world_size();
    if (has_left) rt.mp_send(r - 1, kWorldComm, 1, bytes_of(u[1]));
    if (has_right) rt.mp_send(r + 1, kWorldComm, 2, bytes_of(u[n]));
    u[0] = has_left ? to_double(rt.mp_recv(r - 1, kWorldComm, 2)) : 0.0;
    u[n + 1] = has_right ? to_double(rt.mp_recv(r + 1, kWorldComm, 1)) : 0.0;
    next_.resize(n);
    for (uint64_t i = 1; i <= n; ++i) next_[i - 1] = apps::heat_update(u[i - 1], u[i], u[i + 1]);
    std::copy(next_.begin(), next_.end(), u.begin() + 1);
    ++st.step;
    return true;
  }

  std::string finish(RankSession& s) override {
    auto& st = state_of<State>(s, "heat.state");
    auto u = view<double>(s, "heat.u");
    const auto all = gather_blocks(s, u.subspan(1, st.count), 3);
    if (s.rank() != 0) return {};
    return fmt::format("heat sha256={}", sha256_hex(as_bytes_of(all)));
  }

 private:
  uint64_t steps_, grid_, pad_;
  std::string init_;
  std::vector<double> next_;
};

// ---------------------------------------------------------------------------
// cg: conjugate gradient on a row-partitioned SPD system.

class CgApp final : public App {
 public:
  explicit CgApp(const Params& p) {
    p.allow({"n", "system", "iters", "tol", "pad"});
    n_ = p.u64("n", 1024);
    system_ = p.str("system", "tridiag");
    iters_ = p.u64("iters", n_);
    tol_ = p.f64("tol", 1e-12);
    pad_ = p.size("pad", 0);
    if (system_ != "tridiag" && system_ != "identity") throw InvalidParams("cg: system must be tridiag or identity");
    if (iters_ == 0) throw InvalidParams("cg: iters must be > 0");
    if (!(tol_ >= 0.0)) throw InvalidParams("cg: tol must be >= 0");
  }

  struct State {
    uint64_t k, max_iters, n, first, count, done, identity;
    double rr, bb, tol;
  };

  void start(RankSession& s) override {
    if (n_ < s.world_size()) throw InvalidParams(fmt::format("cg: n {} smaller than world {}", n_, s.world_size()));
    auto& st = alloc_state<State>(s, "cg.state");
    const auto b = apps::block_of(n_, s.world_size(), s.rank());
    st.max_iters = iters_;
    st.n = n_;
    st.first = b.first;
    st.count = b.count;
    st.identity = system_ == "identity";
    st.tol = tol_;
    s.alloc_upper(b.count * sizeof(double), "cg.x");
    s.alloc_upper(b.count * sizeof(double), "cg.r");
    s.alloc_upper((b.count + 2) * sizeof(double), "cg.p");
    s.alloc_upper(b.count * sizeof(double), "cg.ap");
    auto x = view<double>(s, "cg.x");
    auto r = view<double>(s, "cg.r");
    auto p = view<double>(s, "cg.p");
    std::fill(x.begin(), x.end(), 0.0);
    std::fill(p.begin(), p.end(), 0.0);
    double local = 0.0;
    for (uint64_t i = 0; i < b.count; ++i) {
      const double bi = 1.0 + static_cast<double>((b.first + i) % 7);
      r[i] = bi;
      p[i + 1] = bi;
      local += bi * bi;
    }
    st.rr = st.bb = allreduce(s, local);
    st.done = st.rr == 0.0;
    alloc_pad(s, pad_);
  }

  void resume(RankSession&) override {}

  bool step(RankSession& s) override {
    auto& st = state_of<State>(s, "cg.state");
    if (st.done || st.k == st.max_iters) return false;
    auto x = view<double>(s, "cg.x");
    auto r = view<double>(s, "cg.r");
    auto p = view<double>(s, "cg.p");
    auto ap = view<double>(s, "cg.ap");
    const uint64_t n = st.count;
    exchange(s, p, n);
    double pap = 0.0;
    for (uint64_t i = 0; i < n; ++i) {
      ap[i] = st.identity ? p[i + 1] : 4.0 * p[i + 1] - p[i] - p[i + 2];
      pap += p[i + 1] * ap[i];
    }
    pap = allreduce(s, pap);
    const double alpha = st.rr / pap;
    double local = 0.0;
    for (uint64_t i = 0; i < n; ++i) {
      x[i] += alpha * p[i + 1];
      r[i] -= alpha * ap[i];
      local += r[i] * r[i];
    }
    const double rr_new = allreduce(s, local);
    ++st.k;
    if (rr_new <= st.tol * st.tol * st.bb) st.done = 1;
    const double beta = rr_new / st.rr;
    for (uint64_t i = 0; i < n; ++i) p[i + 1] = r[i] + beta * p[i + 1];
    st.rr = rr_new;
    return true;
  }

  std::string finish(RankSession& s) override {
    auto& st = state_of<State>(s, "cg.state");
    const auto all = gather_blocks(s, view<double>(s, "cg.x").first(st.count), 4);
    if (s.rank() != 0) return {};
    return fmt::format("cg iters={} sha256={}", st.k, sha256_hex(as_bytes_of(all)));
  }

 private:
  static double allreduce(RankSession& s, double v) {
    return s.rt().mp_allreduce_sum_f64(kWorldComm, std::span<const double>(&v, 1))[0];
  }

  static void exchange(RankSession& s, std::span<double> p, uint64_t n) {
    Runtime& rt = s.rt();
    const uint32_t r = s.rank();
    const bool has_left = r > 0;
    const bool has_right = r + 1 < s.world_size();
    if (has_left) rt.mp_send(r - 1, kWorldComm, 1, bytes_of(p[1]));
    if (has_right) rt.mp_send(r + 1, kWorldComm, 2, bytes_of(p[n]));
    p[0] = has_left ? to_double(rt.mp_recv(r - 1, kWorldComm, 2)) : 0.0;
    p[n + 1] = has_right ? to_double(rt.mp_recv(r + 1, kWorldComm, 1)) : 0.0;
  }

  uint64_t n_, iters_, pad_;
  std::string system_;
  double tol_;
};

// ---------------------------------------------------------------------------
// traffic: a seeded random point-to-point schedule; messages may stay in
// flight across several polls.

class TrafficApp final : public App {
 public:
  explicit TrafficApp(const Params& p) {
    p.allow({"seed", "messages", "steps", "max", "pad"});
    seed_ = p.u64("seed", 1);
    messages_ = p.u64("messages", 100);
    steps_ = p.u64("steps", 20);
    max_ = p.size("max", 64 << 10);
    pad_ = p.size("pad", 0);
    if (steps_ == 0) throw InvalidParams("traffic: steps must be > 0");
    if (messages_ > 100000) throw InvalidParams("traffic: at most 100000 messages");
    if (max_ > (16u << 20)) throw InvalidParams("traffic: max must be <= 16M");
  }

  struct State {
    uint64_t step, steps, seed, messages, max, received, corrupt;
  };
  struct Receipt {
    uint32_t index, src;
    int32_t tag;
    uint32_t size;
    uint64_t fnv;
  };

  void start(RankSession& s) override {
    auto& st = alloc_state<State>(s, "traffic.state");
    st.steps = steps_;
    st.seed = seed_;
    st.messages = messages_;
    st.max = max_;
    s.alloc_upper(std::max<uint64_t>(1, messages_) * sizeof(Receipt), "traffic.log");
    alloc_pad(s, pad_);
  }

  void resume(RankSession&) override {}

  bool step(RankSession& s) override {
    auto& st = state_of<State>(s, "traffic.state");
    if (st.step == st.steps) return false;
    if (schedule_.empty()) {
      schedule_ = apps::traffic_schedule(st.seed, s.world_size(), static_cast<uint32_t>(st.messages),
                                         static_cast<uint32_t>(st.steps), static_cast<uint32_t>(st.max));
    }
    auto log = view<Receipt>(s, "traffic.log");
    Runtime& rt = s.rt();
    for (const auto& m : schedule_) {
      if (m.src == s.rank() && m.send_step == st.step) {
        rt.mp_send(m.dst, kWorldComm, m.tag, apps::traffic_payload(st.seed, m));
      }
    }
    for (const auto& m : schedule_) {
      if (m.dst != s.rank() || m.recv_step != st.step) continue;
      const Bytes b = rt.mp_recv(m.src, kWorldComm, m.tag);
      if (b != apps::traffic_payload(st.seed, m)) ++st.corrupt;
      log[st.received++] = Receipt{m.index, m.src, m.tag, static_cast<uint32_t>(b.size()), fnv1a64(b)};
    }
    ++st.step;
    return true;
  }

  std::string finish(RankSession& s) override {
    auto& st = state_of<State>(s, "traffic.state");
    auto log = view<Receipt>(s, "traffic.log").first(st.received);
    ByteWriter w;
    for (const auto& r : log) {
      w.u32(r.index);
      w.u32(r.src);
      w.i32(r.tag);
      w.u32(r.size);
      w.u64(r.fnv);
    }
    const std::size_t leftover = s.rt().pending_messages().size();
    return fmt::format("traffic rank={} recv={} corrupt={} leftover={} sha256={}", s.rank(), st.received,
                       st.corrupt, leftover, sha256_hex(w.take()));
  }

 private:
  uint64_t seed_, messages_, steps_, max_, pad_;
  std::vector<apps::ScheduledMessage> schedule_;
};

// ---------------------------------------------------------------------------
// scatter: fragmented Upper regions and descriptors, for restart layout
// checks.

class ScatterApp final : public App {
 public:
  explicit ScatterApp(const Params& p) {
    p.allow({"seed", "regions", "fds", "steps", "pad"});
    seed_ = p.u64("seed", 1);
    regions_ = p.u64("regions", 6);
    fds_ = p.u64("fds", 4);
    steps_ = p.u64("steps", 10);
    pad_ = p.size("pad", 0);
    if (regions_ == 0 || regions_ > 64) throw InvalidParams("scatter: regions must be in [1, 64]");
    if (fds_ > 512) throw InvalidParams("scatter: at most 512 fds");
    if (steps_ == 0) throw InvalidParams("scatter: steps must be > 0");
  }

  struct State {
    uint64_t step, steps, live;
  };

  void start(RankSession& s) override {
    auto& st = alloc_state<State>(s, "scatter.state");
    st.steps = steps_;
    std::mt19937_64 rng(seed_ * 1000003 + s.rank());
    uint64_t live = 0;
    for (uint64_t k = 0; k < regions_; ++k) {
      const std::string label = fmt::format("scatter.{}", k);
      s.alloc_upper((1 + rng() % 4) * kPageSize, label);
      for (auto& b : s.upper(label)) b = std::byte(static_cast<uint8_t>(rng()));
      live |= uint64_t{1} << k;
    }
    for (uint64_t k = 0; k + 1 < regions_; ++k) {
      if (rng() % 3 == 0) {
        s.release_upper(fmt::format("scatter.{}", k));
        live &= ~(uint64_t{1} << k);
      }
    }
    std::vector<int> opened;
    {
      auto fds = s.fds().lock("FdRegistry");
      for (uint64_t k = 0; k < fds_; ++k) opened.push_back(fds->allocate(Half::Upper, fmt::format("file{}", k)));
      for (int fd : opened) {
        if (rng() % 3 == 0) fds->release(fd);
      }
    }
    st.live = live;
    alloc_pad(s, pad_);
  }

  void resume(RankSession&) override {}

  bool step(RankSession& s) override {
    auto& st = state_of<State>(s, "scatter.state");
    if (st.step == st.steps) return false;
    for (uint64_t k = 0; k < 64; ++k) {
      if (!(st.live >> k & 1)) continue;
      auto b = s.upper(fmt::format("scatter.{}", k));
      b[st.step % b.size()] ^= std::byte(static_cast<uint8_t>(st.step + 1));
    }
    ++st.step;
    return true;
  }

  std::string finish(RankSession& s) override {
    auto& st = state_of<State>(s, "scatter.state");
    Bytes all;
    for (uint64_t k = 0; k < 64; ++k) {
      if (!(st.live >> k & 1)) continue;
      auto b = s.upper(fmt::format("scatter.{}", k));
      all.insert(all.end(), b.begin(), b.end());
    }
    return fmt::format("scatter rank={} sha256={}", s.rank(), sha256_hex(all));
  }

 private:
  uint64_t seed_, regions_, fds_, steps_, pad_;
};

std::map<std::string, AppFactory>& registry() {
  static std::map<std::string, AppFactory> r = {
      {"ring", [](const Params& p) { return std::make_unique<RingApp>(p); }},
      {"heat", [](const Params& p) { return std::make_unique<HeatApp>(p); }},
      {"cg", [](const Params& p) { return std::make_unique<CgApp>(p); }},
      {"traffic", [](const Params& p) { return std::make_unique<TrafficApp>(p); }},
      {"scatter", [](const Params& p) { return std::make_unique<ScatterApp>(p); }},
  };
  return r;
}

}  // namespace

void register_app(const std::string& name, AppFactory factory) {
  std::lock_guard lk(g_registry_mu);
  registry()[name] = std::move(factory);
}

std::vector<std::string> app_names() {
  std::lock_guard lk(g_registry_mu);
  std::vector<std::string> out;
  for (const auto& [k, v] : registry()) out.push_back(k);
  return out;
}

std::unique_ptr<App> make_app(const std::string& name, const std::vector<std::string>& args) {
  AppFactory f;
  {
    std::lock_guard lk(g_registry_mu);
    auto it = registry().find(name);
    if (it == registry().end()) throw InvalidParams(fmt::format("unknown app '{}'", name));
    f = it->second;
  }
  return f(Params(args));
}

void validate_app(const std::string& name, const std::vector<std::string>& args) { (void)make_app(name, args); }

std::string run_app(RankSession& s) {
  auto app = make_app(s.app_name(), s.args());
  if (s.restarted()) {
    app->resume(s);
  } else {
    app->start(s);
  }
  while (app->step(s)) s.ckpt_poll();
  std::string out = app->finish(s);
  s.finalize();
  return out;
}

namespace apps {

Block block_of(uint64_t n, uint32_t parts, uint32_t i) {
  const uint64_t base = n / parts;
  const uint64_t extra = n % parts;
  return {i * base + std::min<uint64_t>(i, extra), base + (i < extra ? 1 : 0)};
}

std::vector<double> heat_initial(uint64_t grid, const std::string& init) {
  std::vector<double> u(grid, 0.0);
  if (init == "ramp") {
    for (uint64_t g = 0; g < grid; ++g) u[g] = static_cast<double>((g * 7919) % 1009) / 1009.0;
  } else if (init == "spike") {
    u[grid / 2] = 1.0;
  }
  return u;
}

std::vector<ScheduledMessage> traffic_schedule(uint64_t seed, uint32_t world, uint32_t messages,
                                               uint32_t steps, uint32_t max_size) {
  // Raw engine output only: distributions are implementation-defined.
  std::mt19937_64 rng(seed);
  std::vector<ScheduledMessage> out(messages);
  for (uint32_t i = 0; i < messages; ++i) {
    auto& m = out[i];
    m.index = i;
    m.src = static_cast<uint32_t>(rng() % world);
    m.dst = static_cast<uint32_t>(rng() % world);
    m.tag = static_cast<int32_t>(rng() % 4);
    m.size = static_cast<uint32_t>(rng() % (uint64_t{max_size} + 1));
    m.send_step = static_cast<uint32_t>(rng() % steps);
    m.recv_step = std::min<uint32_t>(steps - 1, m.send_step + static_cast<uint32_t>(rng() % 3));
  }
  // FIFO per channel: a later send on the same channel is never received
  // in an earlier step.
  std::vector<uint32_t> order(messages);
  for (uint32_t i = 0; i < messages; ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](uint32_t a, uint32_t b) { return out[a].send_step < out[b].send_step; });
  std::map<std::tuple<uint32_t, uint32_t, int32_t>, uint32_t> last;
  std::vector<ScheduledMessage> sorted;
  sorted.reserve(messages);
  for (uint32_t i : order) {
    auto m = out[i];
    auto [it, fresh] = last.try_emplace({m.src, m.dst, m.tag}, m.recv_step);
    if (!fresh) m.recv_step = std::max(m.recv_step, it->second);
    it->second = m.recv_step;
    sorted.push_back(m);
  }
  return sorted;
}

Bytes traffic_payload(uint64_t seed, const ScheduledMessage& m) {
  Bytes b(m.size);
  uint64_t x = seed * 0x9E3779B97F4A7C15ull + m.index + 1;
  for (auto& v : b) {
    x = x * 6364136223846793005ull + 1442695040888963407ull;
    v = std::byte(static_cast<uint8_t>(x >> 56));
  }
  return b;
}

}  // namespace apps

}  // namespace splitckpt
