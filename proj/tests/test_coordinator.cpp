#include <gtest/gtest.h>

#include <future>
#include <regex>
#include <thread>

#include "splitckpt/manifest.hpp"
#include "support.hpp"

using namespace splitckpt;
using namespace std::chrono_literals;
using splitckpt::testing::TcpProxy;
using splitckpt::testing::TempDir;
using splitckpt::testing::TestCoordinator;
using splitckpt::testing::world_options;
using Clock = std::chrono::steady_clock;

namespace {

Socket raw_register(const Endpoint& ep, uint32_t rank, uint32_t world) {
  auto s = connect_tcp(ep, 5s);
  if (!s) throw std::runtime_error("connect failed");
  proto::Register reg;
  reg.rank = rank;
  reg.world = world;
  reg.pid = 1000 + rank;
  reg.listen_port = static_cast<uint16_t>(20000 + rank);
  reg.node = "node" + std::to_string(rank);
  proto::send_message(s->fd(), reg);
  return std::move(*s);
}

std::size_t count_lines(const std::string& s) { return static_cast<std::size_t>(std::count(s.begin(), s.end(), '\n')); }

}  // namespace

TEST(Coordinator, EmptyRegistryDumpIsHeaderOnly) {
  TestCoordinator coord;
  const auto dump = coord->rank_registry_dump();
  EXPECT_EQ(count_lines(dump), 1u);
  EXPECT_TRUE(dump.starts_with("# coordinator phase=")) << dump;
}

TEST(Coordinator, DuplicateRegisterIsRejected) {
  TestCoordinator coord;
  Socket a = raw_register(coord.endpoint(), 0, 2);
  Socket b = raw_register(coord.endpoint(), 0, 2);
  const auto reply = proto::recv_message(b.fd(), 5s);
  ASSERT_TRUE(reply.has_value());
  ASSERT_TRUE(std::holds_alternative<proto::RegisterReject>(*reply));
  EXPECT_NE(std::get<proto::RegisterReject>(*reply).reason.find("duplicate"), std::string::npos);
}

TEST(Coordinator, CompleteWorldIsAckedAndDumpedInRankOrder) {
  TestCoordinator coord;
  Socket r1 = raw_register(coord.endpoint(), 1, 2);
  Socket r0 = raw_register(coord.endpoint(), 0, 2);
  for (Socket* s : {&r0, &r1}) {
    const auto reply = proto::recv_message(s->fd(), 5s);
    ASSERT_TRUE(reply && std::holds_alternative<proto::RegisterAck>(*reply));
    const auto& ack = std::get<proto::RegisterAck>(*reply);
    EXPECT_EQ(ack.peers.size(), 2u);
    EXPECT_NE(ack.uid, 0u);
  }
  ASSERT_TRUE(coord->wait_running(5s));
  EXPECT_EQ(coord->phase(), Phase::Running);
  const auto dump = coord->rank_registry_dump();
  ASSERT_EQ(count_lines(dump), 3u) << dump;
  const auto first = dump.find("\nrank=0 ");
  const auto second = dump.find("\nrank=1 ");
  ASSERT_NE(first, std::string::npos) << dump;
  ASSERT_NE(second, std::string::npos) << dump;
  EXPECT_LT(first, second);
  EXPECT_NE(dump.find("rank=0 node=node0 uid="), std::string::npos) << dump;
  EXPECT_NE(dump.find("phase=running"), std::string::npos) << dump;
}

TEST(Coordinator, HeartbeatsKeepWorldRunning) {
  TestCoordinator coord;
  auto opts = world_options(coord.endpoint(), 4, "ring", {"steps=20000"});
  auto fut = std::async(std::launch::async, [&] { return run_world(opts); });
  ASSERT_TRUE(coord->wait_running(30s));
  std::this_thread::sleep_for(1500ms);
  if (fut.wait_for(0s) != std::future_status::ready) {
    EXPECT_EQ(coord->phase(), Phase::Running);
    for (const auto& r : coord->ranks()) EXPECT_TRUE(r.alive);
  }
  const auto out = fut.get();
  EXPECT_TRUE(out.ok()) << out.errors();
}

TEST(Coordinator, IdleTwoRankCheckpoint) {
  TestCoordinator coord;
  TempDir dir;
  auto fut = coord->request_checkpoint("fast", dir.path(), 5);
  const auto out = run_world(world_options(coord.endpoint(), 2, "ring", {"steps=50"}));
  ASSERT_TRUE(out.ok()) << out.errors();
  const auto res = fut.get();
  ASSERT_TRUE(res.ok) << res.error;
  const auto m = read_manifest(res.manifest);
  EXPECT_EQ(m.world_size, 2u);
  EXPECT_EQ(m.entries.size(), 2u);
  EXPECT_EQ(res.receipts.size(), 2u);
  for (const auto& [r, p] : m.entries) EXPECT_TRUE(std::filesystem::exists(p));
  for (const auto& r : out.ranks) {
    ASSERT_EQ(r.checkpoints.size(), 1u);
    EXPECT_EQ(r.checkpoints[0].poll, 5u);
    EXPECT_EQ(r.checkpoints[0].outcome, "resumed");
  }
}

TEST(Coordinator, QuotaFailureAbortsWithoutManifest) {
  TestCoordinator coord;
  TempDir dir;
  auto fut = coord->request_checkpoint("quota:1K", dir.path(), 5);
  const auto ref = run_world(world_options(coord.endpoint(), 2, "ring", {"steps=50"}));
  ASSERT_TRUE(ref.ok()) << ref.errors();
  const auto res = fut.get();
  EXPECT_FALSE(res.ok);
  EXPECT_EQ(res.failure, CkptFailure::Aborted);
  EXPECT_NE(res.error.find("insufficient storage"), std::string::npos) << res.error;
  for (const auto& e : std::filesystem::recursive_directory_iterator(dir.path())) {
    EXPECT_EQ(e.path().filename(), ".quota.lock") << e.path();
  }
  for (const auto& r : ref.ranks) {
    ASSERT_EQ(r.checkpoints.size(), 1u);
    EXPECT_TRUE(r.checkpoints[0].outcome.starts_with("aborted")) << r.checkpoints[0].outcome;
  }
  const auto again = run_world(world_options(coord.endpoint(), 2, "ring", {"steps=50"}));
  EXPECT_EQ(again.output(), ref.output());
}

TEST(Coordinator, SeveredRankAbortsDrainWithinKeepaliveBound) {
  auto cfg = splitckpt::testing::fast_config();
  TestCoordinator coord(cfg);
  TcpProxy proxy(coord.endpoint());
  TempDir dir;
  auto opts = world_options(coord.endpoint(), 3, "ring", {"steps=300000"});
  opts.coordinator_for[1] = proxy.endpoint();
  auto world = std::async(std::launch::async, [&] { return run_world(opts); });
  ASSERT_TRUE(coord->wait_running(30s));
  auto fut = coord->request_checkpoint("fast", dir.path(), uint64_t{1} << 40);
  const auto deadline = Clock::now() + 10s;
  while (coord->phase() != Phase::Draining && Clock::now() < deadline) std::this_thread::sleep_for(1ms);
  ASSERT_EQ(coord->phase(), Phase::Draining);
  const auto cut = Clock::now();
  proxy.blackhole();
  ASSERT_EQ(fut.wait_for(std::chrono::milliseconds(cfg.keepalive_ms * cfg.misses + 1000)), std::future_status::ready);
  const auto took = Clock::now() - cut;
  const auto res = fut.get();
  EXPECT_FALSE(res.ok);
  EXPECT_EQ(res.failure, CkptFailure::Aborted);
  EXPECT_LE(took, std::chrono::milliseconds(cfg.keepalive_ms * cfg.misses + 1000));
  EXPECT_EQ(coord->phase(), Phase::Running);
  for (const auto& r : coord->ranks()) EXPECT_EQ(r.alive, r.id.rank != 1) << r.id.rank;
  const auto out = world.get();
  EXPECT_TRUE(out.ranks[0].ok) << out.ranks[0].error;
  EXPECT_TRUE(out.ranks[2].ok) << out.ranks[2].error;
}
