#include <gtest/gtest.h>

#include <atomic>
#include <cstring>
#include <mutex>
#include <thread>

#include "splitckpt/runtime.hpp"
#include "support.hpp"

using namespace splitckpt;
using splitckpt::testing::TestCoordinator;
using Clock = std::chrono::steady_clock;

namespace {

struct Rank {
  GuardedCell<AddressSpace> mem;
  GuardedCell<FdRegistry> fds;
  Runtime rt{mem, fds};
};

RuntimeConfig config(const Endpoint& ep, uint32_t world, uint32_t rank) {
  RuntimeConfig c;
  c.world_size = world;
  c.rank = rank;
  c.coordinator = ep;
  c.node = "localhost";
  c.register_timeout = std::chrono::seconds(30);
  c.peer_timeout = std::chrono::seconds(30);
  return c;
}

/// Runs fn(runtime, rank) on `world` threads, each with its own runtime.
template <class F>
void run_ranks(const Endpoint& ep, uint32_t world, F fn) {
  std::mutex mu;
  std::exception_ptr first;
  std::vector<std::thread> threads;
  for (uint32_t r = 0; r < world; ++r) {
    threads.emplace_back([&, r] {
      try {
        Rank rank;
        rank.rt.mp_init(config(ep, world, r));
        fn(rank.rt, r);
      } catch (...) {
        std::lock_guard lk(mu);
        if (!first) first = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first) std::rethrow_exception(first);
}

Bytes pattern(uint32_t rank, std::size_t n) {
  Bytes b(n);
  for (std::size_t i = 0; i < n; ++i) b[i] = std::byte(static_cast<uint8_t>(rank * 31 + i));
  return b;
}

}  // namespace

TEST(Runtime, SingletonWorld) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 1, [](Runtime& rt, uint32_t) {
    EXPECT_EQ(rt.communicator(kWorldComm).members, std::vector<uint32_t>{0});
    EXPECT_EQ(rt.ledger(), DrainLedger{});
    rt.mp_barrier(kWorldComm);
    const std::vector<double> v = {1.5, 2.5};
    EXPECT_EQ(rt.mp_allreduce_sum_f64(kWorldComm, v), v);
    rt.mp_finalize();
  });
}

TEST(Runtime, FourRankWorldAndLowerHalfPlacement) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 4, [](Runtime& rt, uint32_t r) {
    EXPECT_EQ(rt.communicator(kWorldComm).members, (std::vector<uint32_t>{0, 1, 2, 3}));
    const auto l = rt.ledger();
    EXPECT_EQ(l.bytes_sent, 0u);
    EXPECT_EQ(l.bytes_received, 0u);
    EXPECT_EQ(l.pending_ops, 0u);
    EXPECT_EQ(rt.identity().rank, r);
    rt.mp_finalize();
  });
}

TEST(Runtime, CoordinatorUnreachable) {
  auto probe = listen_tcp({"127.0.0.1", 0});
  const uint16_t port = local_port(probe);
  probe.close();
  Rank rank;
  auto c = config({"127.0.0.1", port}, 1, 0);
  c.connect_timeout = std::chrono::milliseconds(300);
  const auto t0 = Clock::now();
  EXPECT_THROW(rank.rt.mp_init(c), CoordinatorUnreachable);
  EXPECT_LT(Clock::now() - t0, std::chrono::seconds(5));
}

TEST(Runtime, RingOfFourMatchesBlockingReference) {
  TestCoordinator coord;
  std::vector<Bytes> got(4);
  std::vector<DrainLedger> ledgers(4);
  run_ranks(coord.endpoint(), 4, [&](Runtime& rt, uint32_t r) {
    const auto s = rt.mp_isend((r + 1) % 4, kWorldComm, 7, pattern(r, 1024));
    const auto v = rt.mp_irecv((r + 3) % 4, kWorldComm, 7);
    got[r] = rt.mp_wait(v).payload;
    rt.mp_wait(s);
    ledgers[r] = rt.ledger();
    rt.mp_finalize();
  });
  for (uint32_t r = 0; r < 4; ++r) {
    EXPECT_EQ(got[r], pattern((r + 3) % 4, 1024));
    EXPECT_EQ(ledgers[r].bytes_sent, 1024u);
    EXPECT_EQ(ledgers[r].bytes_received, 1024u);
    EXPECT_EQ(ledgers[r].pending_ops, 0u);
  }
}

TEST(Runtime, SelfSendAndPointToPointErrors) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 2, [](Runtime& rt, uint32_t r) {
    const auto s = rt.mp_isend(r, kWorldComm, 1, pattern(r, 100));
    const auto info = rt.mp_wait(rt.mp_irecv(r, kWorldComm, 1));
    rt.mp_wait(s);
    EXPECT_EQ(info.payload, pattern(r, 100));
    EXPECT_EQ(info.source, r);
    EXPECT_EQ(rt.ledger().bytes_sent, 100u);
    EXPECT_EQ(rt.ledger().bytes_received, 100u);
    EXPECT_THROW(rt.mp_isend(5, kWorldComm, 1, {}), InvalidRank);
    EXPECT_THROW(rt.mp_irecv(2, kWorldComm, 1), InvalidRank);
    EXPECT_THROW(rt.mp_isend(0, 42, 1, {}), InvalidCommunicator);
    EXPECT_THROW(rt.mp_isend(0, kWorldComm, -1, {}), InvalidTag);
    EXPECT_THROW(rt.mp_wait(12345), UnknownToken);
    rt.mp_finalize();
  });
}

TEST(Runtime, ZeroByteMessageAndConsumedTokens) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 2, [](Runtime& rt, uint32_t r) {
    if (r == 0) {
      const auto s = rt.mp_isend(1, kWorldComm, 9, {});
      rt.mp_wait(s);
      EXPECT_THROW(rt.mp_wait(s), UnknownToken);
    } else {
      const auto v = rt.mp_irecv(0, kWorldComm, 9);
      const auto info = rt.mp_wait(v);
      EXPECT_EQ(info.source, 0u);
      EXPECT_EQ(info.tag, 9);
      EXPECT_TRUE(info.payload.empty());
      EXPECT_THROW(rt.mp_wait(v), UnknownToken);
    }
    EXPECT_EQ(rt.ledger().bytes_sent, 0u);
    EXPECT_EQ(rt.ledger().bytes_received, 0u);
    rt.mp_finalize();
  });
}

TEST(Runtime, FifoPerChannel) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 2, [](Runtime& rt, uint32_t r) {
    if (r == 0) {
      for (uint8_t i = 0; i < 50; ++i) rt.mp_send(1, kWorldComm, i % 3, Bytes(i, std::byte{i}));
    } else {
      for (int tag : {2, 0, 1}) {
        for (uint8_t i = 0; i < 50; ++i) {
          if (i % 3 != tag) continue;
          EXPECT_EQ(rt.mp_recv(0, kWorldComm, tag), Bytes(i, std::byte{i}));
        }
      }
    }
    rt.mp_finalize();
  });
}

TEST(Runtime, BarrierWaitsForSlowestRank) {
  TestCoordinator coord;
  std::atomic<int64_t> slow_entered{0};
  std::vector<int64_t> left(4);
  auto now = [] { return std::chrono::duration_cast<std::chrono::microseconds>(Clock::now().time_since_epoch()).count(); };
  run_ranks(coord.endpoint(), 4, [&](Runtime& rt, uint32_t r) {
    if (r == 2) {
      std::this_thread::sleep_for(std::chrono::milliseconds(100));
      slow_entered = now();
    }
    rt.mp_barrier(kWorldComm);
    left[r] = now();
    rt.mp_finalize();
  });
  for (auto t : left) EXPECT_GE(t, slow_entered.load());
}

TEST(Runtime, AllreduceSums) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 4, [](Runtime& rt, uint32_t) {
    const std::vector<double> one = {1.0};
    EXPECT_EQ(rt.mp_allreduce_sum_f64(kWorldComm, one), std::vector<double>{4.0});
    rt.mp_finalize();
  });
}

TEST(Runtime, AllreduceIsBitwiseStableInRankOrder) {
  const std::vector<double> inputs = {1e16, 1.0, -1e16};
  double oracle = 0.0;
  for (double v : inputs) oracle += v;
  std::vector<uint64_t> bits;
  std::mutex mu;
  for (int run = 0; run < 3; ++run) {
    TestCoordinator coord;
    run_ranks(coord.endpoint(), 3, [&](Runtime& rt, uint32_t r) {
      const std::vector<double> mine = {inputs[r]};
      const double out = rt.mp_allreduce_sum_f64(kWorldComm, mine).at(0);
      uint64_t b;
      std::memcpy(&b, &out, 8);
      {
        std::lock_guard lk(mu);
        bits.push_back(b);
      }
      rt.mp_finalize();
    });
  }
  uint64_t want;
  std::memcpy(&want, &oracle, 8);
  ASSERT_EQ(bits.size(), 9u);
  for (auto b : bits) EXPECT_EQ(b, want);
}

TEST(Runtime, CommSplitAndReplay) {
  TestCoordinator coord;
  std::vector<CommTable> tables(4);
  std::vector<std::vector<CallLogEntry>> logs(4);
  run_ranks(coord.endpoint(), 4, [&](Runtime& rt, uint32_t r) {
    const auto c = rt.mp_comm_split(kWorldComm, static_cast<int32_t>(r / 2), static_cast<int32_t>(r));
    EXPECT_EQ(c.members, r < 2 ? (std::vector<uint32_t>{0, 1}) : (std::vector<uint32_t>{2, 3}));
    const auto same = rt.mp_comm_split(kWorldComm, 0, 0);
    EXPECT_EQ(same.members, (std::vector<uint32_t>{0, 1, 2, 3}));
    EXPECT_NE(same.id, kWorldComm);
    const std::vector<double> one = {1.0};
    EXPECT_EQ(rt.mp_allreduce_sum_f64(c.id, one), std::vector<double>{2.0});
    tables[r] = rt.communicators();
    logs[r] = rt.call_log();
    rt.mp_finalize();
  });
  TestCoordinator again;
  run_ranks(again.endpoint(), 4, [&](Runtime& rt, uint32_t r) {
    EXPECT_EQ(rt.replay_log(logs[r]), tables[r]);
    rt.mp_finalize();
  });
}

TEST(Runtime, ReplayRejectsSeqGapAndForeignInit) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 1, [](Runtime& rt, uint32_t) {
    auto log = rt.call_log();
    ASSERT_EQ(log.size(), 1u);
    EXPECT_EQ(rt.replay_log(log), rt.communicators());
    auto gap = log;
    gap.push_back({3, Opcode::CommSplit, {0, 0, 0, 0}, 1});
    EXPECT_THROW(rt.replay_log(gap), ReplayMismatch);
    auto foreign = log;
    foreign[0].args[0] = 4;
    EXPECT_THROW(rt.replay_log(foreign), ReplayMismatch);
    rt.mp_finalize();
  });
}

TEST(Runtime, FinalizeWithOutstandingToken) {
  TestCoordinator coord;
  run_ranks(coord.endpoint(), 1, [](Runtime& rt, uint32_t) {
    const auto v = rt.mp_irecv(0, kWorldComm, 3);
    EXPECT_THROW(rt.mp_finalize(), PendingOperations);
    rt.mp_send(0, kWorldComm, 3, pattern(0, 8));
    rt.mp_wait(v);
    EXPECT_NO_THROW(rt.mp_finalize());
    EXPECT_TRUE(rt.finalized());
  });
}

TEST(Runtime, FinalizeAfterCoordinatorIsGone) {
  auto coord = std::make_unique<TestCoordinator>();
  Rank rank;
  rank.rt.mp_init(config(coord->endpoint(), 1, 0));
  coord.reset();
  EXPECT_NO_THROW(rank.rt.mp_finalize());
  EXPECT_TRUE(rank.rt.finalized());
}

TEST(Runtime, LowerHalfStaysInItsArenaAndBand) {
  TestCoordinator coord;
  Rank rank;
  rank.rt.mp_init(config(coord.endpoint(), 1, 0));
  {
    auto mem = rank.mem.lock();
    ASSERT_GT(mem->size(), 0u);
    for (const auto& [start, r] : mem->regions()) {
      EXPECT_EQ(r.tag, Half::Lower);
      EXPECT_GE(r.start, mem->arena().lower_base);
      EXPECT_LE(r.end(), mem->lower_end());
    }
  }
  {
    auto fds = rank.fds.lock();
    ASSERT_FALSE(fds->fds(Half::Lower).empty());
    for (int fd : fds->fds(Half::Lower)) EXPECT_TRUE(fd >= 900 && fd < 1000);
  }
  rank.rt.mp_finalize();
}
