#include <gtest/gtest.h>

#include <memory>
#include <random>
#include <thread>

#include "splitckpt/guarded.hpp"
#include "splitckpt/region_registry.hpp"

using namespace splitckpt;

namespace {

constexpr uint64_t kBase = uint64_t{1} << 40;

bool intersects(uint64_t a, uint64_t alen, uint64_t b, uint64_t blen) { return a < b + blen && b < a + alen; }

}  // namespace

TEST(RegionRegistry, ReserveFixedOnEmptySpace) {
  AddressSpace as;
  const auto& r = as.reserve_fixed(0x10000, 0x2000, Half::Upper, "heap");
  EXPECT_EQ(r.start, 0x10000u);
  EXPECT_EQ(r.payload.size(), 0x2000u);
}

TEST(RegionRegistry, OverlappingLowerRequestIsRejectedWithoutMutation) {
  AddressSpace as;
  as.reserve_fixed(0x10000, 0x2000, Half::Upper, "heap");
  const std::string before = as.dump();
  EXPECT_THROW(as.reserve_fixed(0x11000, 0x1000, Half::Lower, "buf"), RegionError);
  EXPECT_EQ(as.dump(), before);
}

TEST(RegionRegistry, OverlapErrorNamesEveryConflict) {
  AddressSpace as;
  as.reserve_fixed(0x10000, 0x1000, Half::Upper, "a");
  as.reserve_fixed(0x12000, 0x1000, Half::Upper, "b");
  try {
    as.reserve_fixed(0x10000, 0x4000, Half::Upper, "wide");
    FAIL();
  } catch (const OverlapError& e) {
    ASSERT_EQ(e.conflicts().size(), 2u);
    EXPECT_EQ(e.conflicts()[0].label, "a");
    EXPECT_EQ(e.conflicts()[1].label, "b");
  }
  EXPECT_EQ(as.size(), 2u);
}

TEST(RegionRegistry, AdjacentRegionsAreDisjoint) {
  AddressSpace as;
  as.reserve_fixed(0x10000, 0x2000, Half::Upper, "heap");
  EXPECT_EQ(as.reserve_fixed(0x12000, 0x1000, Half::Upper, "stack").start, 0x12000u);
}

TEST(RegionRegistry, AlignmentAndArenaRules) {
  AddressSpace as;
  EXPECT_THROW(as.reserve_fixed(0x10001, 0x1000, Half::Upper, "x"), AlignmentError);
  EXPECT_THROW(as.reserve_fixed(0x10000, 0x1001, Half::Upper, "x"), AlignmentError);
  EXPECT_THROW(as.reserve_fixed(0x10000, 0, Half::Upper, "x"), AlignmentError);
  EXPECT_THROW(as.reserve_fixed(kBase, 0x1000, Half::Upper, "x"), ArenaViolation);
  EXPECT_THROW(as.reserve_fixed(kBase - 0x1000, 0x2000, Half::Upper, "x"), ArenaViolation);
  EXPECT_THROW(as.reserve_fixed(0x10000, 0x1000, Half::Lower, "x"), ArenaViolation);
  EXPECT_THROW(as.reserve_fixed(0x10000, 0x1000, Half::Upper, std::string(65, 'l')), RegionError);
  EXPECT_EQ(as.size(), 0u);
}

TEST(RegionRegistry, ReserveAnyFirstFit) {
  AddressSpace as;
  EXPECT_EQ(as.reserve_any(0x1000, Half::Lower, "rt").start, kBase);
  EXPECT_EQ(as.reserve_any(0x1000, Half::Lower, "rt1").start, kBase + 0x1000);
  EXPECT_EQ(as.reserve_any(0x1000, Half::Lower, "rt2").start, kBase + 0x2000);
  EXPECT_THROW(as.reserve_any(as.arena().lower_size + 0x1000, Half::Lower, "big"), ArenaExhausted);
}

TEST(RegionRegistry, ReserveAnyFillsHoles) {
  AddressSpace as;
  const uint64_t a = as.reserve_any(0x1000, Half::Upper, "a").start;
  const uint64_t b = as.reserve_any(0x2000, Half::Upper, "b").start;
  as.reserve_any(0x1000, Half::Upper, "c");
  as.release(b);
  EXPECT_EQ(as.reserve_any(0x1000, Half::Upper, "d").start, b);
  EXPECT_EQ(as.reserve_any(0x1000, Half::Upper, "e").start, b + 0x1000);
  EXPECT_EQ(a, as.arena().search_floor);
}

TEST(RegionRegistry, ReleaseRestoresAvailability) {
  AddressSpace as;
  as.reserve_fixed(0x20000, 0x1000, Half::Upper, "x");
  as.reserve_fixed(0x30000, 0x1000, Half::Upper, "keep");
  as.release(0x20000);
  EXPECT_NO_THROW(as.reserve_fixed(0x20000, 0x1000, Half::Upper, "x2"));
  ASSERT_NE(as.find(0x30000), nullptr);
  EXPECT_EQ(as.find(0x30000)->label, "keep");
  AddressSpace empty;
  EXPECT_THROW(empty.release(0xdead000), UnknownRegion);
}

TEST(RegionRegistry, SnapshotUpperFiltersAndCopiesPayloads) {
  AddressSpace as;
  EXPECT_TRUE(as.snapshot_upper().empty());
  as.reserve_fixed(0x40000, 0x1000, Half::Upper, "u2");
  as.reserve_fixed(0x10000, 0x1000, Half::Upper, "u1");
  for (int i = 0; i < 3; ++i) as.reserve_any(0x1000, Half::Lower, "l");
  std::vector<std::byte> kept(0x1000);
  auto p = as.payload(0x40000);
  for (std::size_t i = 0; i < p.size(); ++i) p[i] = kept[i] = std::byte(static_cast<uint8_t>(i * 7));
  const auto snap = as.snapshot_upper();
  ASSERT_EQ(snap.size(), 2u);
  EXPECT_EQ(snap[0].label, "u1");
  EXPECT_EQ(snap[1].label, "u2");
  EXPECT_EQ(snap[1].payload, kept);
  EXPECT_TRUE(std::all_of(snap[0].payload.begin(), snap[0].payload.end(), [](std::byte b) { return b == std::byte{0}; }));
}

TEST(RegionRegistry, DumpFormat) {
  AddressSpace as;
  as.reserve_fixed(0x10000, 0x2000, Half::Upper, "heap");
  EXPECT_EQ(as.dump(), "0000000000010000 0000000000002000 upper heap\n");
}

TEST(RegionRegistry, RandomSequencesStayOverlapFreeAndDeterministic) {
  for (uint64_t seed = 0; seed < 300; ++seed) {
    auto run = [&] {
      std::mt19937_64 rng(seed);
      auto owned = std::make_unique<AddressSpace>();
      AddressSpace& as = *owned;
      for (int op = 0; op < 60; ++op) {
        const uint64_t len = (1 + rng() % 8) * kPageSize;
        const bool lower = rng() % 2;
        try {
          if (rng() % 3 == 0 && as.size() > 0) {
            auto it = as.regions().begin();
            std::advance(it, static_cast<long>(rng() % as.size()));
            as.release(it->first);
          } else if (rng() % 2) {
            as.reserve_any(len, lower ? Half::Lower : Half::Upper, "any");
          } else {
            const uint64_t start = (lower ? kBase : 0x10000) + (rng() % 64) * kPageSize;
            as.reserve_fixed(start, len, lower ? Half::Lower : Half::Upper, "fixed");
          }
        } catch (const RegionError&) {
        }
      }
      return owned;
    };
    const auto owned = run();
    const AddressSpace& a = *owned;
    std::vector<MemoryRegion> rs;
    for (const auto& [s, r] : a.regions()) rs.push_back(r);
    for (std::size_t i = 0; i < rs.size(); ++i) {
      for (std::size_t j = i + 1; j < rs.size(); ++j) {
        ASSERT_FALSE(intersects(rs[i].start, rs[i].length, rs[j].start, rs[j].length)) << "seed " << seed;
      }
      const bool in_arena = rs[i].start >= kBase && rs[i].end() <= kBase + a.arena().lower_size;
      ASSERT_EQ(rs[i].tag == Half::Lower, in_arena);
    }
    EXPECT_EQ(run()->dump(), a.dump());
  }
}

TEST(GuardedCell, ReentrantAcquisitionIsDetected) {
  GuardedCell<AddressSpace> cell;
  auto held = cell.lock("AddressSpace");
  EXPECT_TRUE(cell.changes_pending());
  EXPECT_THROW((void)cell.lock("AddressSpace"), GuardViolation);
}

TEST(GuardedCell, FlagClearsAfterRelease) {
  GuardedCell<int> cell;
  { *cell.lock() = 5; }
  EXPECT_FALSE(cell.changes_pending());
  std::thread t([&] { *cell.lock() += 1; });
  t.join();
  EXPECT_EQ(*cell.lock(), 6);
}

TEST(GuardedCell, ChangesPendingDoubleSetThrows) {
  ChangesPending flag;
  auto scope = flag.begin("first");
  EXPECT_THROW((void)flag.begin("second"), GuardViolation);
}
