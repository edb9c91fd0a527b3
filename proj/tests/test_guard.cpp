#include <catch2/catch_amalgamated.hpp>

#include <random>

#include "smc/guard.hpp"

using namespace smc;
using guard::PageState;
using guard::SmcGuard;
using guard::SmcPolicy;
using guard::Trigger;

namespace {

struct Fixture {
  vm::GuestMemory mem{256};
  RunStats stats;
  SmcGuard g{mem, stats};
  std::uint64_t vmFaults = 0;

  explicit Fixture(SmcPolicy p = {}) {
    mem.map(0x1000, 0x1000);
    g.setPolicy(p);
  }

  // Guest store with fault handling as the engine does it.
  std::vector<guard::ChangedRange> store(int thread, std::uint32_t addr, std::uint32_t value) {
    std::vector<guard::ChangedRange> changed;
    auto r = mem.write32(addr, value);
    if (r.status == vm::WriteResult::Status::Protected) {
      ++vmFaults;
      changed = g.onWriteFault(thread, addr, 4);
      r = mem.write32(addr, value);
    }
    REQUIRE(r.ok());
    return changed;
  }

  PageState state(std::uint32_t addr) const { return g.page(mem.pageIndex(addr))->state; }
};

}  // namespace

TEST_CASE("guard: instrumented pages become protected") {
  Fixture f;
  f.g.onInstrumented({0x1010, 0x1020});
  REQUIRE(f.g.page(0x10) != nullptr);
  CHECK(f.state(0x1010) == PageState::Protected);
  CHECK(f.mem.protection(0x10) == vm::Protection::ReadOnly);
  CHECK(f.g.page(0x11) == nullptr);

  f.g.onInstrumented({0x11F0, 0x1208});
  CHECK(f.state(0x11F0) == PageState::Protected);
  CHECK(f.state(0x1200) == PageState::Protected);
}

TEST_CASE("guard: first write snapshots the old bytes and succeeds on retry") {
  Fixture f;
  f.mem.write32(0x1010, 0xABCD);
  f.g.onInstrumented({0x1010, 0x1014});
  f.store(0, 0x1080, 7);
  const auto* pg = f.g.page(0x10);
  CHECK(pg->state == PageState::Unprotected);
  CHECK(pg->ownerThread == 0);
  CHECK(pg->cleanChecks == 0);
  REQUIRE(pg->snapshot.size() == 256);
  CHECK(isa::readLe32(pg->snapshot.data() + 0x10) == 0xABCDu);
  CHECK(isa::readLe32(pg->snapshot.data() + 0x80) == 0u);
  CHECK(f.mem.read32(0x1080) == 7u);
  CHECK(f.stats.protectionFaults == 1);
}

TEST_CASE("guard: block instrumented on an unprotected page leaves it unprotected") {
  Fixture f;
  f.g.onInstrumented({0x1000, 0x1004});
  f.store(0, 0x1080, 1);
  f.g.onInstrumented({0x1040, 0x1048});
  CHECK(f.state(0x1040) == PageState::Unprotected);
  CHECK(f.g.page(0x10)->instrumentedRanges.contains(0x1044));
  CHECK(f.mem.protection(0x10) == vm::Protection::ReadWrite);
}

TEST_CASE("guard: N=4 re-protects after exactly four clean checks") {
  SmcPolicy p;
  p.cleanChecks = 4;
  Fixture f(p);
  f.g.onInstrumented({0x1000, 0x1010});
  f.store(0, 0x1000, 0x01010101);
  // The faulting store itself is the first check's change.
  auto first = f.g.onFlushTrigger(0, Trigger::Lookup);
  CHECK_FALSE(first.empty());
  CHECK(f.g.page(0x10)->cleanChecks == 0);
  for (int i = 1; i <= 3; ++i) {
    CHECK(f.g.onFlushTrigger(0, Trigger::Lookup).empty());
    CHECK(f.state(0x1000) == PageState::Unprotected);
    CHECK(f.g.page(0x10)->cleanChecks == static_cast<std::uint32_t>(i));
  }
  CHECK(f.g.onFlushTrigger(0, Trigger::Kill).empty());
  CHECK(f.state(0x1000) == PageState::Protected);
  CHECK(f.g.page(0x10)->snapshot.empty());
  CHECK(f.mem.protection(0x10) == vm::Protection::ReadOnly);
  CHECK(f.stats.pageCompares == 5);
  CHECK(f.stats.dirtyFlushes == 1);
  CHECK(f.stats.reprotections == 1);
}

TEST_CASE("guard: N=1 re-protects after exactly one clean check") {
  SmcPolicy p;
  p.cleanChecks = 1;
  Fixture f(p);
  f.g.onInstrumented({0x1000, 0x1010});
  f.store(0, 0x1080, 0);  // same value: page content unchanged
  CHECK(f.state(0x1000) == PageState::Unprotected);
  CHECK(f.g.onFlushTrigger(0, Trigger::Lookup).empty());
  CHECK(f.state(0x1000) == PageState::Protected);
  CHECK(f.stats.pageCompares == 1);
  CHECK(f.stats.reprotections == 1);
}

TEST_CASE("guard: changes inside and outside instrumented ranges") {
  Fixture f;
  f.g.onInstrumented({0x1010, 0x1020});
  f.store(0, 0x1012, 0x99);
  auto changed = f.g.onFlushTrigger(0, Trigger::Lookup);
  REQUIRE(changed.size() == 1);
  CHECK(changed[0] == guard::ChangedRange{0x1012, 0x1013});
  CHECK(f.g.page(0x10)->cleanChecks == 0);

  // Data-only change: nothing reported, snapshot refreshed, counter reset.
  CHECK(f.g.onFlushTrigger(0, Trigger::Lookup).empty());
  CHECK(f.g.page(0x10)->cleanChecks == 1);
  f.store(0, 0x1080, 5);
  CHECK(f.g.onFlushTrigger(0, Trigger::Lookup).empty());
  CHECK(f.g.page(0x10)->cleanChecks == 0);
  CHECK(isa::readLe32(f.g.page(0x10)->snapshot.data() + 0x80) == 5u);
  CHECK(f.stats.dirtyFlushes == 2);
}

TEST_CASE("guard: changed ranges widen to the containing instruction start") {
  Fixture f;
  f.g.setInstructionStartFn([](std::uint32_t a) -> std::optional<std::uint32_t> {
    if (a >= 0x1010 && a < 0x1016) return 0x1010;
    return std::nullopt;
  });
  f.g.onInstrumented({0x1010, 0x1016});
  f.store(0, 0x1012, 0x7);
  auto changed = f.g.onFlushTrigger(0, Trigger::Lookup);
  REQUIRE(changed.size() == 1);
  CHECK(changed[0].start == 0x1010);
  CHECK(changed[0].stop == 0x1013);
}

TEST_CASE("guard: second page with a budget of one evicts the first") {
  Fixture f;
  f.g.onInstrumented({0x1000, 0x1010});
  f.g.onInstrumented({0x1100, 0x1110});
  f.store(0, 0x1004, 0x55);
  auto evicted = f.store(0, 0x1104, 0x66);
  CHECK(f.state(0x1000) == PageState::Protected);
  CHECK(f.state(0x1100) == PageState::Unprotected);
  REQUIRE(evicted.size() == 1);
  CHECK(evicted[0].start == 0x1004);
  CHECK(f.stats.pageCompares == 1);
  CHECK(f.stats.protectionFaults == 2);
}

TEST_CASE("guard: eviction picks the least recently faulted page") {
  SmcPolicy p;
  p.maxUnprotectedPerThread = 2;
  Fixture f(p);
  for (std::uint32_t pg = 0; pg < 3; ++pg) f.g.onInstrumented({0x1000 + pg * 0x100, 0x1004 + pg * 0x100});
  f.store(0, 0x1080, 1);
  f.store(0, 0x1180, 1);
  CHECK(f.g.unprotectedCount(0) == 2);
  f.store(0, 0x1280, 1);
  CHECK(f.state(0x1000) == PageState::Protected);
  CHECK(f.state(0x1100) == PageState::Unprotected);
  CHECK(f.state(0x1200) == PageState::Unprotected);
}

TEST_CASE("guard: budget of four keeps four pages unprotected") {
  SmcPolicy p;
  p.maxUnprotectedPerThread = 4;
  Fixture f(p);
  for (std::uint32_t pg = 0; pg < 5; ++pg) f.g.onInstrumented({0x1000 + pg * 0x100, 0x1004 + pg * 0x100});
  for (std::uint32_t pg = 0; pg < 4; ++pg) f.store(0, 0x1080 + pg * 0x100, 1);
  CHECK(f.g.unprotectedCount(0) == 4);
  f.store(0, 0x1480, 1);
  CHECK(f.g.unprotectedCount(0) == 4);
  CHECK(f.state(0x1000) == PageState::Protected);
}

TEST_CASE("guard: another thread's write to an unprotected page does not fault") {
  Fixture f;
  f.g.onInstrumented({0x1000, 0x1010});
  f.store(0, 0x1080, 1);
  f.store(1, 0x1084, 2);
  CHECK(f.vmFaults == 1);
  CHECK(f.g.page(0x10)->ownerThread == 0);
}

TEST_CASE("guard: faulting-thread-only checking") {
  SECTION("on: other threads' triggers skip the page") {
    Fixture f;
    f.g.onInstrumented({0x1000, 0x1010});
    f.store(0, 0x1080, 1);
    f.g.onFlushTrigger(1, Trigger::Lookup);
    CHECK(f.stats.pageCompares == 0);
    f.g.onFlushTrigger(0, Trigger::Lookup);
    CHECK(f.stats.pageCompares == 1);
  }
  SECTION("off: any thread's trigger compares every unprotected page") {
    SmcPolicy p;
    p.checkOnlyFaultingThread = false;
    Fixture f(p);
    f.g.onInstrumented({0x1000, 0x1010});
    f.store(0, 0x1080, 1);
    f.g.onFlushTrigger(1, Trigger::Lookup);
    CHECK(f.stats.pageCompares == 1);
  }
}

TEST_CASE("guard: disabled triggers do nothing") {
  SmcPolicy p;
  p.killTrigger = false;
  Fixture f(p);
  f.g.onInstrumented({0x1000, 0x1010});
  f.store(0, 0x1004, 1);
  CHECK(f.g.onFlushTrigger(0, Trigger::Kill).empty());
  CHECK(f.stats.pageCompares == 0);
  CHECK_FALSE(f.g.onFlushTrigger(0, Trigger::Lookup).empty());
}

TEST_CASE("guard: policy validation and consistency errors") {
  SmcPolicy p;
  p.cleanChecks = 0;
  CHECK_THROWS_AS(p.validate(), guard::InvalidPolicy);
  p.cleanChecks = 65;
  CHECK_THROWS_AS(p.validate(), guard::InvalidPolicy);
  p.cleanChecks = 64;
  CHECK_NOTHROW(p.validate());
  p.maxUnprotectedPerThread = 0;
  CHECK_THROWS_AS(p.validate(), guard::InvalidPolicy);

  Fixture f;
  CHECK_THROWS_AS(f.g.onWriteFault(0, 0x1000, 4), guard::FaultOnUnprotectedPage);
}

TEST_CASE("guard: invariants hold over random store/trigger sequences") {
  std::mt19937 rng(31337);
  for (int round = 0; round < 40; ++round) {
    SmcPolicy p;
    p.cleanChecks = 1 + rng() % 8;
    p.maxUnprotectedPerThread = 1 + rng() % 3;
    p.checkOnlyFaultingThread = rng() % 2 == 0;
    Fixture f(p);
    for (std::uint32_t pg = 0; pg < 8; ++pg)
      if (rng() % 4 != 0) f.g.onInstrumented({0x1000 + pg * 0x100 + 0x10, 0x1000 + pg * 0x100 + 0x40});
    std::vector<std::uint8_t> shadow(0x1000, 0);
    for (int op = 0; op < 400; ++op) {
      const int thread = static_cast<int>(rng() % 3);
      if (rng() % 3 == 0) {
        f.g.onFlushTrigger(thread, rng() % 2 == 0 ? Trigger::Lookup : Trigger::Kill);
      } else {
        const std::uint32_t addr = 0x1000 + (rng() % (0x1000 - 4));
        const std::uint32_t v = rng() % 4 == 0 ? 0 : static_cast<std::uint32_t>(rng());
        f.store(thread, addr, v);
        isa::writeLe32(shadow.data() + (addr - 0x1000), v);
      }
      for (std::uint32_t idx : f.g.guardedPages()) {
        const auto* pg = f.g.page(idx);
        REQUIRE(pg->snapshot.empty() == (pg->state == PageState::Protected));
        REQUIRE(pg->cleanChecks <= p.cleanChecks);
        REQUIRE((f.mem.protection(idx) == vm::Protection::ReadOnly) == (pg->state == PageState::Protected));
        REQUIRE_FALSE(pg->instrumentedRanges.empty());
      }
      // A store straddling two pages may hold both at once.
      for (int t = 0; t < 3; ++t) REQUIRE(f.g.unprotectedCount(t) <= p.maxUnprotectedPerThread + 1);
    }
    // Every store landed, none was lost to protection.
    std::vector<std::uint8_t> now(0x1000);
    f.mem.read(0x1000, now);
    REQUIRE(now == shadow);
    REQUIRE(f.stats.protectionFaults == f.vmFaults);
    REQUIRE(f.stats.dirtyFlushes <= f.stats.pageCompares);
  }
}
