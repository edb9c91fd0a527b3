#include <catch2/catch_amalgamated.hpp>

#include <memory>
#include <random>

#include "smc/engine.hpp"
#include "smc/harness.hpp"
#include "support.hpp"

using namespace smc;
using engine::Strategy;
using isa::Opcode;

namespace {

struct EngineRun {
  isa::Image image;
  vm::Vm machine;
  RunStats stats;
  std::unique_ptr<engine::Engine> eng;
  vm::RunResult result;

  explicit EngineRun(isa::Image img) : image(std::move(img)) {
    machine.load(image);
    eng = std::make_unique<engine::Engine>(machine, image, engine::EngineConfig{}, stats);
    eng->start();
    result = vm::runScheduler(machine, *eng, vm::SchedulerConfig{});
  }
};

harness::RunOutcome run(const isa::Image& img, bool instrumented) {
  harness::RunConfig c;
  c.instrumented = instrumented;
  return harness::runProgram(img, c);
}

const std::vector<std::string> kSmc = {"jit-patch", "jit-twostep", "jit-threads", "micro/inplace", "micro/jumppatch",
                                       "micro/brkfill"};

}  // namespace

TEST_CASE("strategy order is in-place, jump patch, breakpoint fill") {
  CHECK(engine::chooseStrategy(true, true, 1) == Strategy::InPlace);
  CHECK(engine::chooseStrategy(true, true, 100) == Strategy::InPlace);
  CHECK(engine::chooseStrategy(true, false, isa::kJumpLength) == Strategy::JumpPatch);
  CHECK(engine::chooseStrategy(true, false, isa::kJumpLength - 1) == Strategy::BrkFill);
  CHECK(engine::chooseStrategy(false, true, 100) == Strategy::BrkFill);
  CHECK(engine::chooseStrategy(false, false, 100) == Strategy::BrkFill);
  CHECK(engine::toString(Strategy::JumpPatch) == "jump-patch");
}

TEST_CASE("chosen strategies are always consistent with plan sizes") {
  std::mt19937 rng(5);
  for (int i = 0; i < 5000; ++i) {
    engine::PatchPlan p;
    p.newCodeDecodes = rng() % 4 != 0;
    p.oldCloneLength = rng() % 16;
    p.newCloneBytes.resize(rng() % 16);
    const bool fits = p.newCloneBytes.size() <= p.oldCloneLength;
    p.strategy = engine::chooseStrategy(p.newCodeDecodes, fits && rng() % 2 == 0, p.oldCloneLength);
    INFO(i);
    CHECK(engine::planIsConsistent(p));
  }
  engine::PatchPlan bad;
  bad.strategy = Strategy::JumpPatch;
  bad.oldCloneLength = 2;
  CHECK_FALSE(engine::planIsConsistent(bad));
  bad.strategy = Strategy::InPlace;
  bad.oldCloneLength = 3;
  bad.newCloneBytes.resize(4);
  CHECK_FALSE(engine::planIsConsistent(bad));
}

TEST_CASE("each micro program exercises its strategy") {
  struct Case {
    const char* name;
    Strategy strategy;
  };
  for (const Case& c : {Case{"micro/inplace", Strategy::InPlace}, Case{"micro/jumppatch", Strategy::JumpPatch},
                        Case{"micro/brkfill", Strategy::BrkFill}}) {
    const auto img = test::corpus(c.name);
    const auto native = run(img, false);
    const auto inst = run(img, true);
    INFO(c.name);
    CHECK(native.output == test::expectedOutput(c.name));
    CHECK(harness::sameGuestState(native, inst));
    const auto& s = inst.stats;
    CHECK(s.reinstrumentInPlace == (c.strategy == Strategy::InPlace ? 1u : 0u));
    CHECK(s.reinstrumentJump == (c.strategy == Strategy::JumpPatch ? 1u : 0u));
    CHECK(s.reinstrumentBrk == (c.strategy == Strategy::BrkFill ? 1u : 0u));
    if (c.strategy == Strategy::BrkFill) CHECK(s.brkRedirects >= 1);
  }
}

TEST_CASE("patch sites hold what their strategy writes") {
  for (const auto& name : kSmc) {
    EngineRun r(test::corpus(name));
    INFO(name);
    REQUIRE_FALSE(r.eng->patchSites().empty());
    for (const auto& p : r.eng->plans()) CHECK(engine::planIsConsistent(p));
    for (const auto& site : r.eng->patchSites()) {
      switch (site.strategy) {
        case Strategy::InPlace: {
          CHECK((r.eng->clone().flags(site.cloneStart) & engine::CloneRegion::kBoundary) != 0);
          auto it = r.eng->records().find(site.origStart);
          if (it != r.eng->records().end() && it->second.cloneStart == site.cloneStart) {
            CHECK(r.eng->origForClone(site.cloneStart) == site.origStart);
            std::vector<std::uint8_t> now(it->second.length);
            REQUIRE(r.machine.memory().read(site.origStart, now));
            CHECK(std::equal(now.begin(), now.end(), it->second.bytes.begin()));
          }
          break;
        }
        case Strategy::JumpPatch: {
          REQUIRE(site.newFragment);
          auto d = r.machine.decodeAt(site.cloneStart);
          REQUIRE(d);
          CHECK(*d == isa::Instruction{Opcode::Jmp, 0, 0, *site.newFragment});
          for (std::uint32_t a = site.cloneStart + isa::kJumpLength; a < site.cloneStart + site.cloneLength; ++a)
            CHECK(r.machine.decodeAt(a)->opcode == Opcode::Brk);
          break;
        }
        case Strategy::BrkFill:
          for (std::uint32_t a = site.cloneStart; a < site.cloneStart + site.cloneLength; ++a) {
            CHECK(r.machine.decodeAt(a)->opcode == Opcode::Brk);
            CHECK((r.eng->clone().flags(a) & engine::CloneRegion::kPrimary) == 0);
          }
          CHECK_FALSE(r.eng->xlat().origToClone(site.origStart) ==
                      std::optional<std::uint32_t>(site.cloneStart));
          break;
      }
    }
  }
}

TEST_CASE("code overwritten with invalid bytes faults as it does natively") {
  const auto img = isa::assemble(R"(
        .org 0x1000
start:  CALL body
        CALL wreck
        CALL body
        HALT
body:   LOADI r0, 1
        SYSCALL PRINT
        RET
wreck:  LOADI r1, 0xFFFFFFFF
        STORE [body], r1
        RET
)");
  const auto native = run(img, false);
  const auto inst = run(img, true);
  std::string why;
  CHECK(harness::sameGuestState(native, inst, &why));
  INFO(why);
  CHECK(native.output == "1\n");
  REQUIRE(inst.result.crash);
  CHECK(inst.result.crash->kind == vm::FaultKind::IllegalInstruction);
  CHECK(inst.result.crash->addr == img.label("body"));
  CHECK(inst.stats.reinstrumentBrk >= 1);
}

TEST_CASE("every guest write fault is counted by the guard") {
  std::vector<std::string> all = kSmc;
  for (const char* n : {"hello", "data-in-code", "pc-relative", "indirect-dispatch", "signal-pingpong"})
    all.emplace_back(n);
  for (const auto& name : all) {
    const auto inst = run(test::corpus(name), true);
    INFO(name);
    CHECK(inst.stats.protectionFaults == inst.writeFaults);
  }
}

TEST_CASE("modified code runs in its new form") {
  for (const auto& name : kSmc) {
    const auto img = test::corpus(name);
    const auto inst = run(img, true);
    INFO(name);
    CHECK(inst.output == test::expectedOutput(name));
    CHECK(inst.stats.protectionFaults >= 1);
    CHECK(inst.stats.reinstrumentTotal() >= 1);
  }
}
