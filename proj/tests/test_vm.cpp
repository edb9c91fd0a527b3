#include <catch2/catch_amalgamated.hpp>

#include "smc/image.hpp"
#include "smc/scheduler.hpp"
#include "smc/vm.hpp"

using namespace smc;
using vm::FaultKind;
using vm::StepOutcome;

namespace {

struct Machine {
  vm::Vm vm;
  explicit Machine(const std::string& src) { vm.load(isa::assemble(src)); }
  vm::ThreadContext& t0() { return vm.thread(0); }
  StepOutcome step() { return vm.step(t0()); }
  void steps(int n) {
    for (int i = 0; i < n; ++i) REQUIRE(step().kind == StepOutcome::Kind::Continue);
  }
};

vm::RunResult runNative(vm::Vm& machine, vm::SchedulerConfig sc = {}) {
  vm::NativeExecution native(machine);
  return vm::runScheduler(machine, native, sc);
}

}  // namespace

TEST_CASE("step: arithmetic") {
  Machine m(".org 0x1000\nLOADI r0, 5\nADD r0, r0\nHALT\n");
  m.steps(2);
  CHECK(m.t0().regs[0] == 10);
  CHECK(m.step().kind == StepOutcome::Kind::Halted);
  CHECK_FALSE(m.t0().alive);
}

TEST_CASE("step: store to a read-only page faults without side effects") {
  Machine m(".org 0x1000\nLOADI r0, 0x55\nSTORE [d], r0\nHALT\nd: .word 7\n");
  const std::uint32_t d = 0x100D;
  m.vm.memory().setProtection(m.vm.memory().pageIndex(d), vm::Protection::ReadOnly);
  m.steps(1);
  const std::uint32_t pc = m.t0().pc;
  auto out = m.step();
  REQUIRE(out.kind == StepOutcome::Kind::Fault);
  CHECK(out.fault.kind == FaultKind::ProtectionWrite);
  CHECK(out.fault.addr == d);
  CHECK(m.t0().pc == pc);
  CHECK(m.vm.memory().read32(d) == 7u);

  m.vm.memory().setProtection(m.vm.memory().pageIndex(d), vm::Protection::ReadWrite);
  m.steps(1);
  CHECK(m.vm.memory().read32(d) == 0x55u);
}

TEST_CASE("step: CALL and RET use the guest stack") {
  Machine m(".org 0x1000\nCALL f\nLOADI r1, 9\nHALT\nf: LOADI r0, 3\nRET\n");
  const std::uint32_t sp = m.t0().sp;
  m.steps(1);
  CHECK(m.t0().pc == 0x100C);
  CHECK(m.t0().sp == sp - 4);
  CHECK(m.vm.memory().read32(sp - 4) == 0x1005u);
  m.steps(2);
  CHECK(m.t0().pc == 0x1005);
  CHECK(m.t0().sp == sp);
}

TEST_CASE("step: JZ, pc-relative and register-indirect forms") {
  Machine m(".org 0x1000\nLOADI r1, 0\nJZ r1, t\nHALT\nt: LEAPC r2, t\nLOADPC r3, w\nLOADR r4, [r2]\nHALT\nw: .word 0xAABBCCDD\n");
  m.steps(5);
  CHECK(m.t0().regs[2] == 0x100D);
  CHECK(m.t0().regs[3] == 0xAABBCCDDu);
  CHECK(m.t0().regs[4] == isa::readLe32(std::vector<std::uint8_t>{0x24, 0x02, 0xFA, 0xFF}.data()));
}

TEST_CASE("step: undecodable code and BRK fault") {
  Machine m(".org 0x1000\n.byte 0x99\n");
  auto out = m.step();
  REQUIRE(out.kind == StepOutcome::Kind::Fault);
  CHECK(out.fault.kind == FaultKind::IllegalInstruction);
  CHECK(out.fault.addr == 0x1000);

  Machine b(".org 0x1000\nBRK\n");
  CHECK(b.step().fault.kind == FaultKind::Breakpoint);
}

TEST_CASE("memory: writes are all-or-nothing") {
  vm::GuestMemory mem(256);
  mem.map(0x1000, 0x200);
  std::uint8_t one = 0x42;
  REQUIRE(mem.write(0x1010, std::span<const std::uint8_t>(&one, 1)).ok());
  std::uint8_t got = 0;
  REQUIRE(mem.read(0x1010, std::span<std::uint8_t>(&got, 1)));
  CHECK(got == 0x42);

  mem.setProtection(mem.pageIndex(0x1100), vm::Protection::ReadOnly);
  auto r = mem.write32(0x10FE, 0x11223344);
  CHECK(r.status == vm::WriteResult::Status::Protected);
  CHECK(mem.read32(0x10FC) == 0u);
  CHECK(mem.read32(0x1100) == 0u);
  CHECK(mem.write32(0x1100, 5).status == vm::WriteResult::Status::Protected);
  CHECK(mem.write32(0x2000, 5).status == vm::WriteResult::Status::Unmapped);
}

TEST_CASE("syscalls: SIGACTION reports the previous handler") {
  Machine m(".org 0x1000\nLOADI r0, 3\nLOADI r1, 0x4000\nSYSCALL SIGACTION\nMOV r5, r0\n"
            "LOADI r0, 3\nLOADI r1, 0x5000\nSYSCALL SIGACTION\nHALT\n");
  m.steps(2);
  auto out = m.step();
  REQUIRE(out.kind == StepOutcome::Kind::SyscallRequest);
  m.vm.dispatchSyscall(m.t0(), static_cast<std::uint8_t>(out.value));
  m.steps(3);
  out = m.step();
  m.vm.dispatchSyscall(m.t0(), static_cast<std::uint8_t>(out.value));
  CHECK(m.t0().regs[5] == 0);
  CHECK(m.t0().regs[0] == 0x4000);
  CHECK(m.vm.signals().get(3).handler == 0x5000);
}

TEST_CASE("syscalls: KILL queues, SIGRETURN outside a handler faults, unknown numbers fault") {
  vm::Vm machine;
  machine.load(isa::assemble(".org 0x1000\nHALT\n"));
  auto& t = machine.thread(0);
  t.regs[0] = 0;
  t.regs[1] = 3;
  auto e = machine.dispatchSyscall(t, static_cast<std::uint8_t>(vm::Syscall::Kill));
  CHECK_FALSE(e.fault);
  REQUIRE(t.pendingSignals.size() == 1);
  CHECK(t.pendingSignals.front() == 3);

  e = machine.dispatchSyscall(t, static_cast<std::uint8_t>(vm::Syscall::SigReturn));
  REQUIRE(e.fault);
  CHECK(e.fault->kind == FaultKind::BadSigreturn);

  t.regs[0] = 7;
  e = machine.dispatchSyscall(t, static_cast<std::uint8_t>(vm::Syscall::Kill));
  REQUIRE(e.fault);
  CHECK(e.fault->kind == FaultKind::BadThread);

  e = machine.dispatchSyscall(t, 99);
  REQUIRE(e.fault);
  CHECK(e.fault->kind == FaultKind::BadSyscall);
}

TEST_CASE("signals: delivery, ignore and deferral while in a handler") {
  vm::Vm machine;
  machine.load(isa::assemble(".org 0x1000\nNOP\nNOP\nHALT\n"));
  auto& t = machine.thread(0);
  machine.signals().set(3, vm::Disposition::fromGuest(0x4000));
  t.pc = 0x1001;
  t.pendingSignals.push_back(3);
  auto d = machine.deliverPendingSignal(t);
  CHECK(d.kind == vm::Delivery::Kind::Guest);
  CHECK(t.pc == 0x4000);
  REQUIRE(t.savedContext);
  CHECK(t.savedContext->pc == 0x1001);
  CHECK(t.regs[0] == 3);
  CHECK(t.regs[1] == 0x1001);

  t.pendingSignals.push_back(3);
  CHECK(machine.deliverPendingSignal(t).kind == vm::Delivery::Kind::None);
  CHECK(t.pendingSignals.size() == 1);

  machine.dispatchSyscall(t, static_cast<std::uint8_t>(vm::Syscall::SigReturn));
  CHECK(t.pc == 0x1001);
  CHECK_FALSE(t.inSignal);
  CHECK_FALSE(t.savedContext);

  machine.signals().set(3, vm::Disposition::fromGuest(vm::kHandlerIgnore));
  CHECK(machine.deliverPendingSignal(t).kind == vm::Delivery::Kind::Ignored);
  CHECK(t.pc == 0x1001);
}

TEST_CASE("signals: default disposition terminates 0-7 and ignores 8-15") {
  vm::Vm machine;
  machine.load(isa::assemble(".org 0x1000\nHALT\n"));
  auto& t = machine.thread(0);
  t.pendingSignals.push_back(9);
  CHECK(machine.deliverPendingSignal(t).kind == vm::Delivery::Kind::Ignored);
  CHECK(t.alive);
  t.pendingSignals.push_back(2);
  CHECK(machine.deliverPendingSignal(t).kind == vm::Delivery::Kind::Terminated);
  CHECK_FALSE(t.alive);
}

TEST_CASE("scheduler: round robin is deterministic for a fixed seed") {
  const char* src =
      ".org 0x1000\nLOADI r0, t1\nLOADI r1, 0x1F00\nSYSCALL SPAWN\nLOADI r2, 30\nLOADI r3, 1\n"
      "l0: MOV r0, r2\nSYSCALL PRINT\nSUB r2, r3\nJZ r2, d0\nJMP l0\nd0: HALT\n"
      "t1: LOADI r2, 1000\nLOADI r3, 1\nLOADI r4, 970\n"
      "l1: MOV r0, r2\nSYSCALL PRINT\nSUB r2, r3\nMOV r5, r2\nSUB r5, r4\nJZ r5, d1\nJMP l1\nd1: HALT\n"
      ".org 0x1E00\n.space 0x100\n";
  for (std::uint64_t seed : {0ull, 1ull, 42ull}) {
    std::string first;
    for (int rep = 0; rep < 2; ++rep) {
      vm::Vm machine;
      machine.load(isa::assemble(src));
      vm::SchedulerConfig sc;
      sc.seed = seed;
      sc.quantum = 7;
      auto r = runNative(machine, sc);
      CHECK(r.status == vm::RunResult::Status::AllHalted);
      if (rep == 0) first = machine.output();
      else CHECK(machine.output() == first);
    }
    // Thread 1 starts printing long before thread 0 counts down to 15.
    CHECK(first.find("1000\n") < first.find("\n15\n"));
  }
}

TEST_CASE("scheduler: budget and crash reporting") {
  vm::Vm loop;
  loop.load(isa::assemble(".org 0x1000\nl: JMP l\n"));
  vm::SchedulerConfig sc;
  sc.instructionBudget = 1000;
  auto r = runNative(loop, sc);
  CHECK(r.status == vm::RunResult::Status::BudgetExceeded);
  CHECK(r.guestInstructions == 1000);

  vm::Vm crash;
  crash.load(isa::assemble(".org 0x1000\nNOP\n.byte 0x99\n"));
  r = runNative(crash);
  CHECK(r.status == vm::RunResult::Status::Crashed);
  REQUIRE(r.crash);
  CHECK(r.crash->kind == FaultKind::IllegalInstruction);
  CHECK(r.crash->addr == 0x1001);

  vm::Vm exitv;
  exitv.load(isa::assemble(".org 0x1000\nLOADI r0, 300\nSYSCALL EXIT\n"));
  r = runNative(exitv);
  CHECK(r.status == vm::RunResult::Status::Exited);
  CHECK(r.exitCode == 300);
}

TEST_CASE("load rejects bad images") {
  vm::Vm machine;
  isa::Image empty;
  CHECK_THROWS_AS(machine.load(empty), vm::LoadError);
  isa::Image bad = isa::assemble(".org 0x1000\nHALT\n");
  bad.entry = 0x2000;
  CHECK_THROWS_AS(machine.load(bad), vm::LoadError);
}
