#pragma once

#include <cstdint>
#include <optional>

#include "smc/vm.hpp"

namespace smc::vm {

struct Handling {
  enum class Kind : std::uint8_t {
    Done,   // the step completed; it retires if it started on a retiring address
    Retry,  // nothing retired; the thread re-executes from its (possibly new) pc
    Crash,  // the program terminates with `fault`
  } kind = Kind::Done;
  Fault fault;

  static Handling done() { return {}; }
  static Handling retry() { return {Kind::Retry, {}}; }
  static Handling crash(Fault f) { return {Kind::Crash, f}; }
};

// How the scheduler treats the code a thread executes. Native execution runs
// original code directly; the instrumentation engine runs clone code whose
// expansions are only interruptible at their first byte.
class ExecutionMode {
 public:
  virtual ~ExecutionMode() = default;

  // Thread switches and signal delivery happen only where this holds.
  virtual bool atBoundary(const ThreadContext& ctx) const = 0;
  // Whether executing the instruction at pc counts as one guest instruction.
  virtual bool retires(std::uint32_t pc) const = 0;

  virtual Handling onSyscall(ThreadContext& ctx, std::uint8_t number) = 0;
  virtual Handling onCallout(ThreadContext& ctx, std::uint32_t id) = 0;
  virtual Handling onFault(ThreadContext& ctx, const Fault& fault) = 0;
  virtual Handling onHostSignal(ThreadContext& ctx, const Delivery& delivery) = 0;
};

class NativeExecution final : public ExecutionMode {
 public:
  explicit NativeExecution(Vm& vm) : vm_(vm) {}

  bool atBoundary(const ThreadContext&) const override { return true; }
  bool retires(std::uint32_t) const override { return true; }
  Handling onSyscall(ThreadContext& ctx, std::uint8_t number) override;
  Handling onCallout(ThreadContext& ctx, std::uint32_t id) override;
  Handling onFault(ThreadContext& ctx, const Fault& fault) override;
  Handling onHostSignal(ThreadContext& ctx, const Delivery& delivery) override;

 private:
  Vm& vm_;
};

struct SchedulerConfig {
  std::uint32_t quantum = 20;
  // 0: fixed quantum. Otherwise each slice length is drawn from [1, 2Q-1].
  std::uint64_t seed = 0;
  std::uint64_t instructionBudget = 50'000'000;
};

struct RunResult {
  enum class Status : std::uint8_t { Exited, AllHalted, Crashed, BudgetExceeded } status = Status::AllHalted;
  int exitCode = 0;
  std::optional<Fault> crash;
  int crashThread = -1;
  std::uint64_t guestInstructions = 0;
  std::uint64_t steps = 0;
  std::uint64_t threadSwitches = 0;
};

std::string_view toString(RunResult::Status s);

// Deterministic round-robin over the VM's threads.
RunResult runScheduler(Vm& vm, ExecutionMode& mode, const SchedulerConfig& config);

}  // namespace smc::vm
