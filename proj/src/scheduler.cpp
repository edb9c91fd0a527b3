#include "smc/scheduler.hpp"

#include <random>

namespace smc::vm {

std::string_view toString(RunResult::Status s) {
  switch (s) {
    case RunResult::Status::Exited: return "exited";
    case RunResult::Status::AllHalted: return "halted";
    case RunResult::Status::Crashed: return "crashed";
    case RunResult::Status::BudgetExceeded: return "budget-exceeded";
  }
  return "?";
}

Handling NativeExecution::onSyscall(ThreadContext& ctx, std::uint8_t number) {
  auto effect = vm_.dispatchSyscall(ctx, number);
  if (effect.fault) return Handling::crash(*effect.fault);
  return Handling::done();
}

Handling NativeExecution::onCallout(ThreadContext& ctx, std::uint32_t) {
  // CALLOUT never decodes outside the host range, so this is unreachable
  // unless a host range was configured without an engine.
  return Handling::crash({FaultKind::IllegalInstruction, ctx.pc, 0});
}

Handling NativeExecution::onFault(ThreadContext&, const Fault& fault) { return Handling::crash(fault); }

Handling NativeExecution::onHostSignal(ThreadContext& ctx, const Delivery&) {
  return Handling::crash({FaultKind::BadSyscall, ctx.pc, 0});
}

RunResult runScheduler(Vm& vm, ExecutionMode& mode, const SchedulerConfig& config) {
  RunResult result;
  std::mt19937_64 rng(config.seed);
  const std::uint64_t quantum = config.quantum == 0 ? 1 : config.quantum;
  auto nextSlice = [&]() -> std::uint64_t {
    if (config.seed == 0) return quantum;
    return 1 + rng() % (2 * quantum - 1);
  };
  // Engine work between retirements is bounded; this only stops runaway loops
  // that never retire anything.
  const std::uint64_t stepCap = config.instructionBudget * 64 + 1'000'000;

  std::size_t current = 0;
  std::uint64_t used = 0;
  std::uint64_t slice = nextSlice();

  auto pickNext = [&]() {
    const auto n = vm.threads().size();
    for (std::size_t k = 1; k <= n; ++k) {
      std::size_t idx = (current + k) % n;
      if (vm.threads()[idx].alive) {
        if (idx != current) ++result.threadSwitches;
        current = idx;
        used = 0;
        slice = nextSlice();
        return true;
      }
    }
    return false;
  };

  while (true) {
    if (vm.exited()) {
      result.status = RunResult::Status::Exited;
      result.exitCode = vm.exitCode();
      return result;
    }
    if (!vm.threads()[current].alive) {
      if (!pickNext()) {
        result.status = RunResult::Status::AllHalted;
        return result;
      }
      continue;
    }

    ThreadContext* t = &vm.thread(static_cast<int>(current));
    if (mode.atBoundary(*t)) {
      if (used >= slice) {
        pickNext();
        continue;
      }
      Delivery d = vm.deliverPendingSignal(*t);
      if (d.kind == Delivery::Kind::Terminated) continue;
      if (d.kind == Delivery::Kind::Host) {
        Handling h = mode.onHostSignal(*t, d);
        if (h.kind == Handling::Kind::Crash) {
          result.status = RunResult::Status::Crashed;
          result.crash = h.fault;
          result.crashThread = static_cast<int>(current);
          return result;
        }
        continue;
      }
      if (d.kind == Delivery::Kind::Ignored) continue;
    }

    if (result.guestInstructions >= config.instructionBudget || result.steps >= stepCap) {
      result.status = RunResult::Status::BudgetExceeded;
      return result;
    }

    const bool retiring = mode.retires(t->pc);
    StepOutcome out = vm.step(*t);
    ++result.steps;

    Handling h;
    switch (out.kind) {
      case StepOutcome::Kind::Continue:
      case StepOutcome::Kind::Halted:
        break;
      case StepOutcome::Kind::Fault:
        h = mode.onFault(*t, out.fault);
        if (h.kind == Handling::Kind::Done) h = Handling::retry();
        break;
      case StepOutcome::Kind::SyscallRequest:
        h = mode.onSyscall(*t, static_cast<std::uint8_t>(out.value));
        break;
      case StepOutcome::Kind::CalloutRequest:
        h = mode.onCallout(*t, out.value);
        break;
    }
    if (h.kind == Handling::Kind::Crash) {
      result.status = RunResult::Status::Crashed;
      result.crash = h.fault;
      result.crashThread = static_cast<int>(current);
      return result;
    }
    if (h.kind == Handling::Kind::Done && retiring) {
      ++used;
      ++result.guestInstructions;
    }
    t = &vm.thread(static_cast<int>(current));  // SPAWN may have grown the thread table
    if (t->yieldRequested) {
      t->yieldRequested = false;
      used = slice;
    }
  }
}

}  // namespace smc::vm
