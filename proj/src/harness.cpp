#include "smc/harness.hpp"

#include <chrono>
#include <cstdio>
#include <memory>
#include <sstream>

#include "smc/backends.hpp"

namespace smc::harness {

std::string_view toString(BackendKind k) {
  switch (k) {
    case BackendKind::None: return "none";
    case BackendKind::Trace: return "trace";
    case BackendKind::MemcheckDemo: return "memcheck-demo";
    case BackendKind::Checking: return "checking";
  }
  return "?";
}

BackendKind backendFromString(std::string_view name) {
  for (auto k : {BackendKind::None, BackendKind::Trace, BackendKind::MemcheckDemo, BackendKind::Checking})
    if (toString(k) == name) return k;
  throw std::invalid_argument("unknown backend '" + std::string(name) + "'");
}

void RunConfig::validate() const {
  policy.validate();
  if (pageSize < kMinPageSize || pageSize > kMaxPageSize || (pageSize & (pageSize - 1)) != 0)
    throw InvalidConfig("page size must be a power of two in [" + std::to_string(kMinPageSize) + ", " +
                        std::to_string(kMaxPageSize) + "]");
  if (quantum == 0 || quantum > kMaxQuantum)
    throw InvalidConfig("quantum must be in [1, " + std::to_string(kMaxQuantum) + "]");
  if (cloneFactor == 0 || cloneFactor > kMaxCloneFactor)
    throw InvalidConfig("clone factor must be in [1, " + std::to_string(kMaxCloneFactor) + "]");
  if (budget == 0) throw InvalidConfig("instruction budget must be positive");
  if (backend != BackendKind::None && !instrumented) throw InvalidConfig("backends need an instrumented run");
}

namespace {

std::uint64_t fnv1a(std::uint64_t h, std::span<const std::uint8_t> bytes) {
  for (std::uint8_t b : bytes) {
    h ^= b;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::unique_ptr<engine::Backend> makeBackend(BackendKind kind, const isa::Image& image) {
  switch (kind) {
    case BackendKind::None: return nullptr;
    case BackendKind::Trace: return std::make_unique<backends::TraceBackend>();
    case BackendKind::MemcheckDemo: return std::make_unique<backends::MemcheckBackend>(image.base, image.end());
    case BackendKind::Checking: return std::make_unique<backends::CheckingBackend>();
  }
  return nullptr;
}

void collectBackend(RunOutcome& out, BackendKind kind, engine::Backend* b) {
  switch (kind) {
    case BackendKind::None: break;
    case BackendKind::Trace: out.backendLog = static_cast<backends::TraceBackend*>(b)->lines(); break;
    case BackendKind::MemcheckDemo: out.backendLog = static_cast<backends::MemcheckBackend*>(b)->reports(); break;
    case BackendKind::Checking: {
      auto* c = static_cast<backends::CheckingBackend*>(b);
      out.violations = c->violations();
      out.signalPcs = c->signalPcs();
      out.sigactionResults = c->sigactionResults();
      break;
    }
  }
}

}  // namespace

RunOutcome runProgram(const isa::Image& image, const RunConfig& config) {
  config.validate();
  RunOutcome out;
  vm::VmConfig vc;
  vc.pageSize = config.pageSize;
  vm::Vm machine(vc);
  machine.load(image);

  vm::SchedulerConfig sc;
  sc.quantum = config.quantum;
  sc.seed = config.seed;
  sc.instructionBudget = config.budget;

  const auto t0 = std::chrono::steady_clock::now();
  std::optional<std::pair<std::uint32_t, std::uint32_t>> cloneRange;
  if (config.instrumented) {
    engine::EngineConfig ec;
    ec.cloneFactor = config.cloneFactor;
    ec.policy = config.policy;
    auto backend = makeBackend(config.backend, image);
    engine::Engine eng(machine, image, ec, out.stats, backend.get());
    cloneRange = std::pair{eng.clone().base(), eng.clone().end()};
    if (config.backend == BackendKind::Checking)
      static_cast<backends::CheckingBackend*>(backend.get())->setCloneRange(cloneRange->first, cloneRange->second);
    try {
      eng.start();
      out.result = vm::runScheduler(machine, eng, sc);
    } catch (const engine::CloneExhausted& e) {
      out.cloneExhausted = true;
      out.engineError = e.what();
    } catch (const engine::EngineError& e) {
      out.engineError = e.what();
    } catch (const engine::InvalidEntry& e) {
      out.engineError = std::string(e.what());
    }
    out.writeFaults = eng.writeFaults();
    collectBackend(out, config.backend, backend.get());
  } else {
    vm::NativeExecution native(machine);
    out.result = vm::runScheduler(machine, native, sc);
  }
  out.stats.wallTime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  out.stats.guestInstructions = out.result.guestInstructions;

  out.output = machine.output();
  out.fetchesOutsideHost = machine.fetchesOutsideHost();
  for (const auto& t : machine.threads()) out.threads.push_back({t.id, t.regs, t.sp, t.alive});
  out.imageAfter.resize(image.bytes.size());
  machine.memory().read(image.base, out.imageAfter);

  std::uint64_t h = 0xcbf29ce484222325ULL;
  const auto& mem = machine.memory();
  for (std::uint32_t page : mem.mappedPages()) {
    const std::uint32_t base = mem.pageBase(page);
    if (cloneRange && base >= cloneRange->first && base < cloneRange->second) continue;
    std::uint8_t idx[4];
    isa::writeLe32(idx, page);
    h = fnv1a(h, idx);
    h = fnv1a(h, mem.page(page));
  }
  out.guestMemoryHash = h;
  return out;
}

int exitCodeFor(const RunOutcome& o) {
  if (o.engineError) return kExitEngine;
  switch (o.result.status) {
    case vm::RunResult::Status::Exited: return o.result.exitCode & 0xFF;
    case vm::RunResult::Status::AllHalted: return 0;
    case vm::RunResult::Status::Crashed: return kExitCrash;
    case vm::RunResult::Status::BudgetExceeded: return kExitBudget;
  }
  return kExitEngine;
}

bool sameGuestState(const RunOutcome& a, const RunOutcome& b, std::string* why) {
  auto fail = [&](std::string msg) {
    if (why != nullptr) *why = std::move(msg);
    return false;
  };
  if (a.engineError || b.engineError) return fail("engine error: " + a.engineError.value_or(b.engineError.value_or("")));
  if (a.output != b.output) return fail("output differs: '" + a.output + "' vs '" + b.output + "'");
  if (a.result.status != b.result.status)
    return fail("status differs: " + std::string(vm::toString(a.result.status)) + " vs " +
                std::string(vm::toString(b.result.status)));
  if (a.result.exitCode != b.result.exitCode) return fail("exit code differs");
  if (a.result.crash != b.result.crash) return fail("crash fault differs");
  if (a.result.crashThread != b.result.crashThread) return fail("crashing thread differs");
  if (a.threads.size() != b.threads.size()) return fail("thread count differs");
  for (std::size_t i = 0; i < a.threads.size(); ++i)
    if (a.threads[i] != b.threads[i]) return fail("thread " + std::to_string(i) + " state differs");
  return true;
}

nlohmann::json configJson(const RunConfig& c) {
  return {
      {"instrumented", c.instrumented},
      {"cleanChecks", c.policy.cleanChecks},
      {"maxUnprotectedPerThread", c.policy.maxUnprotectedPerThread},
      {"checkOnlyFaultingThread", c.policy.checkOnlyFaultingThread},
      {"killTrigger", c.policy.killTrigger},
      {"lookupTrigger", c.policy.lookupTrigger},
      {"backend", std::string(toString(c.backend))},
      {"quantum", c.quantum},
      {"seed", c.seed},
      {"pageSize", c.pageSize},
      {"cloneFactor", c.cloneFactor},
      {"budget", c.budget},
  };
}

nlohmann::json countersJson(const RunStats& s) {
  return {
      {"schemaVersion", 1},
      {"guestInstructions", s.guestInstructions},
      {"protectionFaults", s.protectionFaults},
      {"pageCompares", s.pageCompares},
      {"dirtyFlushes", s.dirtyFlushes},
      {"reprotections", s.reprotections},
      {"lookups", s.lookups},
      {"trampolineCalls", s.trampolineCalls},
      {"blocksInstrumented", s.blocksInstrumented},
      {"reinstrumentInPlace", s.reinstrumentInPlace},
      {"reinstrumentJump", s.reinstrumentJump},
      {"reinstrumentBrk", s.reinstrumentBrk},
      {"brkRedirects", s.brkRedirects},
      {"hookCalls", s.hookCalls},
      {"cloneBytes", s.cloneBytes},
      {"wallTime", s.wallTime},
  };
}

nlohmann::json statsJson(const RunOutcome& o, const RunConfig& config) {
  nlohmann::json j = countersJson(o.stats);
  j.update({
      {"status", std::string(vm::toString(o.result.status))},
      {"exitCode", exitCodeFor(o)},
      {"config", configJson(config)},
  });
  if (o.engineError) j["engineError"] = *o.engineError;
  if (o.result.crash) {
    j["crash"] = {{"kind", std::string(vm::toString(o.result.crash->kind))},
                  {"addr", o.result.crash->addr},
                  {"thread", o.result.crashThread}};
  }
  return j;
}

std::vector<BenchPolicy> defaultGrid() {
  std::vector<BenchPolicy> grid;
  grid.push_back({"default", {}});
  guard::SmcPolicy all;
  all.checkOnlyFaultingThread = false;
  grid.push_back({"all-threads", all});
  for (std::uint32_t n : {1u, 3u, 5u, 8u}) {
    guard::SmcPolicy p;
    p.cleanChecks = n;
    grid.push_back({"n" + std::to_string(n), p});
  }
  guard::SmcPolicy k4;
  k4.maxUnprotectedPerThread = 4;
  grid.push_back({"k4", k4});
  return grid;
}

std::vector<BenchRow> runBench(const std::vector<BenchProgram>& programs, const std::vector<BenchPolicy>& grid,
                               const RunConfig& base) {
  std::vector<BenchRow> rows;
  for (const auto& prog : programs) {
    std::optional<RunOutcome> native;
    std::string nativeError;
    try {
      RunConfig nc = base;
      nc.instrumented = false;
      nc.backend = BackendKind::None;
      native = runProgram(prog.image, nc);
    } catch (const std::exception& e) {
      nativeError = e.what();
    }
    for (const auto& pol : grid) {
      BenchRow row;
      row.program = prog.name;
      row.policy = pol.name;
      try {
        RunConfig ic = base;
        ic.instrumented = true;
        ic.policy = pol.policy;
        RunOutcome o = runProgram(prog.image, ic);
        row.stats = o.stats;
        row.exitCode = exitCodeFor(o);
        std::string why;
        if (!native) {
          row.error = "native run failed: " + nativeError;
        } else if (sameGuestState(*native, o, &why)) {
          row.matchesNative = true;
        } else {
          row.error = why;
        }
      } catch (const std::exception& e) {
        row.error = e.what();
      }
      rows.push_back(std::move(row));
    }
  }
  return rows;
}

std::string formatBench(const std::vector<BenchRow>& rows) {
  std::ostringstream os;
  char buf[256];
  std::snprintf(buf, sizeof buf, "%-20s %-12s %6s %10s %8s %8s %8s %8s %6s %6s %6s %8s %9s %s\n", "program", "policy",
                "exit", "insns", "pfaults", "compares", "dirty", "lookups", "inpl", "jump", "brk", "redirect",
                "wall_ms", "oracle");
  os << buf;
  for (const auto& r : rows) {
    const RunStats& s = r.stats;
    std::snprintf(buf, sizeof buf, "%-20s %-12s %6d %10llu %8llu %8llu %8llu %8llu %6llu %6llu %6llu %8llu %9.3f %s",
                  r.program.c_str(), r.policy.c_str(), r.exitCode,
                  static_cast<unsigned long long>(s.guestInstructions),
                  static_cast<unsigned long long>(s.protectionFaults), static_cast<unsigned long long>(s.pageCompares),
                  static_cast<unsigned long long>(s.dirtyFlushes), static_cast<unsigned long long>(s.lookups),
                  static_cast<unsigned long long>(s.reinstrumentInPlace),
                  static_cast<unsigned long long>(s.reinstrumentJump),
                  static_cast<unsigned long long>(s.reinstrumentBrk), static_cast<unsigned long long>(s.brkRedirects),
                  s.wallTime * 1000.0, r.matchesNative ? "match" : "MISMATCH");
    os << buf;
    if (!r.error.empty()) os << "  (" << r.error << ")";
    os << '\n';
  }
  return os.str();
}

}  // namespace smc::harness
