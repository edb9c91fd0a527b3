#pragma once

// Clone-based instrumentation engine. Guest code is copied on demand into a
// clone region and executed only from there; control transfers whose target
// is not known at copy time go through callouts into the engine.
//
// Each original instruction becomes one clone "expansion": optional hook
// callouts followed by the body. The first byte of every expansion is a
// boundary (threads switch and signals arrive only there) and exactly one
// instruction of the body is its primary (the one that retires the original
// instruction). This keeps thread interleaving identical to native runs.

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

#include "smc/guard.hpp"
#include "smc/reinstrument.hpp"
#include "smc/scheduler.hpp"
#include "smc/stats.hpp"
#include "smc/vm.hpp"
#include "smc/xlat.hpp"

namespace smc::engine {

namespace detail {
class Emitter;
}

class CloneExhausted : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Internal inconsistency or an unsupported guest behavior (entering an
// instrumented instruction in its middle).
class EngineError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// The code at an entry address does not decode. `fault` is what a native run
// raises when it reaches that address.
class InvalidEntry : public std::runtime_error {
 public:
  InvalidEntry(std::uint32_t addr, vm::Fault fault)
      : std::runtime_error("no valid instruction at entry"), addr_(addr), fault_(fault) {}
  std::uint32_t addr() const { return addr_; }
  const vm::Fault& fault() const { return fault_; }

 private:
  std::uint32_t addr_;
  vm::Fault fault_;
};

struct EngineConfig {
  std::uint32_t cloneBase = 0x40000000;
  std::uint32_t cloneFactor = 16;  // clone size = factor x image size
  std::uint32_t minCloneSize = 0x10000;
  std::size_t cacheSlots = 1024;
  guard::SmcPolicy policy;
  std::uint32_t maxFollowedTransfers = 64;
  std::uint32_t maxBlockBytes = 4096;
};

enum class CalloutKind : std::uint8_t { TrampolineLookup, BackendHook, BreakpointRedirect, SyscallGate, CallPush };

enum class LookupKind : std::uint8_t {
  Direct,        // exit stub for a known target; backpatched to a JMP once resolved
  Return,        // pops the original return address
  IndirectJump,  // target in a register
  Resume,        // boundary stub: retry the lookup, crash as native if it fails
};

enum class HookKind : std::uint8_t { MemoryAccess, BasicBlockEnd };

struct Callout {
  CalloutKind kind = CalloutKind::TrampolineLookup;
  LookupKind lookup = LookupKind::Direct;
  HookKind hook = HookKind::MemoryAccess;
  std::uint32_t origPc = 0;  // original instruction this callout stands for
  std::uint32_t target = 0;  // lookup target, callee, basic block start or redirect origin
  std::uint32_t value = 0;   // return address, register, syscall number or absolute address
  bool registerBased = false;
  bool isWrite = false;
};

class CalloutRegistry {
 public:
  std::uint32_t add(const Callout& c) {
    callouts_.push_back(c);
    return static_cast<std::uint32_t>(callouts_.size() - 1);
  }
  const Callout& at(std::uint32_t id) const { return callouts_.at(id); }
  std::size_t size() const { return callouts_.size(); }

 private:
  std::vector<Callout> callouts_;
};

// What hooks see: original addresses and guest registers only.
struct HookContext {
  int thread = 0;
  std::uint32_t origPc = 0;
  const std::array<std::uint32_t, isa::kRegisterCount>* regs = nullptr;
  std::uint32_t sp = 0;
};

class Backend {
 public:
  virtual ~Backend() = default;
  virtual bool wantsMemoryAccess() const { return false; }
  virtual bool wantsBasicBlockEnd() const { return false; }

  virtual void memoryAccess(const HookContext&, std::uint32_t /*addr*/, std::uint32_t /*size*/, bool /*isWrite*/) {}
  virtual void basicBlockEnd(const HookContext&, std::uint32_t /*origStart*/) {}
  virtual void syscallPre(const HookContext&, std::uint8_t /*number*/) {}
  virtual void syscallPost(const HookContext&, const vm::SyscallEffect&) {}
  virtual void routineEntry(const HookContext&, std::uint32_t /*addr*/) {}
  // Called after the engine entered a guest handler; savedPc is what the
  // handler observes as the interrupted pc.
  virtual void signalEntry(const HookContext&, int /*signum*/, std::uint32_t /*savedPc*/) {}
};

// One original instruction as currently instrumented.
struct InstructionRecord {
  std::uint32_t orig = 0;
  std::uint8_t length = 0;
  std::array<std::uint8_t, isa::kMaxInstructionLength> bytes{};  // at instrumentation time
  std::uint32_t cloneStart = 0;
  std::uint32_t expansionLength = 0;
  // The clone bytes right after the expansion continue at orig + length.
  bool nextIsFallThrough = false;
  std::uint32_t blockStart = 0;  // basic block the instruction belonged to when emitted

  std::uint32_t origEnd() const { return orig + length; }
  std::uint32_t cloneEnd() const { return cloneStart + expansionLength; }
};

struct EmittedSegment {
  std::uint32_t cloneStart = 0;
  std::uint32_t cloneEnd = 0;
  std::optional<std::uint32_t> tableAddr;
};

struct PatchSite {
  Strategy strategy;
  std::uint32_t origStart;
  std::uint32_t cloneStart;
  std::uint32_t cloneLength;
  std::optional<std::uint32_t> newFragment;  // JumpPatch target
};

class CloneRegion {
 public:
  static constexpr std::uint8_t kBoundary = 1;
  static constexpr std::uint8_t kPrimary = 2;

  CloneRegion(std::uint32_t base, std::uint32_t size) : base_(base), end_(base + size), cursor_(base), flags_(size, 0) {}

  std::uint32_t base() const { return base_; }
  std::uint32_t end() const { return end_; }
  std::uint32_t cursor() const { return cursor_; }
  bool contains(std::uint32_t addr) const { return addr >= base_ && addr < end_; }

  // Reserves `size` bytes at the cursor. Throws CloneExhausted.
  std::uint32_t allocate(std::uint32_t size);
  // Whether `size` more bytes fit at the cursor.
  bool fits(std::uint32_t size) const { return static_cast<std::uint64_t>(cursor_) + size <= end_; }

  std::uint8_t flags(std::uint32_t addr) const { return contains(addr) ? flags_[addr - base_] : 0; }
  void setFlag(std::uint32_t addr, std::uint8_t f) { flags_.at(addr - base_) |= f; }
  void clearFlag(std::uint32_t addr, std::uint8_t f) { flags_.at(addr - base_) &= static_cast<std::uint8_t>(~f); }

  std::vector<EmittedSegment>& segments() { return segments_; }
  const std::vector<EmittedSegment>& segments() const { return segments_; }

 private:
  std::uint32_t base_;
  std::uint32_t end_;
  std::uint32_t cursor_;
  std::vector<std::uint8_t> flags_;
  std::vector<EmittedSegment> segments_;
};

class Engine final : public vm::ExecutionMode {
 public:
  Engine(vm::Vm& vm, const isa::Image& image, const EngineConfig& config, RunStats& stats,
         Backend* backend = nullptr);
  ~Engine() override;

  // Maps the clone region and points every existing thread at a resume stub
  // for its original pc.
  void start();

  // Instruments the block starting at origAddr (if not already instrumented)
  // and returns its clone entry. Throws InvalidEntry, CloneExhausted.
  std::uint32_t instrumentBlock(std::uint32_t origAddr);
  // Fires the lookup flush trigger for `thread`, then returns the current
  // clone address for target, instrumenting it if needed.
  std::uint32_t lookupOrInstrument(int thread, std::uint32_t target);

  // Incorporates changed original byte ranges into the clone.
  void applyModifications(std::span<const guard::ChangedRange> ranges);
  // Redirects a thread that hit a breakpoint-filled site. Throws EngineError
  // when the site has no translation.
  std::uint32_t onBreakpointHit(int thread, std::uint32_t cloneAddr);

  // Original address for a clone boundary (expansion start or resume stub).
  std::optional<std::uint32_t> origForClone(std::uint32_t cloneAddr) const;

  // ExecutionMode
  bool atBoundary(const vm::ThreadContext& ctx) const override;
  bool retires(std::uint32_t pc) const override;
  vm::Handling onSyscall(vm::ThreadContext& ctx, std::uint8_t number) override;
  vm::Handling onCallout(vm::ThreadContext& ctx, std::uint32_t id) override;
  vm::Handling onFault(vm::ThreadContext& ctx, const vm::Fault& fault) override;
  vm::Handling onHostSignal(vm::ThreadContext& ctx, const vm::Delivery& delivery) override;

  xlat::XlatMap& xlat() { return *xlat_; }
  const xlat::XlatMap& xlat() const { return *xlat_; }
  guard::SmcGuard& guard() { return guard_; }
  const guard::SmcGuard& guard() const { return guard_; }
  const CloneRegion& clone() const { return clone_; }
  const CalloutRegistry& callouts() const { return callouts_; }
  const std::map<std::uint32_t, InstructionRecord>& records() const { return records_; }
  const std::vector<PatchPlan>& plans() const { return plans_; }
  const std::vector<PatchSite>& patchSites() const { return patchSites_; }
  const vm::SignalTable& shadowSignals() const { return shadow_; }
  const EngineConfig& config() const { return config_; }
  // ProtectionWrite faults raised by guest stores, counted independently of the guard.
  std::uint64_t writeFaults() const { return writeFaults_; }

  // Native fault for reaching addr in an uninstrumented run.
  vm::Fault nativeFaultAt(std::uint32_t addr) const;

 private:
  class CloneReader;
  struct Segment;
  struct RunPatch;

  // Emission helpers shared by block instrumentation and reinstrumentation.
  std::optional<std::uint32_t> knownClone(std::uint32_t orig);
  void emitHooks(detail::Emitter& em, std::uint32_t orig, const isa::Instruction& insn, std::uint32_t blockStart);
  // Body of a non-followed instruction. Direct transfers exit through stubs.
  void emitBody(detail::Emitter& em, std::uint32_t orig, const isa::Instruction& insn);
  void emitExit(detail::Emitter& em, isa::Opcode op, std::uint8_t reg, std::uint32_t target, bool primary);
  // Inline transfer to target without a primary: a JMP if known, else a
  // lookup stub in place.
  void emitContinuation(detail::Emitter& em, std::uint32_t target);
  std::uint32_t directStubCallout(std::uint32_t target);

  // Places code + stubs + table at em.base(), which must equal the cursor.
  EmittedSegment commitSegment(detail::Emitter& em, const std::vector<InstructionRecord>& recs);
  void writeClone(std::uint32_t addr, std::span<const std::uint8_t> bytes);
  std::uint32_t placeStubs(detail::Emitter& em);
  void applyFlags(const detail::Emitter& em);

  std::uint32_t resumeStub(std::uint32_t target);
  std::optional<std::uint32_t> tryLookup(int thread, std::uint32_t target);
  void flush(int thread, guard::Trigger trigger);
  void handleWriteFault(int thread, std::uint32_t addr, std::uint32_t size);
  HookContext hookContext(const vm::ThreadContext& ctx, std::uint32_t origPc) const;

  vm::Handling syscallGate(vm::ThreadContext& ctx, const Callout& c);
  vm::Handling lookupCallout(vm::ThreadContext& ctx, const Callout& c);

  // Reinstrumentation internals.
  void patchRun(std::vector<InstructionRecord> run);
  bool tryInPlace(const std::vector<InstructionRecord>& run, const std::vector<isa::Instruction>& fresh);
  void retireRecords(const std::vector<InstructionRecord>& run);
  void brkFill(std::uint32_t start, std::uint32_t len, std::uint32_t redirectOrig);
  void clearPrimaries(std::uint32_t start, std::uint32_t len);
  void fixupStrandedThreads(std::uint32_t start, std::uint32_t len);
  isa::DecodeResult decodeOrig(std::uint32_t addr) const;

  vm::Vm& vm_;
  isa::Image image_;
  EngineConfig config_;
  RunStats& stats_;
  Backend* backend_;
  CloneRegion clone_;
  std::unique_ptr<CloneReader> reader_;
  std::unique_ptr<xlat::XlatMap> xlat_;
  guard::SmcGuard guard_;
  CalloutRegistry callouts_;
  std::map<std::uint32_t, InstructionRecord> records_;
  std::map<std::uint32_t, std::uint32_t> resumeStubs_;   // target -> stub
  std::map<std::uint32_t, std::uint32_t> stubTargets_;   // stub -> target
  const std::map<std::uint32_t, std::uint32_t>* local_ = nullptr;  // starts of code being emitted
  vm::SignalTable shadow_;
  std::vector<PatchPlan> plans_;
  std::vector<PatchSite> patchSites_;
  std::uint64_t writeFaults_ = 0;
};

}  // namespace smc::engine
