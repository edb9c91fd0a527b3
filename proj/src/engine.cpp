#include "smc/engine.hpp"

#include <algorithm>
#include <cstdio>
#include <string>

#include "emitter.hpp"

namespace smc::engine {

using detail::Emitter;
using isa::Instruction;
using isa::Opcode;
using vm::Handling;

namespace {

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

std::uint32_t cloneSizeFor(const isa::Image& image, const EngineConfig& c) {
  std::uint64_t size = static_cast<std::uint64_t>(image.bytes.size()) * c.cloneFactor;
  size = std::max<std::uint64_t>(size, c.minCloneSize);
  size = (size + 0xFF) & ~std::uint64_t{0xFF};
  const std::uint64_t room = 0x100000000ull - c.cloneBase;
  if (size > room) throw std::invalid_argument("clone region does not fit below 4 GiB");
  return static_cast<std::uint32_t>(size);
}

bool fallsThrough(Opcode op) {
  switch (op) {
    case Opcode::Jmp:
    case Opcode::Call:
    case Opcode::JmpR:
    case Opcode::Ret:
    case Opcode::Halt:
      return false;
    default:
      return true;
  }
}

bool endsBasicBlock(Opcode op) {
  switch (op) {
    case Opcode::Jmp:
    case Opcode::Call:
    case Opcode::Jz:
    case Opcode::JmpR:
    case Opcode::Ret:
    case Opcode::Halt:
      return true;
    default:
      return false;
  }
}

Instruction callout(std::uint32_t id) { return {Opcode::Callout, 0, 0, id}; }

}  // namespace

class Engine::CloneReader final : public xlat::ByteReader {
 public:
  explicit CloneReader(const vm::GuestMemory& memory) : memory_(memory) {}
  bool read(std::uint32_t addr, std::span<std::uint8_t> out) const override { return memory_.read(addr, out); }

 private:
  const vm::GuestMemory& memory_;
};

std::uint32_t CloneRegion::allocate(std::uint32_t size) {
  if (!fits(size))
    throw CloneExhausted("clone region exhausted: " + std::to_string(cursor_ - base_) + " of " +
                         std::to_string(end_ - base_) + " bytes used, " + std::to_string(size) + " more requested");
  std::uint32_t at = cursor_;
  cursor_ += size;
  return at;
}

Engine::Engine(vm::Vm& vm, const isa::Image& image, const EngineConfig& config, RunStats& stats, Backend* backend)
    : vm_(vm),
      image_(image),
      config_(config),
      stats_(stats),
      backend_(backend),
      clone_(config.cloneBase, cloneSizeFor(image, config)),
      reader_(std::make_unique<CloneReader>(vm.memory())),
      xlat_(std::make_unique<xlat::XlatMap>(*reader_, clone_.base(), clone_.end(), config.cacheSlots)),
      guard_(vm.memory(), stats) {
  guard_.setPolicy(config.policy);
  guard_.setInstructionStartFn([this](std::uint32_t a) { return xlat_->instructionStartContaining(a); });
}

Engine::~Engine() = default;

void Engine::start() {
  auto& mem = vm_.memory();
  for (std::uint32_t page : mem.mappedPages()) {
    const std::uint32_t b = mem.pageBase(page);
    if (b + mem.pageSize() > clone_.base() && b < clone_.end())
      throw std::invalid_argument("guest memory overlaps the clone region at " + hex(b));
  }
  mem.map(clone_.base(), clone_.end() - clone_.base());
  vm_.setHostRange(clone_.base(), clone_.end());
  for (auto& t : vm_.threads()) t.pc = resumeStub(t.pc);
}

// --- emission --------------------------------------------------------------

isa::DecodeResult Engine::decodeOrig(std::uint32_t addr) const {
  if (vm_.inHostRange(addr)) return {std::nullopt, isa::DecodeError::Truncated};
  std::uint8_t buf[isa::kMaxInstructionLength];
  std::size_t n = vm_.memory().readAvailable(addr, buf);
  if (n == 0) return {std::nullopt, isa::DecodeError::Truncated};
  return isa::decode(std::span<const std::uint8_t>(buf, n), false);
}

vm::Fault Engine::nativeFaultAt(std::uint32_t addr) const {
  if (vm_.inHostRange(addr) || !vm_.memory().isMapped(addr)) return {vm::FaultKind::Unmapped, addr, 0};
  auto d = decodeOrig(addr);
  if (d && d->opcode == Opcode::Brk) return {vm::FaultKind::Breakpoint, addr, 0};
  return {vm::FaultKind::IllegalInstruction, addr, 0};
}

std::optional<std::uint32_t> Engine::knownClone(std::uint32_t orig) {
  if (local_ != nullptr) {
    auto it = local_->find(orig);
    if (it != local_->end()) return it->second;
  }
  return xlat_->origToClone(orig);
}

std::uint32_t Engine::directStubCallout(std::uint32_t target) {
  Callout c;
  c.kind = CalloutKind::TrampolineLookup;
  c.lookup = LookupKind::Direct;
  c.origPc = target;
  c.target = target;
  return callouts_.add(c);
}

void Engine::emitHooks(Emitter& em, std::uint32_t orig, const Instruction& insn, std::uint32_t blockStart) {
  if (backend_ == nullptr) return;
  if (backend_->wantsMemoryAccess()) {
    Callout c;
    c.kind = CalloutKind::BackendHook;
    c.hook = HookKind::MemoryAccess;
    c.origPc = orig;
    bool access = true;
    switch (insn.opcode) {
      case Opcode::Load: c.value = insn.imm; break;
      case Opcode::Store: c.value = insn.imm; c.isWrite = true; break;
      case Opcode::LoadPc: c.value = orig + insn.length() + insn.imm; break;
      case Opcode::LoadR: c.value = insn.r2; c.registerBased = true; break;
      case Opcode::StoreR: c.value = insn.r1; c.registerBased = true; c.isWrite = true; break;
      default: access = false;
    }
    if (access) em.put(callout(callouts_.add(c)));
  }
  if (backend_->wantsBasicBlockEnd() && endsBasicBlock(insn.opcode)) {
    Callout c;
    c.kind = CalloutKind::BackendHook;
    c.hook = HookKind::BasicBlockEnd;
    c.origPc = orig;
    c.target = blockStart;
    em.put(callout(callouts_.add(c)));
  }
}

void Engine::emitExit(Emitter& em, Opcode op, std::uint8_t reg, std::uint32_t target, bool primary) {
  if (auto c = knownClone(target)) {
    em.put({op, reg, 0, *c}, primary);
  } else {
    em.putToStub(op, reg, em.addStub(directStubCallout(target)), primary);
  }
}

void Engine::emitContinuation(Emitter& em, std::uint32_t target) {
  if (auto c = knownClone(target)) {
    em.put({Opcode::Jmp, 0, 0, *c});
  } else {
    em.put(callout(directStubCallout(target)));
  }
}

void Engine::emitBody(Emitter& em, std::uint32_t orig, const Instruction& insn) {
  const std::uint32_t next = orig + insn.length();
  Callout c;
  c.origPc = orig;
  switch (insn.opcode) {
    case Opcode::LeaPc:
      em.put({Opcode::LoadI, insn.r1, 0, next + insn.imm}, true);
      break;
    case Opcode::LoadPc:
      em.put({Opcode::Load, insn.r1, 0, next + insn.imm}, true);
      break;
    case Opcode::Jmp:
      emitExit(em, Opcode::Jmp, 0, insn.imm, true);
      break;
    case Opcode::Call:
      c.kind = CalloutKind::CallPush;
      c.target = insn.imm;
      c.value = next;
      em.put(callout(callouts_.add(c)), true);
      emitExit(em, Opcode::Jmp, 0, insn.imm, false);
      break;
    case Opcode::Jz:
      emitExit(em, Opcode::Jz, insn.r1, insn.imm, true);
      break;
    case Opcode::JmpR:
      c.kind = CalloutKind::TrampolineLookup;
      c.lookup = LookupKind::IndirectJump;
      c.value = insn.r1;
      em.put(callout(callouts_.add(c)), true);
      break;
    case Opcode::Ret:
      c.kind = CalloutKind::TrampolineLookup;
      c.lookup = LookupKind::Return;
      em.put(callout(callouts_.add(c)), true);
      break;
    case Opcode::Syscall:
      c.kind = CalloutKind::SyscallGate;
      c.value = insn.imm;
      em.put(callout(callouts_.add(c)), true);
      break;
    case Opcode::Brk:
    case Opcode::Illegal:
    case Opcode::Callout:
      throw EngineError("cannot instrument " + std::string(isa::info(insn.opcode).mnemonic) + " at " + hex(orig));
    default:
      em.put(insn, true);
      break;
  }
}

void Engine::writeClone(std::uint32_t addr, std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return;
  if (!clone_.contains(addr) || addr + bytes.size() > clone_.end())
    throw EngineError("engine write outside the clone region at " + hex(addr));
  vm_.memory().hostWrite(addr, bytes);
  stats_.cloneBytes = clone_.cursor() - clone_.base();
}

void Engine::applyFlags(const Emitter& em) {
  for (std::uint32_t b : em.boundaries()) clone_.setFlag(b, CloneRegion::kBoundary);
  for (std::uint32_t p : em.primaries()) clone_.setFlag(p, CloneRegion::kPrimary);
}

std::uint32_t Engine::placeStubs(Emitter& em) {
  if (em.stubCount() == 0) {
    em.resolve(0, 0);
    return 0;
  }
  auto bytes = em.stubBytes();
  std::uint32_t at = clone_.allocate(static_cast<std::uint32_t>(bytes.size()));
  em.resolve(at, 0);
  writeClone(at, bytes);
  return at;
}

EmittedSegment Engine::commitSegment(Emitter& em, const std::vector<InstructionRecord>& recs) {
  if (em.base() != clone_.cursor()) throw EngineError("segment emitted away from the clone cursor");
  const std::uint32_t stubBase = em.here();
  const std::uint32_t afterStubs = stubBase + static_cast<std::uint32_t>(em.stubCount()) * Emitter::kStubSize;
  std::vector<std::uint8_t> table;
  std::optional<std::uint32_t> tableAddr;
  if (!recs.empty()) {
    xlat::Layout layout;
    layout.reserve(recs.size());
    for (const auto& r : recs) layout.push_back({r.orig, r.cloneStart});
    table = xlat::emitTable(layout);
    tableAddr = (afterStubs + 3u) & ~3u;
  }
  const std::uint32_t end = tableAddr ? *tableAddr + static_cast<std::uint32_t>(table.size()) : afterStubs;
  em.resolve(stubBase, end);

  std::vector<std::uint8_t> bytes = em.code();
  auto stubs = em.stubBytes();
  bytes.insert(bytes.end(), stubs.begin(), stubs.end());
  if (tableAddr) {
    bytes.resize(*tableAddr - em.base(), static_cast<std::uint8_t>(Opcode::Brk));
    bytes.insert(bytes.end(), table.begin(), table.end());
  }
  clone_.allocate(end - em.base());
  writeClone(em.base(), bytes);
  applyFlags(em);

  if (tableAddr) {
    std::vector<xlat::OrigRange> ranges;
    for (const auto& r : recs) {
      if (!ranges.empty() && ranges.back().stop == r.orig) {
        ranges.back().stop = r.origEnd();
      } else {
        ranges.push_back({r.orig, r.origEnd()});
      }
    }
    xlat_->registerRanges(ranges, *tableAddr);
    for (const auto& r : ranges) guard_.onInstrumented(r);
    for (const auto& r : recs) records_[r.orig] = r;
  }
  EmittedSegment seg{em.base(), end, tableAddr};
  clone_.segments().push_back(seg);
  return seg;
}

std::uint32_t Engine::instrumentBlock(std::uint32_t entry) {
  if (auto c = xlat_->origToClone(entry)) return *c;

  std::map<std::uint32_t, std::uint32_t> local;
  std::map<std::uint32_t, std::uint32_t> localRanges;
  struct LocalScope {
    const std::map<std::uint32_t, std::uint32_t>*& slot;
    ~LocalScope() { slot = nullptr; }
  } scope{local_};
  local_ = &local;

  auto overlapsLocal = [&](std::uint32_t s, std::uint32_t e) {
    auto it = localRanges.lower_bound(s);
    if (it != localRanges.end() && it->first < e) return true;
    if (it != localRanges.begin() && std::prev(it)->second > s) return true;
    return false;
  };

  std::optional<std::uint32_t> entryClone;
  std::uint32_t followed = 0;
  std::uint32_t emitted = 0;
  std::uint32_t cur = entry;
  std::uint32_t blockStart = entry;
  bool done = false;

  while (!done) {
    Emitter em(clone_.cursor());
    std::vector<InstructionRecord> recs;
    bool closeSegment = false;

    while (!done && !closeSegment) {
      const bool first = !entryClone.has_value();
      if (auto c = knownClone(cur)) {
        em.put({Opcode::Jmp, 0, 0, *c});
        done = true;
        break;
      }
      auto decoded = decodeOrig(cur);
      const bool invalid = !decoded || decoded->opcode == Opcode::Brk || decoded->opcode == Opcode::Illegal;
      if (invalid) {
        if (first) throw InvalidEntry(cur, nativeFaultAt(cur));
        emitContinuation(em, cur);
        done = true;
        break;
      }
      const Instruction insn = *decoded;
      const std::uint32_t len = insn.length();
      if (xlat_->overlaps({cur, cur + len}) || overlapsLocal(cur, cur + len)) {
        if (first) throw EngineError("entry " + hex(cur) + " lies inside an instrumented instruction");
        emitContinuation(em, cur);
        done = true;
        break;
      }
      if (!first && emitted + em.size() >= config_.maxBlockBytes) {
        emitContinuation(em, cur);
        done = true;
        break;
      }

      InstructionRecord rec;
      rec.orig = cur;
      rec.length = static_cast<std::uint8_t>(len);
      vm_.memory().read(cur, std::span<std::uint8_t>(rec.bytes.data(), len));
      rec.blockStart = blockStart;
      em.markBoundary();
      rec.cloneStart = em.here();
      local[cur] = rec.cloneStart;
      localRanges[cur] = cur + len;
      if (first) entryClone = rec.cloneStart;
      emitHooks(em, cur, insn, blockStart);

      if (insn.opcode == Opcode::Jmp || insn.opcode == Opcode::Call) {
        const std::uint32_t target = insn.imm;
        const bool isCall = insn.opcode == Opcode::Call;
        if (isCall) {
          Callout c;
          c.kind = CalloutKind::CallPush;
          c.origPc = cur;
          c.target = target;
          c.value = cur + len;
          em.put(callout(callouts_.add(c)), true);
        }
        const bool known = knownClone(target).has_value();
        const bool follow = !known && followed < config_.maxFollowedTransfers &&
                            emitted + em.size() + xlat::kHeaderSize < config_.maxBlockBytes;
        if (!follow) {
          emitExit(em, Opcode::Jmp, 0, target, !isCall);
          done = true;
        } else {
          ++followed;
          if (target > cur) {
            std::uint32_t at = em.put({Opcode::Jmp, 0, 0, 0}, !isCall);
            isa::writeLe32(em.code().data() + (at - em.base()) + 1, at + isa::kJumpLength);
          } else {
            // Table layouts must increase on both sides; a backward edge
            // starts a new segment right after this one.
            em.putToEnd(!isCall);
            closeSegment = true;
          }
        }
        rec.expansionLength = em.here() - rec.cloneStart;
        rec.nextIsFallThrough = false;
        recs.push_back(rec);
        cur = target;
        blockStart = target;
        continue;
      }

      emitBody(em, cur, insn);
      rec.expansionLength = em.here() - rec.cloneStart;
      rec.nextIsFallThrough = fallsThrough(insn.opcode);
      recs.push_back(rec);
      if (!fallsThrough(insn.opcode)) {
        done = true;
        break;
      }
      cur += len;
      if (endsBasicBlock(insn.opcode)) blockStart = cur;
    }

    emitted += em.size();
    commitSegment(em, recs);
  }
  ++stats_.blocksInstrumented;
  return *entryClone;
}

// --- lookups ---------------------------------------------------------------

std::uint32_t Engine::resumeStub(std::uint32_t target) {
  auto it = resumeStubs_.find(target);
  if (it != resumeStubs_.end()) return it->second;
  Callout c;
  c.kind = CalloutKind::TrampolineLookup;
  c.lookup = LookupKind::Resume;
  c.origPc = target;
  c.target = target;
  const std::uint32_t id = callouts_.add(c);
  const std::uint32_t at = clone_.allocate(Emitter::kStubSize);
  writeClone(at, isa::encode(callout(id)));
  clone_.setFlag(at, CloneRegion::kBoundary);
  resumeStubs_[target] = at;
  stubTargets_[at] = target;
  return at;
}

void Engine::flush(int thread, guard::Trigger trigger) {
  auto changed = guard_.onFlushTrigger(thread, trigger);
  if (!changed.empty()) applyModifications(changed);
}

std::uint32_t Engine::lookupOrInstrument(int thread, std::uint32_t target) {
  flush(thread, guard::Trigger::Lookup);
  ++stats_.lookups;
  if (auto c = xlat_->origToClone(target)) return *c;
  return instrumentBlock(target);
}

std::optional<std::uint32_t> Engine::tryLookup(int thread, std::uint32_t target) {
  try {
    return lookupOrInstrument(thread, target);
  } catch (const InvalidEntry&) {
    return std::nullopt;
  }
}

void Engine::handleWriteFault(int thread, std::uint32_t addr, std::uint32_t size) {
  std::vector<guard::ChangedRange> changed;
  try {
    changed = guard_.onWriteFault(thread, addr, size);
  } catch (const guard::FaultOnUnprotectedPage& e) {
    throw EngineError(std::string(e.what()) + " at " + hex(addr));
  }
  if (!changed.empty()) applyModifications(changed);
}

std::optional<std::uint32_t> Engine::origForClone(std::uint32_t cloneAddr) const {
  auto it = stubTargets_.find(cloneAddr);
  if (it != stubTargets_.end()) return it->second;
  auto r = xlat_->cloneToOrig(cloneAddr);
  if (!r) return std::nullopt;
  return r.orig;
}

HookContext Engine::hookContext(const vm::ThreadContext& ctx, std::uint32_t origPc) const {
  return HookContext{ctx.id, origPc, &ctx.regs, ctx.sp};
}

// --- execution mode --------------------------------------------------------

bool Engine::atBoundary(const vm::ThreadContext& ctx) const {
  if (!clone_.contains(ctx.pc)) return true;
  return (clone_.flags(ctx.pc) & CloneRegion::kBoundary) != 0;
}

bool Engine::retires(std::uint32_t pc) const { return (clone_.flags(pc) & CloneRegion::kPrimary) != 0; }

Handling Engine::onSyscall(vm::ThreadContext& ctx, std::uint8_t) {
  throw EngineError("SYSCALL executed outside a gate at " + hex(ctx.pc));
}

Handling Engine::lookupCallout(vm::ThreadContext& ctx, const Callout& c) {
  ++stats_.trampolineCalls;
  const int tid = ctx.id;
  const std::uint32_t site = ctx.pc;
  std::uint32_t target = c.target;
  switch (c.lookup) {
    case LookupKind::Direct: {
      auto r = tryLookup(tid, target);
      auto& t = vm_.thread(tid);
      if (r) {
        std::uint8_t current[Emitter::kStubSize];
        if (vm_.memory().read(site, current) && current[0] == static_cast<std::uint8_t>(Opcode::Callout))
          writeClone(site, isa::encode({Opcode::Jmp, 0, 0, *r}));
        t.pc = *r;
      } else {
        t.pc = resumeStub(target);
      }
      return Handling::done();
    }
    case LookupKind::Return: {
      auto v = vm_.guestRead32(ctx.sp);
      if (!v) return Handling::crash({vm::FaultKind::Unmapped, ctx.sp, 4});
      ctx.sp += 4;
      target = *v;
      break;
    }
    case LookupKind::IndirectJump:
      target = ctx.regs.at(c.value);
      break;
    case LookupKind::Resume: {
      auto r = tryLookup(tid, target);
      if (!r) return Handling::crash(nativeFaultAt(target));
      vm_.thread(tid).pc = *r;
      return Handling::done();
    }
  }
  auto r = tryLookup(tid, target);
  vm_.thread(tid).pc = r ? *r : resumeStub(target);
  return Handling::done();
}

Handling Engine::syscallGate(vm::ThreadContext& ctx, const Callout& c) {
  const int tid = ctx.id;
  const std::uint32_t resumeAt = ctx.pc + Emitter::kStubSize;
  const auto number = static_cast<std::uint8_t>(c.value);
  if (backend_ != nullptr) backend_->syscallPre(hookContext(ctx, c.origPc), number);

  ctx.pc = c.origPc + 2;
  vm::SyscallEffect effect = vm_.dispatchSyscall(ctx, number);
  vm::ThreadContext& t = vm_.thread(tid);  // SPAWN may have reallocated the thread table
  if (effect.fault) {
    t.pc = resumeAt - Emitter::kStubSize;
    return Handling::crash(*effect.fault);
  }

  const std::uint32_t restored = t.pc;
  t.pc = resumeAt;
  switch (static_cast<vm::Syscall>(number)) {
    case vm::Syscall::SigAction: {
      const vm::Disposition previous = shadow_.get(effect.signum);
      shadow_.set(effect.signum, effect.installed);
      if (effect.installed.kind == vm::Disposition::Kind::Handler)
        vm_.signals().set(effect.signum, {vm::Disposition::Kind::Hosted, 0});
      effect.previous = previous;
      t.regs[0] = previous.toGuest();
      break;
    }
    case vm::Syscall::Kill:
      flush(tid, guard::Trigger::Kill);
      break;
    case vm::Syscall::SigReturn: {
      // The restored pc is the original address saved at delivery.
      auto c2 = xlat_->origToClone(restored);
      t.pc = c2 ? *c2 : resumeStub(restored);
      break;
    }
    case vm::Syscall::Spawn: {
      auto& spawned = vm_.thread(effect.spawnedThread);
      auto c2 = xlat_->origToClone(spawned.pc);
      spawned.pc = c2 ? *c2 : resumeStub(spawned.pc);
      break;
    }
    default:
      break;
  }
  if (backend_ != nullptr) backend_->syscallPost(hookContext(vm_.thread(tid), c.origPc), effect);
  return Handling::done();
}

Handling Engine::onCallout(vm::ThreadContext& ctx, std::uint32_t id) {
  if (id >= callouts_.size()) throw EngineError("unknown callout " + std::to_string(id));
  const Callout c = callouts_.at(id);  // the registry may grow while this runs
  switch (c.kind) {
    case CalloutKind::BackendHook: {
      ++stats_.hookCalls;
      if (backend_ != nullptr) {
        HookContext hc = hookContext(ctx, c.origPc);
        if (c.hook == HookKind::MemoryAccess) {
          std::uint32_t addr = c.registerBased ? ctx.regs.at(c.value) : c.value;
          backend_->memoryAccess(hc, addr, 4, c.isWrite);
        } else {
          backend_->basicBlockEnd(hc, c.target);
        }
      }
      ctx.pc += Emitter::kStubSize;
      return Handling::done();
    }
    case CalloutKind::CallPush: {
      const std::uint32_t sp = ctx.sp - 4;
      auto w = vm_.guestWrite32(sp, c.value);
      if (w.status == vm::WriteResult::Status::Protected) {
        ++writeFaults_;
        handleWriteFault(ctx.id, sp, 4);
        return Handling::retry();
      }
      if (!w.ok()) return Handling::crash({vm::FaultKind::Unmapped, sp, 4});
      ctx.sp = sp;
      if (backend_ != nullptr) backend_->routineEntry(hookContext(ctx, c.origPc), c.target);
      ctx.pc += Emitter::kStubSize;
      return Handling::done();
    }
    case CalloutKind::TrampolineLookup:
      return lookupCallout(ctx, c);
    case CalloutKind::SyscallGate:
      return syscallGate(ctx, c);
    case CalloutKind::BreakpointRedirect:
      break;
  }
  throw EngineError("callout " + std::to_string(id) + " cannot be executed");
}

Handling Engine::onFault(vm::ThreadContext& ctx, const vm::Fault& fault) {
  const int tid = ctx.id;
  switch (fault.kind) {
    case vm::FaultKind::ProtectionWrite:
      ++writeFaults_;
      handleWriteFault(tid, fault.addr, fault.size);
      return Handling::retry();
    case vm::FaultKind::Breakpoint: {
      if (!clone_.contains(ctx.pc)) break;
      const std::uint32_t next = onBreakpointHit(tid, ctx.pc);
      vm_.thread(tid).pc = next;
      return Handling::retry();
    }
    case vm::FaultKind::IllegalInstruction:
      throw EngineError("undecodable clone code at " + hex(fault.addr));
    default:
      break;
  }
  return Handling::crash(fault);
}

Handling Engine::onHostSignal(vm::ThreadContext& ctx, const vm::Delivery& delivery) {
  if (!ctx.savedContext) throw EngineError("hosted signal without a saved context");
  const auto orig = origForClone(ctx.savedContext->pc);
  if (!orig) throw EngineError("signal arrived at untranslatable clone address " + hex(ctx.savedContext->pc));
  ctx.savedContext->pc = *orig;
  ctx.regs[1] = *orig;
  const vm::Disposition& d = shadow_.get(delivery.signum);
  if (d.kind != vm::Disposition::Kind::Handler) throw EngineError("hosted signal without a guest handler");
  const std::uint32_t handler = d.handler;
  const int tid = ctx.id;
  auto r = tryLookup(tid, handler);
  auto& t = vm_.thread(tid);
  t.pc = r ? *r : resumeStub(handler);
  if (backend_ != nullptr) backend_->signalEntry(hookContext(t, handler), delivery.signum, t.savedContext->pc);
  return Handling::done();
}

std::uint32_t Engine::onBreakpointHit(int thread, std::uint32_t cloneAddr) {
  const auto orig = origForClone(cloneAddr);
  if (!orig) throw EngineError("StaleBrk: no translation for breakpoint at " + hex(cloneAddr));
  ++stats_.brkRedirects;
  auto r = tryLookup(thread, *orig);
  return r ? *r : resumeStub(*orig);
}

}  // namespace smc::engine
