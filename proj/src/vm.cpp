#include "smc/vm.hpp"

#include <algorithm>
#include <bit>
#include <cctype>
#include <cstring>

namespace smc::vm {

using isa::Opcode;

std::string_view toString(FaultKind k) {
  switch (k) {
    case FaultKind::IllegalInstruction: return "IllegalInstruction";
    case FaultKind::ProtectionWrite: return "ProtectionWrite";
    case FaultKind::Unmapped: return "Unmapped";
    case FaultKind::Breakpoint: return "Breakpoint";
    case FaultKind::BadSyscall: return "BadSyscall";
    case FaultKind::BadThread: return "BadThread";
    case FaultKind::BadSigreturn: return "BadSigreturn";
  }
  return "?";
}

std::string_view syscallName(Syscall s) {
  switch (s) {
    case Syscall::Exit: return "EXIT";
    case Syscall::Print: return "PRINT";
    case Syscall::SigAction: return "SIGACTION";
    case Syscall::Kill: return "KILL";
    case Syscall::SigReturn: return "SIGRETURN";
    case Syscall::Spawn: return "SPAWN";
    case Syscall::Yield: return "YIELD";
  }
  return "?";
}

std::optional<Syscall> syscallByName(std::string_view name) {
  for (int i = 0; i < kSyscallCount; ++i) {
    auto s = static_cast<Syscall>(i);
    auto n = syscallName(s);
    if (n.size() == name.size() &&
        std::equal(n.begin(), n.end(), name.begin(), [](char a, char b) { return a == std::toupper(static_cast<unsigned char>(b)); }))
      return s;
  }
  return std::nullopt;
}

// --- GuestMemory -----------------------------------------------------------

GuestMemory::GuestMemory(std::uint32_t pageSize) : pageSize_(pageSize) {
  if (pageSize < 16 || !std::has_single_bit(pageSize))
    throw std::invalid_argument("page size must be a power of two >= 16");
  pageShift_ = static_cast<std::uint32_t>(std::countr_zero(pageSize));
}

const GuestMemory::Page* GuestMemory::findPage(std::uint32_t index) const {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : &it->second;
}

GuestMemory::Page* GuestMemory::findPage(std::uint32_t index) {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : &it->second;
}

void GuestMemory::map(std::uint32_t addr, std::uint32_t len) {
  if (len == 0) return;
  std::uint64_t last = static_cast<std::uint64_t>(addr) + len - 1;
  if (last > 0xFFFFFFFFull) throw std::out_of_range("mapping wraps the address space");
  for (std::uint32_t p = pageIndex(addr); p <= pageIndex(static_cast<std::uint32_t>(last)); ++p) {
    auto& page = pages_[p];
    if (page.bytes.empty()) page.bytes.assign(pageSize_, 0);
  }
}

bool GuestMemory::isMapped(std::uint32_t addr) const { return findPage(pageIndex(addr)) != nullptr; }

std::size_t GuestMemory::readAvailable(std::uint32_t addr, std::span<std::uint8_t> out) const {
  std::size_t done = 0;
  while (done < out.size()) {
    std::uint32_t a = addr + static_cast<std::uint32_t>(done);
    if (a < addr) break;  // wrapped
    const Page* page = findPage(pageIndex(a));
    if (page == nullptr) break;
    std::uint32_t off = a & (pageSize_ - 1);
    std::size_t n = std::min<std::size_t>(out.size() - done, pageSize_ - off);
    std::memcpy(out.data() + done, page->bytes.data() + off, n);
    done += n;
  }
  return done;
}

bool GuestMemory::read(std::uint32_t addr, std::span<std::uint8_t> out) const {
  return readAvailable(addr, out) == out.size();
}

std::optional<std::uint32_t> GuestMemory::read32(std::uint32_t addr) const {
  std::uint8_t buf[4];
  if (!read(addr, buf)) return std::nullopt;
  return isa::readLe32(buf);
}

WriteResult GuestMemory::write(std::uint32_t addr, std::span<const std::uint8_t> bytes) {
  if (bytes.empty()) return {};
  std::uint64_t last = static_cast<std::uint64_t>(addr) + bytes.size() - 1;
  if (last > 0xFFFFFFFFull) return {WriteResult::Status::Unmapped, addr};
  for (std::uint32_t p = pageIndex(addr); p <= pageIndex(static_cast<std::uint32_t>(last)); ++p) {
    const Page* page = findPage(p);
    std::uint32_t at = std::max(addr, pageBase(p));
    if (page == nullptr) return {WriteResult::Status::Unmapped, at};
    if (page->protection == Protection::ReadOnly) return {WriteResult::Status::Protected, at};
  }
  hostWrite(addr, bytes);
  return {};
}

WriteResult GuestMemory::write32(std::uint32_t addr, std::uint32_t value) {
  std::uint8_t buf[4];
  isa::writeLe32(buf, value);
  return write(addr, buf);
}

void GuestMemory::hostWrite(std::uint32_t addr, std::span<const std::uint8_t> bytes) {
  std::size_t done = 0;
  while (done < bytes.size()) {
    std::uint32_t a = addr + static_cast<std::uint32_t>(done);
    Page* page = findPage(pageIndex(a));
    if (page == nullptr) throw std::out_of_range("host write to unmapped address");
    std::uint32_t off = a & (pageSize_ - 1);
    std::size_t n = std::min<std::size_t>(bytes.size() - done, pageSize_ - off);
    std::memcpy(page->bytes.data() + off, bytes.data() + done, n);
    done += n;
  }
}

void GuestMemory::setProtection(std::uint32_t page, Protection p) {
  Page* pg = findPage(page);
  if (pg == nullptr) throw std::out_of_range("protecting an unmapped page");
  pg->protection = p;
}

Protection GuestMemory::protection(std::uint32_t page) const {
  const Page* pg = findPage(page);
  return pg == nullptr ? Protection::ReadWrite : pg->protection;
}

std::span<const std::uint8_t> GuestMemory::page(std::uint32_t index) const {
  const Page* pg = findPage(index);
  if (pg == nullptr) throw std::out_of_range("page not mapped");
  return pg->bytes;
}

std::vector<std::uint32_t> GuestMemory::mappedPages() const {
  std::vector<std::uint32_t> out;
  out.reserve(pages_.size());
  for (const auto& [index, page] : pages_) out.push_back(index);
  return out;
}

// --- Disposition -----------------------------------------------------------

Disposition Disposition::fromGuest(std::uint32_t encoded) {
  if (encoded == kHandlerDefault) return {Kind::Default, 0};
  if (encoded == kHandlerIgnore) return {Kind::Ignore, 0};
  return {Kind::Handler, encoded};
}

std::uint32_t Disposition::toGuest() const {
  switch (kind) {
    case Kind::Default: return kHandlerDefault;
    case Kind::Ignore: return kHandlerIgnore;
    case Kind::Handler: return handler;
    case Kind::Hosted: return kHandlerDefault;
  }
  return kHandlerDefault;
}

// --- Vm --------------------------------------------------------------------

Vm::Vm(VmConfig config) : config_(config), memory_(config.pageSize) {}

void Vm::load(const isa::Image& image) {
  if (image.bytes.empty()) throw LoadError("image is empty");
  if (image.entry < image.base || image.entry >= image.end()) throw LoadError("entry point outside image");
  std::uint32_t stackBottom = config_.stackTop - config_.stackSize;
  if (image.base < config_.stackTop && stackBottom < image.end())
    throw LoadError("image overlaps the main stack");
  memory_.map(image.base, static_cast<std::uint32_t>(image.bytes.size()));
  memory_.hostWrite(image.base, image.bytes);
  memory_.map(stackBottom, config_.stackSize);

  threads_.clear();
  ThreadContext main;
  main.id = 0;
  main.pc = image.entry;
  main.sp = config_.stackTop;
  threads_.push_back(main);
}

void Vm::setHostRange(std::uint32_t begin, std::uint32_t end) {
  hostBegin_ = begin;
  hostEnd_ = end;
}

isa::DecodeResult Vm::decodeAt(std::uint32_t addr) const {
  std::uint8_t buf[isa::kMaxInstructionLength];
  std::size_t n = memory_.readAvailable(addr, buf);
  return isa::decode(std::span<const std::uint8_t>(buf, n), inHostRange(addr));
}

WriteResult Vm::guestWrite32(std::uint32_t addr, std::uint32_t value) {
  if (hostEnd_ > hostBegin_ && addr + 4 > hostBegin_ && addr < hostEnd_)
    return {WriteResult::Status::Unmapped, addr};
  return memory_.write32(addr, value);
}

std::optional<std::uint32_t> Vm::guestRead32(std::uint32_t addr) const {
  if (hostEnd_ > hostBegin_ && addr + 4 > hostBegin_ && addr < hostEnd_) return std::nullopt;
  return memory_.read32(addr);
}

namespace {

StepOutcome writeFault(const WriteResult& w, std::uint32_t addr) {
  FaultKind kind = w.status == WriteResult::Status::Protected ? FaultKind::ProtectionWrite : FaultKind::Unmapped;
  return StepOutcome::faulted({kind, addr, 4});
}

}  // namespace

StepOutcome Vm::step(ThreadContext& ctx) {
  const std::uint32_t pc = ctx.pc;
  if (hostEnd_ > hostBegin_ && !inHostRange(pc)) ++fetchesOutsideHost_;

  std::uint8_t buf[isa::kMaxInstructionLength];
  std::size_t n = memory_.readAvailable(pc, buf);
  if (n == 0) return StepOutcome::faulted({FaultKind::Unmapped, pc, 0});
  auto decoded = isa::decode(std::span<const std::uint8_t>(buf, n), inHostRange(pc));
  if (!decoded) return StepOutcome::faulted({FaultKind::IllegalInstruction, pc, 0});

  const isa::Instruction& in = *decoded;
  auto& r = ctx.regs;
  const std::uint32_t next = pc + in.length();

  switch (in.opcode) {
    case Opcode::Halt:
      ctx.alive = false;
      return StepOutcome::halted();
    case Opcode::Nop:
      break;
    case Opcode::LoadI:
      r[in.r1] = in.imm;
      break;
    case Opcode::Mov:
      r[in.r1] = r[in.r2];
      break;
    case Opcode::Add:
      r[in.r1] += r[in.r2];
      break;
    case Opcode::Sub:
      r[in.r1] -= r[in.r2];
      break;
    case Opcode::Load: {
      auto v = guestRead32(in.imm);
      if (!v) return StepOutcome::faulted({FaultKind::Unmapped, in.imm, 4});
      r[in.r1] = *v;
      break;
    }
    case Opcode::Store: {
      auto w = guestWrite32(in.imm, r[in.r1]);
      if (!w.ok()) return writeFault(w, in.imm);
      break;
    }
    case Opcode::LoadR: {
      std::uint32_t addr = r[in.r2];
      auto v = guestRead32(addr);
      if (!v) return StepOutcome::faulted({FaultKind::Unmapped, addr, 4});
      r[in.r1] = *v;
      break;
    }
    case Opcode::StoreR: {
      std::uint32_t addr = r[in.r1];
      auto w = guestWrite32(addr, r[in.r2]);
      if (!w.ok()) return writeFault(w, addr);
      break;
    }
    case Opcode::LeaPc:
      r[in.r1] = next + in.imm;
      break;
    case Opcode::LoadPc: {
      std::uint32_t addr = next + in.imm;
      auto v = guestRead32(addr);
      if (!v) return StepOutcome::faulted({FaultKind::Unmapped, addr, 4});
      r[in.r1] = *v;
      break;
    }
    case Opcode::Jmp:
      ctx.pc = in.imm;
      return StepOutcome::cont();
    case Opcode::Call: {
      std::uint32_t sp = ctx.sp - 4;
      auto w = guestWrite32(sp, next);
      if (!w.ok()) return writeFault(w, sp);
      ctx.sp = sp;
      ctx.pc = in.imm;
      return StepOutcome::cont();
    }
    case Opcode::JmpR:
      ctx.pc = r[in.r1];
      return StepOutcome::cont();
    case Opcode::Ret: {
      auto v = guestRead32(ctx.sp);
      if (!v) return StepOutcome::faulted({FaultKind::Unmapped, ctx.sp, 4});
      ctx.sp += 4;
      ctx.pc = *v;
      return StepOutcome::cont();
    }
    case Opcode::Jz:
      ctx.pc = r[in.r1] == 0 ? in.imm : next;
      return StepOutcome::cont();
    case Opcode::Syscall:
      ctx.pc = next;
      return StepOutcome::syscall(in.imm);
    case Opcode::Brk:
      return StepOutcome::faulted({FaultKind::Breakpoint, pc, 0});
    case Opcode::Callout:
      return StepOutcome::callout(in.imm);
    case Opcode::Illegal:
      return StepOutcome::faulted({FaultKind::IllegalInstruction, pc, 0});
  }
  ctx.pc = next;
  return StepOutcome::cont();
}

SyscallEffect Vm::dispatchSyscall(ThreadContext& ctx, std::uint8_t number) {
  SyscallEffect effect;
  effect.number = number;
  const std::uint32_t at = ctx.pc - 2;
  auto fail = [&](FaultKind kind) {
    effect.fault = Fault{kind, at, 0};
    return effect;
  };
  auto& r = ctx.regs;
  if (number >= kSyscallCount) return fail(FaultKind::BadSyscall);

  switch (static_cast<Syscall>(number)) {
    case Syscall::Exit:
      exited_ = true;
      exitCode_ = static_cast<std::int32_t>(r[0]);
      break;
    case Syscall::Print:
      output_ += std::to_string(static_cast<std::int32_t>(r[0]));
      output_ += '\n';
      break;
    case Syscall::SigAction: {
      if (r[0] >= kSignalCount) return fail(FaultKind::BadSyscall);
      effect.signum = static_cast<int>(r[0]);
      effect.previous = signals_.get(effect.signum);
      effect.installed = Disposition::fromGuest(r[1]);
      signals_.set(effect.signum, effect.installed);
      r[0] = effect.previous.toGuest();
      break;
    }
    case Syscall::Kill: {
      if (r[0] >= threads_.size() || !threads_[r[0]].alive) return fail(FaultKind::BadThread);
      if (r[1] >= kSignalCount) return fail(FaultKind::BadSyscall);
      effect.targetThread = static_cast<int>(r[0]);
      effect.signum = static_cast<int>(r[1]);
      threads_[r[0]].pendingSignals.push_back(effect.signum);
      break;
    }
    case Syscall::SigReturn: {
      if (!ctx.inSignal || !ctx.savedContext) return fail(FaultKind::BadSigreturn);
      ctx.regs = ctx.savedContext->regs;
      ctx.pc = ctx.savedContext->pc;
      ctx.sp = ctx.savedContext->sp;
      ctx.savedContext.reset();
      ctx.inSignal = false;
      break;
    }
    case Syscall::Spawn: {
      ThreadContext t;
      t.id = static_cast<int>(threads_.size());
      t.pc = r[0];
      t.sp = r[1];
      effect.spawnedThread = t.id;
      r[0] = static_cast<std::uint32_t>(t.id);
      // ctx may alias an element of threads_; it is not touched after the push.
      threads_.push_back(std::move(t));
      break;
    }
    case Syscall::Yield:
      ctx.yieldRequested = true;
      break;
  }
  return effect;
}

Delivery Vm::deliverPendingSignal(ThreadContext& ctx) {
  if (ctx.pendingSignals.empty() || ctx.inSignal) return {};
  int signum = ctx.pendingSignals.front();
  ctx.pendingSignals.pop_front();
  const Disposition& d = signals_.get(signum);
  switch (d.kind) {
    case Disposition::Kind::Default:
      if (signum < 8) {
        ctx.alive = false;
        return {Delivery::Kind::Terminated, signum, 0};
      }
      return {Delivery::Kind::Ignored, signum, 0};
    case Disposition::Kind::Ignore:
      return {Delivery::Kind::Ignored, signum, 0};
    case Disposition::Kind::Handler:
    case Disposition::Kind::Hosted: {
      ctx.savedContext = SavedContext{ctx.regs, ctx.pc, ctx.sp};
      ctx.inSignal = true;
      ctx.regs[0] = static_cast<std::uint32_t>(signum);
      ctx.regs[1] = ctx.pc;
      if (d.kind == Disposition::Kind::Hosted) return {Delivery::Kind::Host, signum, 0};
      ctx.pc = d.handler;
      return {Delivery::Kind::Guest, signum, d.handler};
    }
  }
  return {};
}

}  // namespace smc::vm
