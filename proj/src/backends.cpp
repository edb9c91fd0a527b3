#include "smc/backends.hpp"

#include <cstdio>

namespace smc::backends {

namespace {

std::string fmt(const char* pattern, std::uint32_t a, std::uint32_t b = 0, std::uint32_t c = 0) {
  char buf[96];
  std::snprintf(buf, sizeof buf, pattern, a, b, c);
  return buf;
}

}  // namespace

void TraceBackend::add(std::string line) {
  if (lines_.size() >= maxLines_) {
    ++dropped_;
    return;
  }
  lines_.push_back(std::move(line));
}

void TraceBackend::memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t size, bool isWrite) {
  add(fmt(isWrite ? "t%u store %08x size %u" : "t%u load  %08x size %u", static_cast<std::uint32_t>(hc.thread), addr,
          size) +
      fmt(" at %08x", hc.origPc));
}

void TraceBackend::basicBlockEnd(const engine::HookContext& hc, std::uint32_t origStart) {
  add(fmt("t%u block %08x..%08x", static_cast<std::uint32_t>(hc.thread), origStart, hc.origPc));
}

void TraceBackend::syscallPre(const engine::HookContext& hc, std::uint8_t number) {
  add(fmt("t%u syscall %u at %08x", static_cast<std::uint32_t>(hc.thread), number, hc.origPc));
}

void TraceBackend::routineEntry(const engine::HookContext& hc, std::uint32_t addr) {
  add(fmt("t%u call %08x from %08x", static_cast<std::uint32_t>(hc.thread), addr, hc.origPc));
}

void TraceBackend::signalEntry(const engine::HookContext& hc, int signum, std::uint32_t savedPc) {
  add(fmt("t%u signal %u interrupted %08x", static_cast<std::uint32_t>(hc.thread), static_cast<std::uint32_t>(signum),
          savedPc));
}

void MemcheckBackend::memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t size,
                                   bool isWrite) {
  if (isWrite) {
    for (std::uint32_t i = 0; i < size; ++i) written_.insert(addr + i);
    return;
  }
  for (std::uint32_t i = 0; i < size; ++i) {
    const std::uint32_t a = addr + i;
    if (a >= imageBase_ && a < imageEnd_) continue;
    if (written_.count(a) != 0) continue;
    if (reported_.insert({hc.origPc, addr}).second)
      reports_.push_back(fmt("load of never-written %08x at %08x", addr, hc.origPc));
    return;
  }
}

void CheckingBackend::check(const char* what, std::uint32_t addr) {
  ++events_;
  if (addr >= begin_ && addr < end_) violations_.push_back(std::string(what) + fmt(" observed clone address %08x", addr));
}

void CheckingBackend::memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t, bool) {
  check("memory access pc", hc.origPc);
  check("memory access address", addr);
}

void CheckingBackend::basicBlockEnd(const engine::HookContext& hc, std::uint32_t origStart) {
  check("block end pc", hc.origPc);
  check("block start", origStart);
}

void CheckingBackend::syscallPre(const engine::HookContext& hc, std::uint8_t) { check("syscall pc", hc.origPc); }

void CheckingBackend::syscallPost(const engine::HookContext& hc, const vm::SyscallEffect& effect) {
  check("syscall pc", hc.origPc);
  if (effect.number == static_cast<std::uint8_t>(vm::Syscall::SigAction) && hc.regs != nullptr) {
    sigactionResults_.push_back((*hc.regs)[0]);
    check("sigaction previous handler", (*hc.regs)[0]);
  }
}

void CheckingBackend::routineEntry(const engine::HookContext& hc, std::uint32_t addr) {
  check("call site", hc.origPc);
  check("routine", addr);
}

void CheckingBackend::signalEntry(const engine::HookContext& hc, int, std::uint32_t savedPc) {
  signalPcs_.push_back(savedPc);
  check("saved pc", savedPc);
  if (hc.regs != nullptr) check("handler r1", (*hc.regs)[1]);
  check("handler", hc.origPc);
}

}  // namespace smc::backends
