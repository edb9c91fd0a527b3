#pragma once

#include <array>
#include <cstdint>
#include <deque>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "smc/image.hpp"
#include "smc/isa.hpp"
#include "smc/syscalls.hpp"

namespace smc::vm {

enum class Protection : std::uint8_t { ReadWrite, ReadOnly };

enum class FaultKind : std::uint8_t {
  IllegalInstruction,
  ProtectionWrite,
  Unmapped,
  Breakpoint,
  BadSyscall,
  BadThread,
  BadSigreturn,
};

std::string_view toString(FaultKind k);

struct Fault {
  FaultKind kind = FaultKind::IllegalInstruction;
  std::uint32_t addr = 0;  // data address for memory faults, instruction address otherwise
  std::uint32_t size = 0;  // access size for memory faults

  bool operator==(const Fault&) const = default;
};

struct WriteResult {
  enum class Status : std::uint8_t { Ok, Protected, Unmapped } status = Status::Ok;
  std::uint32_t faultAddr = 0;

  bool ok() const { return status == Status::Ok; }
};

// Paged guest memory. Writes to ReadOnly pages are refused without touching
// any byte; reads and fetches ignore protection.
class GuestMemory {
 public:
  explicit GuestMemory(std::uint32_t pageSize = 256);

  std::uint32_t pageSize() const { return pageSize_; }
  std::uint32_t pageIndex(std::uint32_t addr) const { return addr >> pageShift_; }
  std::uint32_t pageBase(std::uint32_t index) const { return index << pageShift_; }

  // Maps zero-filled ReadWrite pages covering [addr, addr + len).
  void map(std::uint32_t addr, std::uint32_t len);
  bool isMapped(std::uint32_t addr) const;

  // Copies as many bytes as are mapped from addr onward; returns the count.
  std::size_t readAvailable(std::uint32_t addr, std::span<std::uint8_t> out) const;
  bool read(std::uint32_t addr, std::span<std::uint8_t> out) const;
  std::optional<std::uint32_t> read32(std::uint32_t addr) const;

  // All-or-nothing: each touched page is checked before any byte is stored.
  WriteResult write(std::uint32_t addr, std::span<const std::uint8_t> bytes);
  WriteResult write32(std::uint32_t addr, std::uint32_t value);

  // Privileged store used by the loader and the instrumentation engine.
  void hostWrite(std::uint32_t addr, std::span<const std::uint8_t> bytes);

  void setProtection(std::uint32_t page, Protection p);
  Protection protection(std::uint32_t page) const;

  std::span<const std::uint8_t> page(std::uint32_t index) const;
  std::vector<std::uint32_t> mappedPages() const;

 private:
  struct Page {
    std::vector<std::uint8_t> bytes;
    Protection protection = Protection::ReadWrite;
  };

  const Page* findPage(std::uint32_t index) const;
  Page* findPage(std::uint32_t index);

  std::uint32_t pageSize_;
  std::uint32_t pageShift_;
  std::map<std::uint32_t, Page> pages_;
};

struct Disposition {
  enum class Kind : std::uint8_t { Default, Ignore, Handler, Hosted } kind = Kind::Default;
  std::uint32_t handler = 0;

  static Disposition fromGuest(std::uint32_t encoded);
  // Hosted has no guest encoding; callers translate it before it reaches r0.
  std::uint32_t toGuest() const;

  bool operator==(const Disposition&) const = default;
};

inline constexpr int kSignalCount = 16;

class SignalTable {
 public:
  const Disposition& get(int signum) const { return table_.at(static_cast<std::size_t>(signum)); }
  void set(int signum, Disposition d) { table_.at(static_cast<std::size_t>(signum)) = d; }

 private:
  std::array<Disposition, kSignalCount> table_{};
};

struct SavedContext {
  std::array<std::uint32_t, isa::kRegisterCount> regs{};
  std::uint32_t pc = 0;
  std::uint32_t sp = 0;
};

struct ThreadContext {
  int id = 0;
  std::array<std::uint32_t, isa::kRegisterCount> regs{};
  std::uint32_t pc = 0;
  std::uint32_t sp = 0;
  bool inSignal = false;
  std::optional<SavedContext> savedContext;
  std::deque<int> pendingSignals;
  bool alive = true;
  bool yieldRequested = false;
};

struct StepOutcome {
  enum class Kind : std::uint8_t { Continue, Halted, Fault, SyscallRequest, CalloutRequest } kind = Kind::Continue;
  Fault fault;
  std::uint32_t value = 0;  // syscall number or callout id

  static StepOutcome cont() { return {}; }
  static StepOutcome halted() { return {Kind::Halted, {}, 0}; }
  static StepOutcome faulted(Fault f) { return {Kind::Fault, f, 0}; }
  static StepOutcome syscall(std::uint32_t n) { return {Kind::SyscallRequest, {}, n}; }
  static StepOutcome callout(std::uint32_t id) { return {Kind::CalloutRequest, {}, id}; }
};

struct SyscallEffect {
  std::uint8_t number = 0;
  std::optional<Fault> fault;
  int signum = -1;
  Disposition previous;
  Disposition installed;
  int targetThread = -1;
  int spawnedThread = -1;
};

struct Delivery {
  enum class Kind : std::uint8_t { None, Terminated, Ignored, Guest, Host } kind = Kind::None;
  int signum = -1;
  std::uint32_t handler = 0;
};

struct VmConfig {
  std::uint32_t pageSize = 256;
  std::uint32_t stackTop = 0x00800000;
  std::uint32_t stackSize = 0x1000;
};

class Vm {
 public:
  explicit Vm(VmConfig config = {});

  const VmConfig& config() const { return config_; }
  GuestMemory& memory() { return memory_; }
  const GuestMemory& memory() const { return memory_; }
  SignalTable& signals() { return signals_; }
  const SignalTable& signals() const { return signals_; }

  // Maps the image and the main stack; creates thread 0 at the entry point.
  void load(const isa::Image& image);

  std::vector<ThreadContext>& threads() { return threads_; }
  const std::vector<ThreadContext>& threads() const { return threads_; }
  ThreadContext& thread(int id) { return threads_.at(static_cast<std::size_t>(id)); }

  // Addresses inside the host range hold engine code: CALLOUT decodes there,
  // and guest loads/stores to it fault as Unmapped.
  void setHostRange(std::uint32_t begin, std::uint32_t end);
  bool inHostRange(std::uint32_t addr) const { return addr >= hostBegin_ && addr < hostEnd_; }

  // Counts instruction fetches outside the host range once a host range is set.
  std::uint64_t fetchesOutsideHost() const { return fetchesOutsideHost_; }

  StepOutcome step(ThreadContext& ctx);
  SyscallEffect dispatchSyscall(ThreadContext& ctx, std::uint8_t number);
  Delivery deliverPendingSignal(ThreadContext& ctx);

  // Decodes the instruction at addr from current memory contents.
  isa::DecodeResult decodeAt(std::uint32_t addr) const;

  // Guest-privilege 32-bit accesses: the host range reads as unmapped.
  WriteResult guestWrite32(std::uint32_t addr, std::uint32_t value);
  std::optional<std::uint32_t> guestRead32(std::uint32_t addr) const;

  const std::string& output() const { return output_; }
  bool exited() const { return exited_; }
  int exitCode() const { return exitCode_; }

 private:
  VmConfig config_;
  GuestMemory memory_;
  SignalTable signals_;
  std::vector<ThreadContext> threads_;
  std::string output_;
  bool exited_ = false;
  int exitCode_ = 0;
  std::uint32_t hostBegin_ = 0;
  std::uint32_t hostEnd_ = 0;
  std::uint64_t fetchesOutsideHost_ = 0;
};

class LoadError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace smc::vm
