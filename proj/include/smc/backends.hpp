#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "smc/engine.hpp"

namespace smc::backends {

// One line per hook event.
class TraceBackend final : public engine::Backend {
 public:
  explicit TraceBackend(std::size_t maxLines = 100000) : maxLines_(maxLines) {}

  bool wantsMemoryAccess() const override { return true; }
  bool wantsBasicBlockEnd() const override { return true; }
  void memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t size, bool isWrite) override;
  void basicBlockEnd(const engine::HookContext& hc, std::uint32_t origStart) override;
  void syscallPre(const engine::HookContext& hc, std::uint8_t number) override;
  void routineEntry(const engine::HookContext& hc, std::uint32_t addr) override;
  void signalEntry(const engine::HookContext& hc, int signum, std::uint32_t savedPc) override;

  const std::vector<std::string>& lines() const { return lines_; }
  std::uint64_t dropped() const { return dropped_; }

 private:
  void add(std::string line);

  std::size_t maxLines_;
  std::vector<std::string> lines_;
  std::uint64_t dropped_ = 0;
};

// Reports loads from addresses that were never stored to and are outside the
// loaded image.
class MemcheckBackend final : public engine::Backend {
 public:
  MemcheckBackend(std::uint32_t imageBase, std::uint32_t imageEnd) : imageBase_(imageBase), imageEnd_(imageEnd) {}

  bool wantsMemoryAccess() const override { return true; }
  void memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t size, bool isWrite) override;

  const std::vector<std::string>& reports() const { return reports_; }

 private:
  std::uint32_t imageBase_;
  std::uint32_t imageEnd_;
  std::set<std::uint32_t> written_;
  std::set<std::pair<std::uint32_t, std::uint32_t>> reported_;
  std::vector<std::string> reports_;
};

// Asserts that every address a hook observes lies outside the clone region.
class CheckingBackend final : public engine::Backend {
 public:
  CheckingBackend(std::uint32_t cloneBegin = 0, std::uint32_t cloneEnd = 0) : begin_(cloneBegin), end_(cloneEnd) {}
  void setCloneRange(std::uint32_t begin, std::uint32_t end) {
    begin_ = begin;
    end_ = end;
  }

  bool wantsMemoryAccess() const override { return true; }
  bool wantsBasicBlockEnd() const override { return true; }
  void memoryAccess(const engine::HookContext& hc, std::uint32_t addr, std::uint32_t size, bool isWrite) override;
  void basicBlockEnd(const engine::HookContext& hc, std::uint32_t origStart) override;
  void syscallPre(const engine::HookContext& hc, std::uint8_t number) override;
  void syscallPost(const engine::HookContext& hc, const vm::SyscallEffect& effect) override;
  void routineEntry(const engine::HookContext& hc, std::uint32_t addr) override;
  void signalEntry(const engine::HookContext& hc, int signum, std::uint32_t savedPc) override;

  const std::vector<std::string>& violations() const { return violations_; }
  // Interrupted pcs handed to guest signal handlers, in delivery order.
  const std::vector<std::uint32_t>& signalPcs() const { return signalPcs_; }
  // Previous-handler values SIGACTION reported to the guest.
  const std::vector<std::uint32_t>& sigactionResults() const { return sigactionResults_; }
  std::uint64_t events() const { return events_; }

 private:
  void check(const char* what, std::uint32_t addr);

  std::uint32_t begin_;
  std::uint32_t end_;
  std::vector<std::string> violations_;
  std::vector<std::uint32_t> signalPcs_;
  std::vector<std::uint32_t> sigactionResults_;
  std::uint64_t events_ = 0;
};

}  // namespace smc::backends
