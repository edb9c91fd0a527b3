#pragma once

// Detection of writes to instrumented original code. Pages holding
// instrumented code are write-protected; the first write to such a page
// snapshots it and unprotects it, and later flush triggers compare the page
// against the snapshot to find what changed.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <stdexcept>
#include <vector>

#include "smc/stats.hpp"
#include "smc/vm.hpp"
#include "smc/xlat.hpp"

namespace smc::guard {

struct SmcPolicy {
  std::uint32_t cleanChecks = 4;  // N
  std::uint32_t maxUnprotectedPerThread = 1;
  bool checkOnlyFaultingThread = true;
  bool killTrigger = true;
  bool lookupTrigger = true;

  static constexpr std::uint32_t kMaxCleanChecks = 64;

  // Throws InvalidPolicy.
  void validate() const;
  bool operator==(const SmcPolicy&) const = default;
};

class InvalidPolicy : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class FaultOnUnprotectedPage : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

enum class Trigger : std::uint8_t { Kill, Lookup };

// Sorted, coalesced set of half-open byte ranges.
class RangeSet {
 public:
  void add(std::uint32_t start, std::uint32_t stop);
  bool empty() const { return ranges_.empty(); }
  bool contains(std::uint32_t addr) const;
  // Pieces of [start, stop) covered by the set.
  std::vector<xlat::OrigRange> intersect(std::uint32_t start, std::uint32_t stop) const;
  std::vector<xlat::OrigRange> ranges() const;

 private:
  std::map<std::uint32_t, std::uint32_t> ranges_;
};

enum class PageState : std::uint8_t { Protected, Unprotected };

struct PageGuard {
  std::uint32_t pageIndex = 0;
  PageState state = PageState::Protected;
  std::vector<std::uint8_t> snapshot;  // non-empty iff Unprotected
  int ownerThread = -1;
  std::uint32_t cleanChecks = 0;
  RangeSet instrumentedRanges;
  std::uint64_t unprotectedAt = 0;  // fault sequence number, for eviction order
};

using ChangedRange = xlat::OrigRange;

class SmcGuard {
 public:
  // Returns the start of the instrumented instruction containing an address.
  using InstructionStartFn = std::function<std::optional<std::uint32_t>(std::uint32_t)>;

  SmcGuard(vm::GuestMemory& memory, RunStats& stats);

  void setPolicy(const SmcPolicy& policy);
  const SmcPolicy& policy() const { return policy_; }
  void setInstructionStartFn(InstructionStartFn fn) { instructionStart_ = std::move(fn); }

  void onInstrumented(xlat::OrigRange range);

  // Handles a ProtectionWrite fault for a store of `size` bytes at addr. The
  // store is retried by the caller. Returns changes found on pages evicted to
  // stay within the per-thread budget.
  std::vector<ChangedRange> onWriteFault(int thread, std::uint32_t addr, std::uint32_t size);

  std::vector<ChangedRange> onFlushTrigger(int thread, Trigger trigger);

  const PageGuard* page(std::uint32_t index) const;
  std::size_t unprotectedCount(int thread) const;
  std::size_t unprotectedCount() const;
  std::vector<std::uint32_t> guardedPages() const;

 private:
  void unprotect(PageGuard& pg, int thread);
  void reprotect(PageGuard& pg);
  // Compares one Unprotected page with its snapshot; appends changed ranges.
  void check(PageGuard& pg, std::vector<ChangedRange>& out);

  vm::GuestMemory& memory_;
  RunStats& stats_;
  SmcPolicy policy_;
  InstructionStartFn instructionStart_;
  std::map<std::uint32_t, PageGuard> pages_;
  std::uint64_t faultSeq_ = 0;
};

}  // namespace smc::guard
