#include "smc/guard.hpp"

#include <algorithm>

namespace smc::guard {

void SmcPolicy::validate() const {
  if (cleanChecks < 1 || cleanChecks > kMaxCleanChecks)
    throw InvalidPolicy("clean-check limit must be in 1.." + std::to_string(kMaxCleanChecks));
  if (maxUnprotectedPerThread < 1) throw InvalidPolicy("at least one page must be allowed unprotected");
}

// --- RangeSet --------------------------------------------------------------

void RangeSet::add(std::uint32_t start, std::uint32_t stop) {
  if (start >= stop) return;
  auto it = ranges_.upper_bound(start);
  if (it != ranges_.begin()) {
    auto prev = std::prev(it);
    if (prev->second >= start) {
      start = prev->first;
      stop = std::max(stop, prev->second);
      it = ranges_.erase(prev);
    }
  }
  while (it != ranges_.end() && it->first <= stop) {
    stop = std::max(stop, it->second);
    it = ranges_.erase(it);
  }
  ranges_.emplace(start, stop);
}

bool RangeSet::contains(std::uint32_t addr) const {
  auto it = ranges_.upper_bound(addr);
  if (it == ranges_.begin()) return false;
  --it;
  return addr < it->second;
}

std::vector<xlat::OrigRange> RangeSet::intersect(std::uint32_t start, std::uint32_t stop) const {
  std::vector<xlat::OrigRange> out;
  auto it = ranges_.upper_bound(start);
  if (it != ranges_.begin()) --it;
  for (; it != ranges_.end() && it->first < stop; ++it) {
    std::uint32_t s = std::max(start, it->first);
    std::uint32_t e = std::min(stop, it->second);
    if (s < e) out.push_back({s, e});
  }
  return out;
}

std::vector<xlat::OrigRange> RangeSet::ranges() const {
  std::vector<xlat::OrigRange> out;
  for (const auto& [s, e] : ranges_) out.push_back({s, e});
  return out;
}

// --- SmcGuard --------------------------------------------------------------

SmcGuard::SmcGuard(vm::GuestMemory& memory, RunStats& stats) : memory_(memory), stats_(stats) {}

void SmcGuard::setPolicy(const SmcPolicy& policy) {
  policy.validate();
  policy_ = policy;
}

void SmcGuard::onInstrumented(xlat::OrigRange range) {
  if (range.start >= range.stop) return;
  const std::uint32_t first = memory_.pageIndex(range.start);
  const std::uint32_t last = memory_.pageIndex(range.stop - 1);
  for (std::uint32_t p = first; p <= last; ++p) {
    auto [it, fresh] = pages_.try_emplace(p);
    PageGuard& pg = it->second;
    const std::uint32_t base = memory_.pageBase(p);
    const std::uint32_t end = base + memory_.pageSize();
    pg.pageIndex = p;
    pg.instrumentedRanges.add(std::max(range.start, base), std::min(range.stop, end));
    if (fresh || pg.state == PageState::Protected) {
      pg.state = PageState::Protected;
      memory_.setProtection(p, vm::Protection::ReadOnly);
    }
  }
}

void SmcGuard::unprotect(PageGuard& pg, int thread) {
  auto bytes = memory_.page(pg.pageIndex);
  pg.snapshot.assign(bytes.begin(), bytes.end());
  pg.state = PageState::Unprotected;
  pg.ownerThread = thread;
  pg.cleanChecks = 0;
  pg.unprotectedAt = ++faultSeq_;
  memory_.setProtection(pg.pageIndex, vm::Protection::ReadWrite);
}

void SmcGuard::reprotect(PageGuard& pg) {
  pg.state = PageState::Protected;
  pg.snapshot.clear();
  pg.snapshot.shrink_to_fit();
  pg.cleanChecks = 0;
  pg.ownerThread = -1;
  memory_.setProtection(pg.pageIndex, vm::Protection::ReadOnly);
  ++stats_.reprotections;
}

void SmcGuard::check(PageGuard& pg, std::vector<ChangedRange>& out) {
  ++stats_.pageCompares;
  auto current = memory_.page(pg.pageIndex);
  const std::uint32_t base = memory_.pageBase(pg.pageIndex);
  bool dirty = false;
  std::size_t i = 0;
  const std::size_t n = current.size();
  while (i < n) {
    if (current[i] == pg.snapshot[i]) {
      ++i;
      continue;
    }
    std::size_t j = i;
    while (j < n && current[j] != pg.snapshot[j]) ++j;
    dirty = true;
    auto start = base + static_cast<std::uint32_t>(i);
    auto stop = base + static_cast<std::uint32_t>(j);
    for (auto piece : pg.instrumentedRanges.intersect(start, stop)) {
      if (instructionStart_) {
        if (auto s = instructionStart_(piece.start)) piece.start = std::min(piece.start, *s);
      }
      out.push_back(piece);
    }
    i = j;
  }
  if (dirty) {
    ++stats_.dirtyFlushes;
    pg.snapshot.assign(current.begin(), current.end());
    pg.cleanChecks = 0;
  } else if (++pg.cleanChecks >= policy_.cleanChecks) {
    reprotect(pg);
  }
}

std::vector<ChangedRange> SmcGuard::onWriteFault(int thread, std::uint32_t addr, std::uint32_t size) {
  std::vector<ChangedRange> changed;
  const std::uint32_t first = memory_.pageIndex(addr);
  const std::uint32_t last = memory_.pageIndex(addr + (size == 0 ? 0 : size - 1));
  bool handled = false;
  for (std::uint32_t p = first; p <= last; ++p) {
    auto it = pages_.find(p);
    if (it == pages_.end() || it->second.state != PageState::Protected) continue;
    PageGuard& target = it->second;

    // Make room under the per-thread budget, oldest first. Pages touched by
    // this same store are never evicted, so a page-straddling store can
    // complete even with a budget of one.
    while (unprotectedCount(thread) >= policy_.maxUnprotectedPerThread) {
      PageGuard* oldest = nullptr;
      for (auto& [idx, pg] : pages_) {
        if (pg.state != PageState::Unprotected || pg.ownerThread != thread) continue;
        if (idx >= first && idx <= last) continue;
        if (oldest == nullptr || pg.unprotectedAt < oldest->unprotectedAt) oldest = &pg;
      }
      if (oldest == nullptr) break;
      check(*oldest, changed);
      if (oldest->state == PageState::Unprotected) reprotect(*oldest);
    }
    unprotect(target, thread);
    handled = true;
  }
  if (!handled) throw FaultOnUnprotectedPage("protection fault on a page the guard does not hold protected");
  ++stats_.protectionFaults;
  return changed;
}

std::vector<ChangedRange> SmcGuard::onFlushTrigger(int thread, Trigger trigger) {
  std::vector<ChangedRange> changed;
  if (trigger == Trigger::Kill && !policy_.killTrigger) return changed;
  if (trigger == Trigger::Lookup && !policy_.lookupTrigger) return changed;
  for (auto& [idx, pg] : pages_) {
    if (pg.state != PageState::Unprotected) continue;
    if (policy_.checkOnlyFaultingThread && pg.ownerThread != thread) continue;
    check(pg, changed);
  }
  return changed;
}

const PageGuard* SmcGuard::page(std::uint32_t index) const {
  auto it = pages_.find(index);
  return it == pages_.end() ? nullptr : &it->second;
}

std::size_t SmcGuard::unprotectedCount(int thread) const {
  return static_cast<std::size_t>(std::count_if(pages_.begin(), pages_.end(), [&](const auto& kv) {
    return kv.second.state == PageState::Unprotected && kv.second.ownerThread == thread;
  }));
}

std::size_t SmcGuard::unprotectedCount() const {
  return static_cast<std::size_t>(std::count_if(
      pages_.begin(), pages_.end(), [](const auto& kv) { return kv.second.state == PageState::Unprotected; }));
}

std::vector<std::uint32_t> SmcGuard::guardedPages() const {
  std::vector<std::uint32_t> out;
  for (const auto& [idx, pg] : pages_) out.push_back(idx);
  return out;
}

}  // namespace smc::guard
