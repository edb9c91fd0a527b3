#include "smc/xlat.hpp"

#include <algorithm>

#include "smc/isa.hpp"

namespace smc::xlat {

namespace {

void appendDelta(std::vector<std::uint8_t>& out, std::uint32_t delta) {
  if (delta <= kMaxPlainDelta) {
    out.push_back(static_cast<std::uint8_t>(delta));
  } else {
    out.push_back(kEscape);
    isa::appendLe32(out, delta);
  }
}

std::uint32_t deltaSize(std::uint32_t delta) { return delta <= kMaxPlainDelta ? 1 : 5; }

void checkMonotonic(std::span<const LayoutEntry> layout) {
  if (layout.empty()) throw NonMonotonicLayout("empty layout");
  for (std::size_t i = 1; i < layout.size(); ++i) {
    if (layout[i].orig <= layout[i - 1].orig || layout[i].clone <= layout[i - 1].clone)
      throw NonMonotonicLayout("layout entry " + std::to_string(i) + " does not increase on both sides");
  }
}

// Pulls table bytes one field at a time from some source.
template <typename Fetch>
Layout parseTable(Fetch&& fetch) {
  std::uint8_t header[kHeaderSize];
  if (!fetch(header, kHeaderSize)) throw TableFormatError("truncated table header");
  if (!std::equal(kMarker.begin(), kMarker.end(), header)) throw TableFormatError("missing table marker");
  LayoutEntry cur{isa::readLe32(header + 4), isa::readLe32(header + 8)};
  std::uint32_t count = isa::readLe32(header + 12);
  Layout layout;
  layout.reserve(std::min<std::uint32_t>(count, 4096) + 1);
  layout.push_back(cur);
  auto delta = [&]() -> std::uint32_t {
    std::uint8_t b;
    if (!fetch(&b, 1)) throw TableFormatError("truncated pair");
    if (b != kEscape) {
      if (b == 0) throw TableFormatError("zero delta");
      return b;
    }
    std::uint8_t wide[4];
    if (!fetch(wide, 4)) throw TableFormatError("truncated escaped delta");
    std::uint32_t d = isa::readLe32(wide);
    if (d == 0) throw TableFormatError("zero delta");
    return d;
  };
  for (std::uint32_t i = 0; i < count; ++i) {
    std::uint32_t dOrig = delta();
    std::uint32_t dClone = delta();
    if (static_cast<std::uint64_t>(cur.orig) + dOrig > 0xFFFFFFFFull ||
        static_cast<std::uint64_t>(cur.clone) + dClone > 0xFFFFFFFFull)
      throw TableFormatError("table walks past the address space");
    cur.orig += dOrig;
    cur.clone += dClone;
    layout.push_back(cur);
  }
  return layout;
}

}  // namespace

std::uint32_t tableSize(std::span<const LayoutEntry> layout) {
  checkMonotonic(layout);
  std::uint32_t size = kHeaderSize;
  for (std::size_t i = 1; i < layout.size(); ++i) {
    size += deltaSize(layout[i].orig - layout[i - 1].orig);
    size += deltaSize(layout[i].clone - layout[i - 1].clone);
  }
  return size;
}

std::vector<std::uint8_t> emitTable(std::span<const LayoutEntry> layout) {
  checkMonotonic(layout);
  std::vector<std::uint8_t> out(kMarker.begin(), kMarker.end());
  isa::appendLe32(out, layout.front().orig);
  isa::appendLe32(out, layout.front().clone);
  isa::appendLe32(out, static_cast<std::uint32_t>(layout.size() - 1));
  for (std::size_t i = 1; i < layout.size(); ++i) {
    appendDelta(out, layout[i].orig - layout[i - 1].orig);
    appendDelta(out, layout[i].clone - layout[i - 1].clone);
  }
  return out;
}

Layout decodeTable(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  return parseTable([&](std::uint8_t* out, std::size_t n) {
    if (bytes.size() - pos < n) return false;
    std::copy_n(bytes.begin() + static_cast<std::ptrdiff_t>(pos), n, out);
    pos += n;
    return true;
  });
}

// --- XlatMap ---------------------------------------------------------------

XlatMap::XlatMap(const ByteReader& clone, std::uint32_t cloneBegin, std::uint32_t cloneEnd,
                 std::size_t cacheSlots)
    : clone_(clone), cloneBegin_(cloneBegin), cloneEnd_(cloneEnd), cache_(cacheSlots == 0 ? 1 : cacheSlots) {}

Layout XlatMap::readTable(std::uint32_t tableAddr) const {
  std::uint32_t pos = tableAddr;
  return parseTable([&](std::uint8_t* out, std::size_t n) {
    if (pos < cloneBegin_ || pos + n > cloneEnd_) return false;
    if (!clone_.read(pos, std::span<std::uint8_t>(out, n))) return false;
    pos += static_cast<std::uint32_t>(n);
    return true;
  });
}

std::map<std::uint32_t, XlatMap::Registration>::const_iterator XlatMap::find(std::uint32_t addr) const {
  auto it = ranges_.upper_bound(addr);
  if (it == ranges_.begin()) return ranges_.end();
  --it;
  return addr < it->second.stop ? it : ranges_.end();
}

bool XlatMap::overlaps(OrigRange range) const {
  if (range.start >= range.stop) return false;
  auto it = ranges_.lower_bound(range.start);
  if (it != ranges_.end() && it->first < range.stop) return true;
  if (it != ranges_.begin()) {
    --it;
    if (it->second.stop > range.start) return true;
  }
  return false;
}

void XlatMap::registerRanges(std::span<const OrigRange> ranges, std::uint32_t tableAddr) {
  for (std::size_t i = 0; i < ranges.size(); ++i) {
    const auto& r = ranges[i];
    if (r.start >= r.stop) throw OverlappingRange("empty original range");
    if (overlaps(r)) throw OverlappingRange("original range overlaps an instrumented block");
    for (std::size_t j = 0; j < i; ++j) {
      if (r.start < ranges[j].stop && ranges[j].start < r.stop)
        throw OverlappingRange("ranges of one block overlap each other");
    }
  }
  for (const auto& r : ranges) ranges_.emplace(r.start, Registration{r.stop, tableAddr});
}

void XlatMap::retire(OrigRange range) {
  if (range.start >= range.stop) return;
  std::vector<std::pair<std::uint32_t, Registration>> keep;
  auto it = ranges_.upper_bound(range.start);
  if (it != ranges_.begin()) --it;
  while (it != ranges_.end() && it->first < range.stop) {
    std::uint32_t s = it->first;
    Registration reg = it->second;
    if (reg.stop <= range.start) {
      ++it;
      continue;
    }
    it = ranges_.erase(it);
    if (s < range.start) keep.push_back({s, Registration{range.start, reg.tableAddr}});
    if (reg.stop > range.stop) keep.push_back({range.stop, Registration{reg.stop, reg.tableAddr}});
  }
  for (auto& [s, reg] : keep) ranges_.emplace(s, reg);
  flushCache();
}

std::optional<std::uint32_t> XlatMap::origToClone(std::uint32_t addr) {
  CacheSlot* slot = nullptr;
  if (cacheEnabled_) {
    slot = &cache_[addr % cache_.size()];
    if (slot->valid && slot->orig == addr) {
      ++cacheHits_;
      return slot->clone;
    }
  }
  auto it = find(addr);
  if (it == ranges_.end()) return std::nullopt;
  for (const auto& e : readTable(it->second.tableAddr)) {
    if (e.orig == addr) {
      if (slot != nullptr) *slot = CacheSlot{true, addr, e.clone};
      return e.clone;
    }
    if (e.orig > addr) break;
  }
  return std::nullopt;
}

CloneLookup XlatMap::cloneToOrig(std::uint32_t cloneAddr) const {
  CloneLookup result;
  if (cloneAddr < cloneBegin_ || cloneAddr >= cloneEnd_) {
    result.error = CloneLookup::Error::NotInClone;
    return result;
  }
  std::uint32_t pos = (cloneAddr + 3u) & ~3u;
  std::uint8_t word[4];
  while (pos + 4 <= cloneEnd_) {
    if (!clone_.read(pos, word)) break;
    if (std::equal(kMarker.begin(), kMarker.end(), word)) {
      result.tableAddr = pos;
      for (const auto& e : readTable(pos)) {
        if (e.clone == cloneAddr) {
          result.orig = e.orig;
          return result;
        }
        if (e.clone > cloneAddr) break;
      }
      result.error = CloneLookup::Error::NotAnInstructionStart;
      return result;
    }
    pos += 4;
  }
  result.error = CloneLookup::Error::NotInClone;
  return result;
}

std::optional<std::uint32_t> XlatMap::instructionStartContaining(std::uint32_t addr) const {
  auto it = find(addr);
  if (it == ranges_.end()) return std::nullopt;
  std::optional<std::uint32_t> best;
  for (const auto& e : readTable(it->second.tableAddr)) {
    if (e.orig > addr) break;
    if (e.orig >= it->first) best = e.orig;
  }
  return best;
}

std::optional<std::uint32_t> XlatMap::tableFor(std::uint32_t addr) const {
  auto it = find(addr);
  if (it == ranges_.end()) return std::nullopt;
  return it->second.tableAddr;
}

std::vector<std::pair<OrigRange, std::uint32_t>> XlatMap::registrations() const {
  std::vector<std::pair<OrigRange, std::uint32_t>> out;
  out.reserve(ranges_.size());
  for (const auto& [start, reg] : ranges_) out.push_back({OrigRange{start, reg.stop}, reg.tableAddr});
  return out;
}

void XlatMap::setCacheEnabled(bool enabled) {
  cacheEnabled_ = enabled;
  flushCache();
}

void XlatMap::flushCache() {
  for (auto& slot : cache_) slot.valid = false;
}

}  // namespace smc::xlat
