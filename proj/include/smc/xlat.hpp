#pragma once

// Two-way original <-> clone address translation.
//
// Each emitted clone segment is followed by a 4-byte-aligned marker and a
// translation table:
//
//   FF FF FF FF | origStart u32 | cloneStart u32 | pairCount u32 | pairs...
//
// A pair holds the distance from one instruction start to the next on the
// original side and on the clone side. Each side is one byte for 1..254, or
// 0xFF followed by a u32 little-endian delta.
//
// The index maps disjoint original byte ranges to the table describing them;
// a direct-mapped cache remembers recent orig -> clone answers.

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <stdexcept>
#include <vector>

namespace smc::xlat {

inline constexpr std::array<std::uint8_t, 4> kMarker{0xFF, 0xFF, 0xFF, 0xFF};
inline constexpr std::uint32_t kHeaderSize = 16;
inline constexpr std::uint8_t kEscape = 0xFF;
inline constexpr std::uint32_t kMaxPlainDelta = 254;

struct LayoutEntry {
  std::uint32_t orig = 0;
  std::uint32_t clone = 0;
  bool operator==(const LayoutEntry&) const = default;
};

using Layout = std::vector<LayoutEntry>;

class NonMonotonicLayout : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class TableFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Serialized table (marker included). Throws NonMonotonicLayout.
std::vector<std::uint8_t> emitTable(std::span<const LayoutEntry> layout);
std::uint32_t tableSize(std::span<const LayoutEntry> layout);

// Parses a table that starts with the marker. Throws TableFormatError.
Layout decodeTable(std::span<const std::uint8_t> bytes);

// Read access to the clone region; implemented over guest memory in the
// engine and over plain buffers in tests.
class ByteReader {
 public:
  virtual ~ByteReader() = default;
  virtual bool read(std::uint32_t addr, std::span<std::uint8_t> out) const = 0;
};

struct OrigRange {
  std::uint32_t start = 0;
  std::uint32_t stop = 0;  // exclusive
  bool operator==(const OrigRange&) const = default;
};

class OverlappingRange : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

struct CloneLookup {
  enum class Error : std::uint8_t { None, NotInClone, NotAnInstructionStart } error = Error::None;
  std::uint32_t orig = 0;
  std::uint32_t tableAddr = 0;

  explicit operator bool() const { return error == Error::None; }
};

class XlatMap {
 public:
  XlatMap(const ByteReader& clone, std::uint32_t cloneBegin, std::uint32_t cloneEnd,
          std::size_t cacheSlots = 1024);

  // Registers original ranges described by the table at tableAddr. Rejects any
  // overlap with an existing registration; nothing is registered on failure.
  void registerRanges(std::span<const OrigRange> ranges, std::uint32_t tableAddr);

  // Drops [start, stop) from every registration, splitting ranges as needed,
  // and flushes the cache.
  void retire(OrigRange range);

  std::optional<std::uint32_t> origToClone(std::uint32_t addr);
  // Forward scan for the marker, then a table walk.
  CloneLookup cloneToOrig(std::uint32_t cloneAddr) const;
  std::optional<std::uint32_t> instructionStartContaining(std::uint32_t addr) const;

  bool overlaps(OrigRange range) const;
  std::optional<std::uint32_t> tableFor(std::uint32_t addr) const;
  std::vector<std::pair<OrigRange, std::uint32_t>> registrations() const;

  void setCacheEnabled(bool enabled);
  bool cacheEnabled() const { return cacheEnabled_; }
  std::uint64_t cacheHits() const { return cacheHits_; }

  // Reads and decodes the table at tableAddr from the clone region.
  Layout readTable(std::uint32_t tableAddr) const;

 private:
  struct Registration {
    std::uint32_t stop;
    std::uint32_t tableAddr;
  };
  struct CacheSlot {
    bool valid = false;
    std::uint32_t orig = 0;
    std::uint32_t clone = 0;
  };

  std::map<std::uint32_t, Registration>::const_iterator find(std::uint32_t addr) const;
  void flushCache();

  const ByteReader& clone_;
  std::uint32_t cloneBegin_;
  std::uint32_t cloneEnd_;
  std::map<std::uint32_t, Registration> ranges_;
  std::vector<CacheSlot> cache_;
  bool cacheEnabled_ = true;
  std::uint64_t cacheHits_ = 0;
};

}  // namespace smc::xlat
