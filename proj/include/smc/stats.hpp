#pragma once

#include <cstdint>

namespace smc {

struct RunStats {
  std::uint64_t guestInstructions = 0;
  std::uint64_t protectionFaults = 0;
  std::uint64_t pageCompares = 0;
  std::uint64_t dirtyFlushes = 0;
  std::uint64_t reprotections = 0;
  std::uint64_t lookups = 0;
  std::uint64_t trampolineCalls = 0;
  std::uint64_t blocksInstrumented = 0;
  std::uint64_t reinstrumentInPlace = 0;
  std::uint64_t reinstrumentJump = 0;
  std::uint64_t reinstrumentBrk = 0;
  std::uint64_t brkRedirects = 0;
  std::uint64_t hookCalls = 0;
  std::uint64_t cloneBytes = 0;
  double wallTime = 0.0;

  std::uint64_t reinstrumentTotal() const { return reinstrumentInPlace + reinstrumentJump + reinstrumentBrk; }
};

}  // namespace smc
