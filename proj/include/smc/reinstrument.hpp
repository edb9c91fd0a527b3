#pragma once

// Strategy selection for replacing stale clone code after the original code
// changed. The engine applies plans; see Engine::applyModifications.

#include <cstdint>
#include <string_view>
#include <vector>

namespace smc::engine {

enum class Strategy : std::uint8_t { InPlace, JumpPatch, BrkFill };

std::string_view toString(Strategy s);

struct PatchPlan {
  std::uint32_t origStart = 0;
  std::uint32_t origStop = 0;
  std::uint32_t oldCloneStart = 0;
  std::uint32_t oldCloneLength = 0;  // contiguous clone bytes at oldCloneStart
  std::vector<std::uint8_t> newCloneBytes;
  bool newCodeDecodes = true;
  Strategy strategy = Strategy::BrkFill;
};

// First applicable strategy in the order InPlace, JumpPatch, BrkFill.
// `inPlaceFits` means every modified instruction keeps its boundaries and its
// new expansion fits in the old one.
Strategy chooseStrategy(bool newCodeDecodes, bool inPlaceFits, std::uint32_t oldCloneLength);

// Whether a plan's strategy is consistent with its sizes.
bool planIsConsistent(const PatchPlan& plan);

}  // namespace smc::engine
