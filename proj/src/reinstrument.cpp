#include "smc/reinstrument.hpp"

#include <algorithm>
#include <set>

#include "emitter.hpp"
#include "smc/engine.hpp"

namespace smc::engine {

using detail::Emitter;
using isa::Instruction;
using isa::Opcode;

std::string_view toString(Strategy s) {
  switch (s) {
    case Strategy::InPlace: return "in-place";
    case Strategy::JumpPatch: return "jump-patch";
    case Strategy::BrkFill: return "brk-fill";
  }
  return "?";
}

Strategy chooseStrategy(bool newCodeDecodes, bool inPlaceFits, std::uint32_t oldCloneLength) {
  if (newCodeDecodes && inPlaceFits) return Strategy::InPlace;
  if (newCodeDecodes && oldCloneLength >= isa::kJumpLength) return Strategy::JumpPatch;
  return Strategy::BrkFill;
}

bool planIsConsistent(const PatchPlan& plan) {
  switch (plan.strategy) {
    case Strategy::InPlace:
      return plan.newCodeDecodes && plan.newCloneBytes.size() <= plan.oldCloneLength;
    case Strategy::JumpPatch:
      return plan.newCodeDecodes && plan.oldCloneLength >= isa::kJumpLength;
    case Strategy::BrkFill:
      return plan.oldCloneLength < isa::kJumpLength || !plan.newCodeDecodes;
  }
  return false;
}

namespace {

bool fallsThrough(Opcode op) {
  return op != Opcode::Jmp && op != Opcode::Call && op != Opcode::JmpR && op != Opcode::Ret && op != Opcode::Halt;
}

bool endsBasicBlock(Opcode op) { return !fallsThrough(op) || op == Opcode::Jz; }

struct Piece {
  std::uint32_t start;
  std::uint32_t length;
  std::uint32_t orig;
};

// Clone-contiguous stretches of a run's expansions.
std::vector<Piece> piecesOf(const std::vector<InstructionRecord>& run) {
  std::vector<Piece> out;
  for (const auto& r : run) {
    if (!out.empty() && out.back().start + out.back().length == r.cloneStart) {
      out.back().length += r.expansionLength;
    } else {
      out.push_back({r.cloneStart, r.expansionLength, r.orig});
    }
  }
  return out;
}

}  // namespace

void Engine::applyModifications(std::span<const guard::ChangedRange> ranges) {
  std::set<std::uint32_t> hit;
  for (const auto& range : ranges) {
    auto it = records_.upper_bound(range.start);
    if (it != records_.begin() && std::prev(it)->second.origEnd() > range.start) --it;
    for (; it != records_.end() && it->first < range.stop; ++it) hit.insert(it->first);
  }
  if (hit.empty()) return;

  std::vector<std::vector<std::uint32_t>> runs;
  std::uint32_t lastEnd = 0;
  for (std::uint32_t orig : hit) {
    const auto& rec = records_.at(orig);
    if (runs.empty() || lastEnd != orig) runs.emplace_back();
    runs.back().push_back(orig);
    lastEnd = rec.origEnd();
  }
  for (const auto& starts : runs) {
    // An earlier run may have absorbed these records while handling a spill.
    std::vector<InstructionRecord> run;
    for (std::uint32_t orig : starts) {
      auto it = records_.find(orig);
      if (it != records_.end()) run.push_back(it->second);
    }
    if (!run.empty()) patchRun(std::move(run));
  }
}

void Engine::clearPrimaries(std::uint32_t start, std::uint32_t len) {
  for (std::uint32_t a = start; a < start + len; ++a) clone_.clearFlag(a, CloneRegion::kPrimary);
}

void Engine::fixupStrandedThreads(std::uint32_t start, std::uint32_t len) {
  for (auto& t : vm_.threads()) {
    if (!t.alive || t.pc < start || t.pc >= start + len) continue;
    std::uint32_t pc = t.pc;
    while (pc > start && (clone_.flags(pc) & CloneRegion::kBoundary) == 0) --pc;
    t.pc = pc;
  }
}

void Engine::brkFill(std::uint32_t start, std::uint32_t len, std::uint32_t redirectOrig) {
  std::vector<std::uint8_t> fill(len, static_cast<std::uint8_t>(Opcode::Brk));
  writeClone(start, fill);
  clearPrimaries(start, len);
  Callout c;
  c.kind = CalloutKind::BreakpointRedirect;
  c.origPc = redirectOrig;
  c.target = redirectOrig;
  callouts_.add(c);
}

void Engine::retireRecords(const std::vector<InstructionRecord>& run) {
  for (const auto& r : run) {
    records_.erase(r.orig);
    xlat_->retire({r.orig, r.origEnd()});
  }
}

bool Engine::tryInPlace(const std::vector<InstructionRecord>& run, const std::vector<Instruction>& fresh) {
  if (fresh.size() != run.size()) return false;
  std::vector<Emitter> slots;
  slots.reserve(run.size());
  for (std::size_t i = 0; i < run.size(); ++i) {
    const auto& rec = run[i];
    const Instruction& insn = fresh[i];
    if (insn.length() != rec.length) return false;
    Emitter em(rec.cloneStart);
    emitHooks(em, rec.orig, insn, rec.blockStart);
    emitBody(em, rec.orig, insn);
    if (fallsThrough(insn.opcode) && !rec.nextIsFallThrough) emitContinuation(em, rec.origEnd());
    if (em.size() > rec.expansionLength) return false;
    slots.push_back(std::move(em));
  }

  for (std::size_t i = 0; i < run.size(); ++i) {
    const auto& rec = run[i];
    Emitter& em = slots[i];
    placeStubs(em);
    PatchPlan plan;
    plan.origStart = rec.orig;
    plan.origStop = rec.origEnd();
    plan.oldCloneStart = rec.cloneStart;
    plan.oldCloneLength = rec.expansionLength;
    plan.newCloneBytes = em.code();
    plan.strategy = Strategy::InPlace;
    plans_.push_back(plan);

    std::vector<std::uint8_t> bytes = em.code();
    bytes.resize(rec.expansionLength, static_cast<std::uint8_t>(Opcode::Nop));
    writeClone(rec.cloneStart, bytes);
    clearPrimaries(rec.cloneStart, rec.expansionLength);
    applyFlags(em);
    clone_.setFlag(rec.cloneStart, CloneRegion::kBoundary);

    auto& stored = records_.at(rec.orig);
    vm_.memory().read(rec.orig, std::span<std::uint8_t>(stored.bytes.data(), rec.length));
    patchSites_.push_back({Strategy::InPlace, rec.orig, rec.cloneStart, rec.expansionLength, std::nullopt});
    fixupStrandedThreads(rec.cloneStart, rec.expansionLength);
  }
  ++stats_.reinstrumentInPlace;
  return true;
}

void Engine::patchRun(std::vector<InstructionRecord> run) {
  bool unchanged = true;
  for (const auto& r : run) {
    std::array<std::uint8_t, isa::kMaxInstructionLength> now{};
    vm_.memory().read(r.orig, std::span<std::uint8_t>(now.data(), r.length));
    if (!std::equal(now.begin(), now.begin() + r.length, r.bytes.begin())) unchanged = false;
  }
  if (unchanged) return;

  // Decode the new code over the run. An instruction that spills past the
  // run pulls the records it overlaps into the run.
  const std::uint32_t start = run.front().orig;
  std::uint32_t stop = run.back().origEnd();
  std::vector<std::uint32_t> freshAt;
  std::vector<Instruction> fresh;
  bool decodes = true;
  std::uint32_t at = start;
  while (at < stop) {
    auto d = decodeOrig(at);
    if (!d || d->opcode == Opcode::Brk || d->opcode == Opcode::Illegal) {
      decodes = false;
      break;
    }
    const std::uint32_t end = at + d->length();
    while (end > stop) {
      auto it = records_.lower_bound(stop);
      if (it == records_.end() || it->first >= end) break;
      run.push_back(it->second);
      stop = it->second.origEnd();
    }
    freshAt.push_back(at);
    fresh.push_back(*d);
    at = end;
  }
  const std::uint32_t newEnd = decodes ? std::max(at, stop) : stop;

  bool coincide = decodes && fresh.size() == run.size();
  for (std::size_t i = 0; coincide && i < run.size(); ++i) coincide = freshAt[i] == run[i].orig;
  if (coincide && tryInPlace(run, fresh)) return;

  const auto pieces = piecesOf(run);
  const Strategy strategy = chooseStrategy(decodes, false, pieces.front().length);
  PatchPlan plan;
  plan.origStart = start;
  plan.origStop = newEnd;
  plan.oldCloneStart = pieces.front().start;
  plan.oldCloneLength = pieces.front().length;
  plan.newCodeDecodes = decodes;
  plan.strategy = strategy;

  retireRecords(run);

  if (strategy == Strategy::JumpPatch) {
    std::map<std::uint32_t, std::uint32_t> local;
    struct LocalScope {
      const std::map<std::uint32_t, std::uint32_t>*& slot;
      ~LocalScope() { slot = nullptr; }
    } scope{local_};
    local_ = &local;

    Emitter em(clone_.cursor());
    std::vector<InstructionRecord> recs;
    std::uint32_t blockStart = start;
    for (std::size_t i = 0; i < fresh.size(); ++i) {
      const Instruction& insn = fresh[i];
      InstructionRecord rec;
      rec.orig = freshAt[i];
      rec.length = static_cast<std::uint8_t>(insn.length());
      vm_.memory().read(rec.orig, std::span<std::uint8_t>(rec.bytes.data(), rec.length));
      rec.blockStart = blockStart;
      em.markBoundary();
      rec.cloneStart = em.here();
      local[rec.orig] = rec.cloneStart;
      emitHooks(em, rec.orig, insn, blockStart);
      emitBody(em, rec.orig, insn);
      const bool last = i + 1 == fresh.size();
      if (last && fallsThrough(insn.opcode)) emitContinuation(em, rec.origEnd());
      rec.expansionLength = em.here() - rec.cloneStart;
      if (last && fallsThrough(insn.opcode)) rec.expansionLength -= Emitter::kStubSize;
      rec.nextIsFallThrough = fallsThrough(insn.opcode);
      recs.push_back(rec);
      if (endsBasicBlock(insn.opcode)) blockStart = rec.origEnd();
    }
    plan.newCloneBytes = em.code();
    const EmittedSegment seg = commitSegment(em, recs);

    const auto& head = pieces.front();
    std::vector<std::uint8_t> patch = isa::encode({Opcode::Jmp, 0, 0, seg.cloneStart});
    patch.resize(head.length, static_cast<std::uint8_t>(Opcode::Brk));
    writeClone(head.start, patch);
    clearPrimaries(head.start, head.length);
    for (std::size_t i = 1; i < pieces.size(); ++i) brkFill(pieces[i].start, pieces[i].length, pieces[i].orig);
    patchSites_.push_back({Strategy::JumpPatch, start, head.start, head.length, seg.cloneStart});
    ++stats_.reinstrumentJump;
  } else {
    for (const auto& p : pieces) {
      brkFill(p.start, p.length, p.orig);
      patchSites_.push_back({Strategy::BrkFill, p.orig, p.start, p.length, std::nullopt});
    }
    ++stats_.reinstrumentBrk;
  }
  plans_.push_back(std::move(plan));
  for (const auto& p : pieces) fixupStrandedThreads(p.start, p.length);
}

}  // namespace smc::engine
