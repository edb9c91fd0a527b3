#pragma once

// Builds one run of clone code at a fixed address. Exit stubs are collected
// separately and placed by the caller, either right after the code or in a
// separate allocation; operands that point at them are patched by resolve().

#include <cstdint>
#include <vector>

#include "smc/isa.hpp"

namespace smc::engine::detail {

class Emitter {
 public:
  explicit Emitter(std::uint32_t base) : base_(base) {}

  std::uint32_t base() const { return base_; }
  std::uint32_t here() const { return base_ + static_cast<std::uint32_t>(code_.size()); }
  std::uint32_t size() const { return static_cast<std::uint32_t>(code_.size()); }

  // Emits one instruction; returns its address. If its bytes would form an
  // aligned table marker, NOPs are placed in front until they do not.
  std::uint32_t put(const isa::Instruction& insn, bool primary = false) {
    std::vector<std::uint8_t> bytes = isa::encode(insn);
    while (formsMarker(here(), bytes)) code_.push_back(static_cast<std::uint8_t>(isa::Opcode::Nop));
    const std::uint32_t at = here();
    code_.insert(code_.end(), bytes.begin(), bytes.end());
    if (primary) primaries_.push_back(at);
    return at;
  }

  void markBoundary() { boundaries_.push_back(here()); }

  // JMP or JZ whose target is exit stub `stub` (see addStub).
  std::uint32_t putToStub(isa::Opcode op, std::uint8_t reg, std::size_t stub, bool primary) {
    isa::Instruction insn{op, reg, 0, 0};
    std::uint32_t at = put(insn, primary);
    const std::uint32_t operand = at - base_ + (op == isa::Opcode::Jz ? 2u : 1u);
    fixups_.push_back({operand, Fixup::Kind::Stub, stub});
    return at;
  }

  // JMP to the address right after everything this emitter places (code,
  // stubs, table), i.e. where the next segment will start.
  std::uint32_t putToEnd(bool primary = false) {
    std::uint32_t at = put({isa::Opcode::Jmp, 0, 0, 0}, primary);
    fixups_.push_back({at - base_ + 1, Fixup::Kind::End, 0});
    return at;
  }

  std::size_t addStub(std::uint32_t calloutId) {
    stubs_.push_back(calloutId);
    return stubs_.size() - 1;
  }
  std::size_t stubCount() const { return stubs_.size(); }
  static constexpr std::uint32_t kStubSize = 5;

  // Patches stub operands (stubs laid out contiguously from stubBase) and the
  // end label.
  void resolve(std::uint32_t stubBase, std::uint32_t end) {
    for (const auto& f : fixups_) {
      std::uint32_t target = f.kind == Fixup::Kind::Stub
                                 ? stubBase + static_cast<std::uint32_t>(f.index) * kStubSize
                                 : end;
      isa::writeLe32(code_.data() + f.offset, target);
    }
    fixups_.clear();
  }

  std::vector<std::uint8_t> stubBytes() const {
    std::vector<std::uint8_t> out;
    for (std::uint32_t id : stubs_) isa::encodeTo({isa::Opcode::Callout, 0, 0, id}, out);
    return out;
  }

  const std::vector<std::uint8_t>& code() const { return code_; }
  std::vector<std::uint8_t>& code() { return code_; }
  const std::vector<std::uint32_t>& boundaries() const { return boundaries_; }
  const std::vector<std::uint32_t>& primaries() const { return primaries_; }
  const std::vector<std::uint32_t>& stubIds() const { return stubs_; }

  static bool formsMarker(std::uint32_t addr, const std::vector<std::uint8_t>& bytes) {
    for (std::size_t k = 0; k + 4 <= bytes.size(); ++k) {
      if (((addr + k) & 3u) != 0) continue;
      if (bytes[k] == 0xFF && bytes[k + 1] == 0xFF && bytes[k + 2] == 0xFF && bytes[k + 3] == 0xFF) return true;
    }
    return false;
  }

 private:
  struct Fixup {
    std::uint32_t offset;
    enum class Kind : std::uint8_t { Stub, End } kind;
    std::size_t index;
  };

  std::uint32_t base_;
  std::vector<std::uint8_t> code_;
  std::vector<std::uint32_t> stubs_;
  std::vector<Fixup> fixups_;
  std::vector<std::uint32_t> boundaries_;
  std::vector<std::uint32_t> primaries_;
};

}  // namespace smc::engine::detail
