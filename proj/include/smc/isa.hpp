#pragma once

// Guest instruction set: a small variable-length ISA with PC-relative
// addressing and a reserved 0xFF opcode used as the translation-table marker.

#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace smc::isa {

inline constexpr int kRegisterCount = 8;
inline constexpr std::uint8_t kJumpLength = 5;   // JMP abs32
inline constexpr std::uint8_t kMaxInstructionLength = 6;

enum class Opcode : std::uint8_t {
  Halt = 0x00,
  Nop = 0x01,
  LoadI = 0x10,
  Mov = 0x11,
  Add = 0x12,
  Sub = 0x13,
  Load = 0x20,
  Store = 0x21,
  LoadR = 0x22,
  StoreR = 0x23,
  LeaPc = 0x24,
  LoadPc = 0x25,
  Jmp = 0x30,
  Call = 0x31,
  JmpR = 0x32,
  Ret = 0x33,
  Jz = 0x34,
  Syscall = 0x40,
  Brk = 0xCC,
  Callout = 0xF0,
  Illegal = 0xFF,
};

// Byte layout following the opcode byte.
enum class Layout : std::uint8_t {
  None,      // [op]
  RegImm32,  // [op, r1, imm32]
  RegReg,    // [op, r1, r2]
  Imm32,     // [op, imm32]
  Reg,       // [op, r1]
  Imm8,      // [op, imm8]
};

struct OpcodeInfo {
  Opcode opcode;
  std::string_view mnemonic;
  Layout layout;
  std::uint8_t length;
};

std::span<const OpcodeInfo> opcodeTable();
const OpcodeInfo* findOpcode(std::uint8_t byte);
const OpcodeInfo& info(Opcode op);
const OpcodeInfo* findMnemonic(std::string_view mnemonic);

// Operand roles by layout:
//   RegImm32: r1 = register, imm = immediate / absolute address / displacement
//             (STORE keeps its source register in r1)
//   RegReg:   r1 = destination (or address register for STORER), r2 = source
//   Imm32:    imm = absolute target or callout id
//   Reg:      r1
//   Imm8:     imm = syscall number (0..255)
struct Instruction {
  Opcode opcode = Opcode::Nop;
  std::uint8_t r1 = 0;
  std::uint8_t r2 = 0;
  std::uint32_t imm = 0;

  std::uint8_t length() const { return info(opcode).length; }
  bool pcRelative() const { return opcode == Opcode::LeaPc || opcode == Opcode::LoadPc; }

  bool operator==(const Instruction&) const = default;
};

enum class DecodeError : std::uint8_t {
  None,
  UnknownOpcode,
  Truncated,
  BadRegister,
  CalloutOutsideClone,
};

std::string_view toString(DecodeError e);

struct DecodeResult {
  std::optional<Instruction> instruction;
  DecodeError error = DecodeError::None;

  explicit operator bool() const { return instruction.has_value(); }
  const Instruction& operator*() const { return *instruction; }
  const Instruction* operator->() const { return &*instruction; }
};

// Decodes the instruction at the front of `bytes`. Never reads more than the
// opcode's declared length. CALLOUT only decodes when `inClone` is set.
DecodeResult decode(std::span<const std::uint8_t> bytes, bool inClone = false);

class MalformedInstruction : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

void encodeTo(const Instruction& insn, std::vector<std::uint8_t>& out);
std::vector<std::uint8_t> encode(const Instruction& insn);

// Throws MalformedInstruction when operands do not fit the opcode's layout.
void validate(const Instruction& insn);

// One-line assembly form, reassemblable by the assembler.
std::string format(const Instruction& insn);

// Little-endian helpers shared by the image, table and VM code.
inline std::uint32_t readLe32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}

inline void writeLe32(std::uint8_t* p, std::uint32_t v) {
  p[0] = static_cast<std::uint8_t>(v);
  p[1] = static_cast<std::uint8_t>(v >> 8);
  p[2] = static_cast<std::uint8_t>(v >> 16);
  p[3] = static_cast<std::uint8_t>(v >> 24);
}

inline void appendLe32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  out.push_back(static_cast<std::uint8_t>(v));
  out.push_back(static_cast<std::uint8_t>(v >> 8));
  out.push_back(static_cast<std::uint8_t>(v >> 16));
  out.push_back(static_cast<std::uint8_t>(v >> 24));
}

}  // namespace smc::isa
