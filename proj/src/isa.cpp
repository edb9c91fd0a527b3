#include "smc/isa.hpp"

#include <algorithm>
#include <array>
#include <cctype>
#include <cstdio>

namespace smc::isa {

namespace {

constexpr std::array<OpcodeInfo, 21> kTable{{
    {Opcode::Halt, "HALT", Layout::None, 1},
    {Opcode::Nop, "NOP", Layout::None, 1},
    {Opcode::LoadI, "LOADI", Layout::RegImm32, 6},
    {Opcode::Mov, "MOV", Layout::RegReg, 3},
    {Opcode::Add, "ADD", Layout::RegReg, 3},
    {Opcode::Sub, "SUB", Layout::RegReg, 3},
    {Opcode::Load, "LOAD", Layout::RegImm32, 6},
    {Opcode::Store, "STORE", Layout::RegImm32, 6},
    {Opcode::LoadR, "LOADR", Layout::RegReg, 3},
    {Opcode::StoreR, "STORER", Layout::RegReg, 3},
    {Opcode::LeaPc, "LEAPC", Layout::RegImm32, 6},
    {Opcode::LoadPc, "LOADPC", Layout::RegImm32, 6},
    {Opcode::Jmp, "JMP", Layout::Imm32, 5},
    {Opcode::Call, "CALL", Layout::Imm32, 5},
    {Opcode::JmpR, "JMPR", Layout::Reg, 2},
    {Opcode::Ret, "RET", Layout::None, 1},
    {Opcode::Jz, "JZ", Layout::RegImm32, 6},
    {Opcode::Syscall, "SYSCALL", Layout::Imm8, 2},
    {Opcode::Brk, "BRK", Layout::None, 1},
    {Opcode::Callout, "CALLOUT", Layout::Imm32, 5},
    {Opcode::Illegal, "ILLEGAL", Layout::None, 1},
}};

constexpr std::array<std::int16_t, 256> buildIndex() {
  std::array<std::int16_t, 256> index{};
  for (auto& slot : index) slot = -1;
  for (std::size_t i = 0; i < kTable.size(); ++i)
    index[static_cast<std::uint8_t>(kTable[i].opcode)] = static_cast<std::int16_t>(i);
  return index;
}

constexpr auto kIndex = buildIndex();

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

std::string reg(std::uint8_t r) { return "r" + std::to_string(r); }

}  // namespace

std::span<const OpcodeInfo> opcodeTable() { return kTable; }

const OpcodeInfo* findOpcode(std::uint8_t byte) {
  auto i = kIndex[byte];
  return i < 0 ? nullptr : &kTable[static_cast<std::size_t>(i)];
}

const OpcodeInfo& info(Opcode op) { return *findOpcode(static_cast<std::uint8_t>(op)); }

const OpcodeInfo* findMnemonic(std::string_view mnemonic) {
  for (const auto& entry : kTable) {
    if (entry.mnemonic.size() != mnemonic.size()) continue;
    bool same = std::equal(entry.mnemonic.begin(), entry.mnemonic.end(), mnemonic.begin(),
                           [](char a, char b) {
                             return a == std::toupper(static_cast<unsigned char>(b));
                           });
    if (same) return &entry;
  }
  return nullptr;
}

std::string_view toString(DecodeError e) {
  switch (e) {
    case DecodeError::None: return "none";
    case DecodeError::UnknownOpcode: return "unknown opcode";
    case DecodeError::Truncated: return "truncated instruction";
    case DecodeError::BadRegister: return "bad register operand";
    case DecodeError::CalloutOutsideClone: return "CALLOUT outside clone region";
  }
  return "?";
}

DecodeResult decode(std::span<const std::uint8_t> bytes, bool inClone) {
  if (bytes.empty()) return {std::nullopt, DecodeError::Truncated};
  const OpcodeInfo* op = findOpcode(bytes[0]);
  if (op == nullptr) return {std::nullopt, DecodeError::UnknownOpcode};
  if (bytes.size() < op->length) return {std::nullopt, DecodeError::Truncated};
  if (op->opcode == Opcode::Callout && !inClone)
    return {std::nullopt, DecodeError::CalloutOutsideClone};

  Instruction insn;
  insn.opcode = op->opcode;
  switch (op->layout) {
    case Layout::None:
      break;
    case Layout::RegImm32:
      insn.r1 = bytes[1];
      insn.imm = readLe32(&bytes[2]);
      break;
    case Layout::RegReg:
      insn.r1 = bytes[1];
      insn.r2 = bytes[2];
      break;
    case Layout::Imm32:
      insn.imm = readLe32(&bytes[1]);
      break;
    case Layout::Reg:
      insn.r1 = bytes[1];
      break;
    case Layout::Imm8:
      insn.imm = bytes[1];
      break;
  }
  if (insn.r1 >= kRegisterCount || insn.r2 >= kRegisterCount)
    return {std::nullopt, DecodeError::BadRegister};
  return {insn, DecodeError::None};
}

void validate(const Instruction& insn) {
  const OpcodeInfo* op = findOpcode(static_cast<std::uint8_t>(insn.opcode));
  if (op == nullptr) throw MalformedInstruction("unknown opcode");
  auto fail = [&](const char* what) {
    throw MalformedInstruction(std::string(op->mnemonic) + ": " + what);
  };
  bool usesR1 = op->layout == Layout::RegImm32 || op->layout == Layout::RegReg ||
                op->layout == Layout::Reg;
  bool usesR2 = op->layout == Layout::RegReg;
  bool usesImm = op->layout == Layout::RegImm32 || op->layout == Layout::Imm32 ||
                 op->layout == Layout::Imm8;
  if (insn.r1 >= kRegisterCount || insn.r2 >= kRegisterCount) fail("register out of range");
  if (!usesR1 && insn.r1 != 0) fail("unexpected register operand");
  if (!usesR2 && insn.r2 != 0) fail("unexpected second register operand");
  if (!usesImm && insn.imm != 0) fail("unexpected immediate operand");
  if (op->layout == Layout::Imm8 && insn.imm > 0xFF) fail("imm8 out of range");
}

void encodeTo(const Instruction& insn, std::vector<std::uint8_t>& out) {
  validate(insn);
  const OpcodeInfo& op = info(insn.opcode);
  out.push_back(static_cast<std::uint8_t>(insn.opcode));
  switch (op.layout) {
    case Layout::None:
      break;
    case Layout::RegImm32:
      out.push_back(insn.r1);
      appendLe32(out, insn.imm);
      break;
    case Layout::RegReg:
      out.push_back(insn.r1);
      out.push_back(insn.r2);
      break;
    case Layout::Imm32:
      appendLe32(out, insn.imm);
      break;
    case Layout::Reg:
      out.push_back(insn.r1);
      break;
    case Layout::Imm8:
      out.push_back(static_cast<std::uint8_t>(insn.imm));
      break;
  }
}

std::vector<std::uint8_t> encode(const Instruction& insn) {
  std::vector<std::uint8_t> out;
  out.reserve(insn.length());
  encodeTo(insn, out);
  return out;
}

std::string format(const Instruction& insn) {
  const OpcodeInfo& op = info(insn.opcode);
  std::string m(op.mnemonic);
  switch (insn.opcode) {
    case Opcode::LoadI:
      return m + " " + reg(insn.r1) + ", " + hex(insn.imm);
    case Opcode::Mov:
    case Opcode::Add:
    case Opcode::Sub:
      return m + " " + reg(insn.r1) + ", " + reg(insn.r2);
    case Opcode::Load:
      return m + " " + reg(insn.r1) + ", [" + hex(insn.imm) + "]";
    case Opcode::Store:
      return m + " [" + hex(insn.imm) + "], " + reg(insn.r1);
    case Opcode::LoadR:
      return m + " " + reg(insn.r1) + ", [" + reg(insn.r2) + "]";
    case Opcode::StoreR:
      return m + " [" + reg(insn.r1) + "], " + reg(insn.r2);
    case Opcode::LeaPc:
    case Opcode::LoadPc: {
      auto disp = static_cast<std::int32_t>(insn.imm);
      std::string d = disp < 0 ? "-" + hex(static_cast<std::uint32_t>(-static_cast<std::int64_t>(disp)))
                               : "+" + hex(insn.imm);
      return m + " " + reg(insn.r1) + ", " + d;
    }
    case Opcode::Jmp:
    case Opcode::Call:
    case Opcode::Callout:
      return m + " " + hex(insn.imm);
    case Opcode::JmpR:
      return m + " " + reg(insn.r1);
    case Opcode::Jz:
      return m + " " + reg(insn.r1) + ", " + hex(insn.imm);
    case Opcode::Syscall:
      return m + " " + std::to_string(insn.imm);
    default:
      return m;
  }
}

}  // namespace smc::isa
