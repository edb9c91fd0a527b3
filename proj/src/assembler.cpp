#include <algorithm>
#include <cctype>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <optional>

#include "smc/image.hpp"
#include "smc/isa.hpp"
#include "smc/syscalls.hpp"

namespace smc::isa {

namespace {

std::string_view trim(std::string_view s) {
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
  while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
  return s;
}

bool isIdentStart(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }
bool isIdentChar(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '.'; }

std::vector<std::string_view> splitOperands(std::string_view s) {
  std::vector<std::string_view> out;
  if (trim(s).empty()) return out;
  std::size_t start = 0;
  for (std::size_t i = 0; i <= s.size(); ++i) {
    if (i == s.size() || s[i] == ',') {
      out.push_back(trim(s.substr(start, i - start)));
      start = i + 1;
    }
  }
  return out;
}

std::optional<std::uint8_t> parseRegister(std::string_view s) {
  if (s.size() != 2 || (s[0] != 'r' && s[0] != 'R')) return std::nullopt;
  if (s[1] < '0' || s[1] > '7') return std::nullopt;
  return static_cast<std::uint8_t>(s[1] - '0');
}

std::optional<std::int64_t> parseNumber(std::string_view s) {
  bool negative = false;
  if (!s.empty() && (s[0] == '-' || s[0] == '+')) {
    negative = s[0] == '-';
    s.remove_prefix(1);
  }
  if (s.empty()) return std::nullopt;
  int base = 10;
  if (s.size() > 2 && s[0] == '0' && (s[1] == 'x' || s[1] == 'X')) {
    base = 16;
    s.remove_prefix(2);
  }
  std::uint64_t value = 0;
  auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), value, base);
  if (ec != std::errc() || ptr != s.data() + s.size() || value > 0xFFFFFFFFull) return std::nullopt;
  auto v = static_cast<std::int64_t>(value);
  return negative ? -v : v;
}

struct Line {
  int number = 0;
  std::string_view mnemonic;  // instruction mnemonic or directive (with '.')
  std::string_view operands;
  std::uint32_t address = 0;
  std::uint32_t size = 0;
};

class Assembler {
 public:
  explicit Assembler(std::string_view source) : source_(source) {}

  Image run() {
    firstPass();
    if (!sawContent_) throw AsmError(0, "EmptyProgram: no instructions or data");
    secondPass();
    return std::move(image_);
  }

 private:
  void firstPass() {
    std::size_t pos = 0;
    int lineNo = 0;
    std::uint32_t location = 0;
    bool haveBase = false;
    while (pos <= source_.size()) {
      std::size_t eol = source_.find('\n', pos);
      if (eol == std::string_view::npos) eol = source_.size();
      std::string_view text = source_.substr(pos, eol - pos);
      pos = eol + 1;
      ++lineNo;
      if (auto c = text.find(';'); c != std::string_view::npos) text = text.substr(0, c);
      text = trim(text);

      // Leading labels, possibly several on one line.
      while (true) {
        std::size_t i = 0;
        if (text.empty() || !isIdentStart(text[0]) || text[0] == '.') break;
        while (i < text.size() && isIdentChar(text[i])) ++i;
        if (i >= text.size() || text[i] != ':') break;
        std::string name(text.substr(0, i));
        if (parseRegister(name)) throw AsmError(lineNo, "SyntaxError: register name used as label '" + name + "'");
        if (auto it = labelLines_.find(name); it != labelLines_.end())
          throw AsmError(lineNo, "DuplicateLabel: '" + name + "' defined on line " +
                                     std::to_string(it->second) + " and line " + std::to_string(lineNo));
        if (!haveBase) {
          haveBase = true;
          image_.base = location;
        }
        labelLines_[name] = lineNo;
        image_.labels[name] = location;
        text = trim(text.substr(i + 1));
      }
      if (text.empty()) continue;

      std::size_t split = 0;
      while (split < text.size() && !std::isspace(static_cast<unsigned char>(text[split]))) ++split;
      Line line;
      line.number = lineNo;
      line.mnemonic = text.substr(0, split);
      line.operands = trim(text.substr(split));

      if (line.mnemonic == ".org") {
        auto value = evalEarly(line.operands, lineNo);
        if (!haveBase) {
          haveBase = true;
          image_.base = value;
        } else if (value < location) {
          throw AsmError(lineNo, "SyntaxError: .org moves backwards");
        }
        if (sawContent_ && value > location) {
          line.address = location;
          line.size = value - location;
          line.mnemonic = ".space";
          lines_.push_back(line);
        }
        location = value;
        continue;
      }
      if (line.mnemonic == ".entry") {
        entryLine_ = line;
        continue;
      }
      if (!haveBase) {
        haveBase = true;
        image_.base = location;
      }
      line.address = location;
      line.size = sizeOf(line);
      location += line.size;
      sawContent_ = true;
      lines_.push_back(line);
    }
    image_.bytes.reserve(location - image_.base);
  }

  std::uint32_t sizeOf(const Line& line) {
    if (line.mnemonic == ".byte") return static_cast<std::uint32_t>(splitOperands(line.operands).size());
    if (line.mnemonic == ".word") return 4 * static_cast<std::uint32_t>(splitOperands(line.operands).size());
    if (line.mnemonic == ".space") return evalEarly(line.operands, line.number);
    if (!line.mnemonic.empty() && line.mnemonic[0] == '.')
      throw AsmError(line.number, "SyntaxError: unknown directive '" + std::string(line.mnemonic) + "'");
    const OpcodeInfo* op = findMnemonic(line.mnemonic);
    if (op == nullptr)
      throw AsmError(line.number, "SyntaxError: unknown mnemonic '" + std::string(line.mnemonic) + "'");
    if (op->opcode == Opcode::Callout || op->opcode == Opcode::Illegal)
      throw AsmError(line.number, "SyntaxError: " + std::string(op->mnemonic) +
                                      " is reserved and cannot appear in a guest program");
    return op->length;
  }

  // Expressions: number | label | label(+|-)number.
  std::optional<std::int64_t> tryEval(std::string_view expr, int lineNo, bool requireResolved) const {
    expr = trim(expr);
    if (expr.empty()) throw AsmError(lineNo, "SyntaxError: missing operand");
    if (!isIdentStart(expr[0]) || expr[0] == '.') {
      auto n = parseNumber(expr);
      if (!n) throw AsmError(lineNo, "SyntaxError: bad number '" + std::string(expr) + "'");
      return n;
    }
    std::size_t i = 0;
    while (i < expr.size() && isIdentChar(expr[i])) ++i;
    std::string_view name = expr.substr(0, i);
    std::int64_t offset = 0;
    std::string_view rest = trim(expr.substr(i));
    if (!rest.empty()) {
      if (rest[0] != '+' && rest[0] != '-')
        throw AsmError(lineNo, "SyntaxError: bad expression '" + std::string(expr) + "'");
      std::string_view num = trim(rest.substr(1));
      auto n = parseNumber(num);
      if (!n || (!num.empty() && (num[0] == '-' || num[0] == '+')))
        throw AsmError(lineNo, "SyntaxError: bad expression '" + std::string(expr) + "'");
      offset = rest[0] == '-' ? -*n : *n;
    }
    auto it = image_.labels.find(name);
    if (it == image_.labels.end()) {
      if (requireResolved) throw AsmError(lineNo, "UnresolvedLabel: '" + std::string(name) + "'");
      return std::nullopt;
    }
    return static_cast<std::int64_t>(it->second) + offset;
  }

  std::uint32_t eval(std::string_view expr, int lineNo) const {
    return static_cast<std::uint32_t>(*tryEval(expr, lineNo, true));
  }

  // Used for .org/.space, which must be resolvable during the first pass.
  std::uint32_t evalEarly(std::string_view expr, int lineNo) const {
    auto v = tryEval(expr, lineNo, false);
    if (!v) throw AsmError(lineNo, "SyntaxError: .org/.space need a number or an earlier label");
    return static_cast<std::uint32_t>(*v);
  }

  std::uint8_t regOperand(std::string_view s, int lineNo) const {
    auto r = parseRegister(s);
    if (!r) throw AsmError(lineNo, "SyntaxError: expected register, got '" + std::string(s) + "'");
    return *r;
  }

  std::string_view bracketed(std::string_view s, int lineNo) const {
    if (s.size() < 2 || s.front() != '[' || s.back() != ']')
      throw AsmError(lineNo, "SyntaxError: expected [operand], got '" + std::string(s) + "'");
    return trim(s.substr(1, s.size() - 2));
  }

  Instruction parseInstruction(const Line& line) const {
    const OpcodeInfo* op = findMnemonic(line.mnemonic);
    auto ops = splitOperands(line.operands);
    int n = line.number;
    auto expect = [&](std::size_t count) {
      if (ops.size() != count)
        throw AsmError(n, "SyntaxError: " + std::string(op->mnemonic) + " takes " +
                              std::to_string(count) + " operand(s)");
    };
    Instruction insn;
    insn.opcode = op->opcode;
    switch (op->opcode) {
      case Opcode::LoadI:
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        insn.imm = eval(ops[1], n);
        break;
      case Opcode::Mov:
      case Opcode::Add:
      case Opcode::Sub:
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        insn.r2 = regOperand(ops[1], n);
        break;
      case Opcode::Load:
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        insn.imm = eval(bracketed(ops[1], n), n);
        break;
      case Opcode::Store:
        expect(2);
        insn.imm = eval(bracketed(ops[0], n), n);
        insn.r1 = regOperand(ops[1], n);
        break;
      case Opcode::LoadR:
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        insn.r2 = regOperand(bracketed(ops[1], n), n);
        break;
      case Opcode::StoreR:
        expect(2);
        insn.r1 = regOperand(bracketed(ops[0], n), n);
        insn.r2 = regOperand(ops[1], n);
        break;
      case Opcode::LeaPc:
      case Opcode::LoadPc: {
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        std::string_view target = ops[1];
        if (!target.empty() && (target[0] == '+' || target[0] == '-' ||
                                std::isdigit(static_cast<unsigned char>(target[0])))) {
          insn.imm = eval(target, n);  // raw displacement
        } else {
          insn.imm = eval(target, n) - (line.address + op->length);
        }
        break;
      }
      case Opcode::Jmp:
      case Opcode::Call:
        expect(1);
        insn.imm = eval(ops[0], n);
        break;
      case Opcode::JmpR:
        expect(1);
        insn.r1 = regOperand(ops[0], n);
        break;
      case Opcode::Jz:
        expect(2);
        insn.r1 = regOperand(ops[0], n);
        insn.imm = eval(ops[1], n);
        break;
      case Opcode::Syscall: {
        expect(1);
        if (auto sc = vm::syscallByName(ops[0])) {
          insn.imm = static_cast<std::uint32_t>(*sc);
        } else {
          insn.imm = eval(ops[0], n);
        }
        if (insn.imm > 0xFF) throw AsmError(n, "SyntaxError: SYSCALL number out of range");
        break;
      }
      default:
        expect(0);
        break;
    }
    return insn;
  }

  void secondPass() {
    auto& out = image_.bytes;
    for (const Line& line : lines_) {
      if (line.mnemonic == ".space") {
        out.insert(out.end(), line.size, 0);
      } else if (line.mnemonic == ".byte") {
        for (auto op : splitOperands(line.operands)) {
          std::uint32_t v = eval(op, line.number);
          if (v > 0xFF && v < 0xFFFFFF80u) throw AsmError(line.number, "SyntaxError: .byte value out of range");
          out.push_back(static_cast<std::uint8_t>(v));
        }
      } else if (line.mnemonic == ".word") {
        for (auto op : splitOperands(line.operands)) appendLe32(out, eval(op, line.number));
      } else {
        encodeTo(parseInstruction(line), out);
      }
    }
    if (entryLine_) {
      image_.entry = eval(entryLine_->operands, entryLine_->number);
    } else if (auto it = image_.labels.find("start"); it != image_.labels.end()) {
      image_.entry = it->second;
    } else {
      image_.entry = image_.base;
    }
  }

  std::string_view source_;
  Image image_;
  std::vector<Line> lines_;
  std::map<std::string, int, std::less<>> labelLines_;
  std::optional<Line> entryLine_;
  bool sawContent_ = false;
};

std::string hex(std::uint32_t v) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "0x%x", v);
  return buf;
}

}  // namespace

std::uint32_t Image::label(std::string_view name) const {
  auto it = labels.find(name);
  if (it == labels.end()) throw std::out_of_range("no label '" + std::string(name) + "'");
  return it->second;
}

Image assemble(std::string_view source) { return Assembler(source).run(); }

std::string disassemble(const Image& image) {
  std::string out = ".org " + hex(image.base) + "\n.entry " + hex(image.entry) + "\n";
  std::span<const std::uint8_t> bytes(image.bytes);
  std::size_t off = 0;
  while (off < bytes.size()) {
    auto d = decode(bytes.subspan(off));
    char addr[16];
    std::snprintf(addr, sizeof addr, "%08x", image.base + static_cast<std::uint32_t>(off));
    if (d && d->opcode != Opcode::Illegal) {
      out += "  " + format(*d) + "    ; " + addr + "\n";
      off += d->length();
    } else {
      out += "  .byte " + hex(bytes[off]) + "    ; " + addr + "\n";
      off += 1;
    }
  }
  return out;
}

std::vector<std::uint8_t> serializeImage(const Image& image) {
  std::vector<std::uint8_t> out{'S', 'M', 'C', 'I'};
  appendLe32(out, image.base);
  appendLe32(out, image.entry);
  appendLe32(out, static_cast<std::uint32_t>(image.bytes.size()));
  out.insert(out.end(), image.bytes.begin(), image.bytes.end());
  return out;
}

Image parseImage(std::span<const std::uint8_t> data) {
  if (data.size() < 16 || data[0] != 'S' || data[1] != 'M' || data[2] != 'C' || data[3] != 'I')
    throw ImageFormatError("not an SMCI image");
  Image image;
  image.base = readLe32(&data[4]);
  image.entry = readLe32(&data[8]);
  std::uint32_t length = readLe32(&data[12]);
  if (data.size() - 16 != length) throw ImageFormatError("SMCI length field does not match payload");
  if (static_cast<std::uint64_t>(image.base) + length > 0x100000000ull)
    throw ImageFormatError("SMCI image wraps the address space");
  image.bytes.assign(data.begin() + 16, data.end());
  return image;
}

void writeImageFile(const std::filesystem::path& path, const Image& image) {
  auto bytes = serializeImage(image);
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw ImageFormatError("cannot write " + path.string());
  f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

Image readImageFile(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw ImageFormatError("cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return parseImage(bytes);
}

}  // namespace smc::isa
