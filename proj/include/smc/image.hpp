#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace smc::isa {

// A loadable guest program: contiguous bytes at `base`, execution starting at
// `entry`. Labels are kept for tests and tooling; they are not serialized.
struct Image {
  std::uint32_t base = 0;
  std::uint32_t entry = 0;
  std::vector<std::uint8_t> bytes;
  std::map<std::string, std::uint32_t, std::less<>> labels;

  std::uint32_t end() const { return base + static_cast<std::uint32_t>(bytes.size()); }
  std::uint32_t label(std::string_view name) const;
};

class AsmError : public std::runtime_error {
 public:
  AsmError(int line, const std::string& what)
      : std::runtime_error(line > 0 ? "line " + std::to_string(line) + ": " + what : what),
        line_(line) {}
  int line() const { return line_; }

 private:
  int line_;
};

// Line-oriented assembler. Directives: .org, .entry, .byte, .word, .space and
// `label:`. Comments start with ';'. Forward label references are allowed.
Image assemble(std::string_view source);

// Linear-sweep listing that reassembles to identical bytes. Bytes that do not
// decode as an original-program instruction are emitted as .byte.
std::string disassemble(const Image& image);

class ImageFormatError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// "SMCI" | u32 base | u32 entry | u32 length | raw bytes, little-endian.
std::vector<std::uint8_t> serializeImage(const Image& image);
Image parseImage(std::span<const std::uint8_t> data);

void writeImageFile(const std::filesystem::path& path, const Image& image);
Image readImageFile(const std::filesystem::path& path);

}  // namespace smc::isa
