#pragma once

#include <cstdint>
#include <optional>
#include <string_view>

namespace smc::vm {

// SYSCALL imm8 numbers. Arguments and results travel in r0/r1.
enum class Syscall : std::uint8_t {
  Exit = 0,       // exit(code = r0) ends the whole program
  Print = 1,      // append r0 (decimal, newline) to the output stream
  SigAction = 2,  // r0 = signum, r1 = handler; previous handler returned in r0
  Kill = 3,       // r0 = target thread, r1 = signum
  SigReturn = 4,
  Spawn = 5,      // r0 = entry, r1 = stack top; new thread id returned in r0
  Yield = 6,
};

inline constexpr int kSyscallCount = 7;

// Handler encoding used by SIGACTION in r1 and in its r0 result.
inline constexpr std::uint32_t kHandlerDefault = 0;
inline constexpr std::uint32_t kHandlerIgnore = 1;

std::string_view syscallName(Syscall s);
std::optional<Syscall> syscallByName(std::string_view name);

}  // namespace smc::vm
