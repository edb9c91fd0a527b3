#pragma once

// Runs guest programs natively or under the engine and collects what the
// command line tools and tests compare.

#include <array>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "smc/engine.hpp"
#include "smc/guard.hpp"
#include "smc/image.hpp"
#include "smc/scheduler.hpp"
#include "smc/stats.hpp"

namespace smc::harness {

enum class BackendKind : std::uint8_t { None, Trace, MemcheckDemo, Checking };

std::string_view toString(BackendKind k);
// Throws std::invalid_argument for unknown names.
BackendKind backendFromString(std::string_view name);

class InvalidConfig : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  bool instrumented = false;
  guard::SmcPolicy policy;
  BackendKind backend = BackendKind::None;
  std::uint32_t quantum = 20;
  std::uint64_t seed = 0;
  std::uint32_t pageSize = 256;
  std::uint32_t cloneFactor = 16;
  std::uint64_t budget = 50'000'000;

  static constexpr std::uint32_t kMinPageSize = 64;
  static constexpr std::uint32_t kMaxPageSize = 65536;
  static constexpr std::uint32_t kMaxQuantum = 1'000'000;
  static constexpr std::uint32_t kMaxCloneFactor = 256;

  // Throws InvalidConfig (or guard::InvalidPolicy).
  void validate() const;
};

struct ThreadState {
  int id = 0;
  std::array<std::uint32_t, isa::kRegisterCount> regs{};
  std::uint32_t sp = 0;
  bool alive = false;

  bool operator==(const ThreadState&) const = default;
};

struct RunOutcome {
  vm::RunResult result;
  std::string output;
  RunStats stats;
  std::vector<ThreadState> threads;
  // Image bytes at the end of the run.
  std::vector<std::uint8_t> imageAfter;
  // FNV-1a over every mapped page outside the clone region.
  std::uint64_t guestMemoryHash = 0;
  std::uint64_t fetchesOutsideHost = 0;
  std::uint64_t writeFaults = 0;
  std::optional<std::string> engineError;
  bool cloneExhausted = false;
  std::vector<std::string> backendLog;
  std::vector<std::string> violations;
  std::vector<std::uint32_t> signalPcs;
  std::vector<std::uint32_t> sigactionResults;
};

RunOutcome runProgram(const isa::Image& image, const RunConfig& config);

// Process exit codes of `run`.
inline constexpr int kExitUsage = 200;
inline constexpr int kExitLoad = 201;
inline constexpr int kExitEngine = 202;
inline constexpr int kExitBudget = 203;
inline constexpr int kExitCrash = 204;

int exitCodeFor(const RunOutcome& outcome);

// Output, termination, exit code and final registers of every thread.
bool sameGuestState(const RunOutcome& a, const RunOutcome& b, std::string* why = nullptr);

// Flat object: RunStats fields, schemaVersion, run result and config echo.
nlohmann::json countersJson(const RunStats& stats);
nlohmann::json statsJson(const RunOutcome& outcome, const RunConfig& config);
nlohmann::json configJson(const RunConfig& config);

struct BenchPolicy {
  std::string name;
  guard::SmcPolicy policy;
};

// default, all-threads (checkOnlyFaultingThread off) and the N sweep.
std::vector<BenchPolicy> defaultGrid();

struct BenchProgram {
  std::string name;
  isa::Image image;
};

struct BenchRow {
  std::string program;
  std::string policy;
  RunStats stats;
  int exitCode = 0;
  bool matchesNative = false;
  std::string error;
};

// One row per (program, policy). Each row is checked against a native run of
// the same program; failures are recorded and the sweep continues.
std::vector<BenchRow> runBench(const std::vector<BenchProgram>& programs, const std::vector<BenchPolicy>& grid,
                               const RunConfig& base);

std::string formatBench(const std::vector<BenchRow>& rows);

}  // namespace smc::harness
