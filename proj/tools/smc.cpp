// smc: assemble, run and benchmark guest programs.
//
// Exit codes of `run`: the guest's EXIT code (low 8 bits), 0 when every
// thread halted, 200 usage, 201 load error, 202 engine error or clone region
// exhausted, 203 instruction budget exceeded, 204 guest crash.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "smc/harness.hpp"
#include "smc/image.hpp"
#include "smc/vm.hpp"

namespace fs = std::filesystem;
using namespace smc;

namespace {

std::string readText(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read " + p.string());
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// Assembly sources (.s) are assembled on the fly; anything else is an image.
isa::Image loadProgram(const fs::path& p) {
  if (p.extension() == ".s") return isa::assemble(readText(p));
  return isa::readImageFile(p);
}

struct PolicyFlags {
  std::uint32_t cleanChecks = 4;
  std::uint32_t maxUnprotected = 1;
  bool faultingThreadOnly = true;
};

void addPolicyFlags(CLI::App* cmd, PolicyFlags& f) {
  cmd->add_option("--clean-checks", f.cleanChecks, "clean flush checks before re-protection (1..64)")
      ->check(CLI::Range(1u, guard::SmcPolicy::kMaxCleanChecks));
  cmd->add_option("--max-unprotected", f.maxUnprotected, "unprotected pages per thread")->check(CLI::PositiveNumber);
  cmd->add_option("--faulting-thread-only", f.faultingThreadOnly,
                  "compare only pages unprotected by the triggering thread (true/false)");
}

void addRunFlags(CLI::App* cmd, harness::RunConfig& c) {
  cmd->add_option("--page-size", c.pageSize, "guest page size (power of two)");
  cmd->add_option("--seed", c.seed, "scheduler seed; 0 = fixed quantum");
  cmd->add_option("--quantum", c.quantum, "scheduler quantum in guest instructions");
  cmd->add_option("--clone-factor", c.cloneFactor, "clone region size as a multiple of the image size");
  cmd->add_option("--budget", c.budget, "guest instruction budget");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Clone-based instrumentation of self-modifying guest programs"};
  app.require_subcommand(1);

  harness::RunConfig cfg;
  PolicyFlags pol;
  std::string program;
  std::string backend = "none";
  std::string statsPath;
  auto* run = app.add_subcommand("run", "run a program (.s source or SMCI image)");
  run->add_option("program", program, "program path")->required();
  run->add_flag("--instrument", cfg.instrumented, "run under the instrumentation engine");
  run->add_option("--backend", backend, "none | trace | memcheck-demo | checking");
  run->add_option("--stats", statsPath, "write run statistics as JSON here");
  addPolicyFlags(run, pol);
  addRunFlags(run, cfg);

  std::string asmIn;
  std::string asmOut;
  bool listing = false;
  auto* as = app.add_subcommand("asm", "assemble a source file into an SMCI image");
  as->add_option("source", asmIn, "assembly source")->required();
  as->add_option("-o,--out", asmOut, "output image (default: source with .smci)");
  as->add_flag("--list", listing, "print a disassembly of the result");

  std::string corpusDir;
  harness::RunConfig benchCfg;
  std::string benchJson;
  auto* bench = app.add_subcommand("bench", "run every program in a directory under the policy grid");
  bench->add_option("corpus", corpusDir, "directory of .s or .smci programs")->required();
  bench->add_option("--json", benchJson, "also write all rows as JSON here");
  addRunFlags(bench, benchCfg);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : harness::kExitUsage;
  }

  if (*run) {
    cfg.policy.cleanChecks = pol.cleanChecks;
    cfg.policy.maxUnprotectedPerThread = pol.maxUnprotected;
    cfg.policy.checkOnlyFaultingThread = pol.faultingThreadOnly;
    try {
      cfg.backend = harness::backendFromString(backend);
      cfg.validate();
    } catch (const std::exception& e) {
      std::cerr << "smc: " << e.what() << '\n';
      return harness::kExitUsage;
    }
    isa::Image image;
    try {
      image = loadProgram(program);
    } catch (const std::exception& e) {
      std::cerr << "smc: " << program << ": " << e.what() << '\n';
      return harness::kExitLoad;
    }
    harness::RunOutcome out;
    try {
      out = harness::runProgram(image, cfg);
    } catch (const vm::LoadError& e) {
      std::cerr << "smc: load: " << e.what() << '\n';
      return harness::kExitLoad;
    } catch (const std::exception& e) {
      std::cerr << "smc: " << e.what() << '\n';
      return harness::kExitEngine;
    }
    std::cout << out.output << std::flush;
    for (const auto& line : out.backendLog) std::cerr << line << '\n';
    for (const auto& v : out.violations) std::cerr << "violation: " << v << '\n';
    if (out.engineError) std::cerr << "smc: engine: " << *out.engineError << '\n';
    if (out.result.crash)
      std::cerr << "smc: thread " << out.result.crashThread << " crashed: " << vm::toString(out.result.crash->kind)
                << " at 0x" << std::hex << out.result.crash->addr << std::dec << '\n';
    if (out.result.status == vm::RunResult::Status::BudgetExceeded) std::cerr << "smc: instruction budget exceeded\n";
    if (!statsPath.empty()) {
      std::ofstream os(statsPath);
      if (!os) {
        std::cerr << "smc: cannot write " << statsPath << '\n';
        return harness::kExitUsage;
      }
      os << harness::statsJson(out, cfg).dump(2) << '\n';
    }
    return harness::exitCodeFor(out);
  }

  if (*as) {
    try {
      isa::Image image = isa::assemble(readText(asmIn));
      fs::path out = asmOut.empty() ? fs::path(asmIn).replace_extension(".smci") : fs::path(asmOut);
      isa::writeImageFile(out, image);
      if (listing) std::cout << isa::disassemble(image);
    } catch (const std::exception& e) {
      std::cerr << asmIn << ": " << e.what() << '\n';
      return 1;
    }
    return 0;
  }

  if (*bench) {
    try {
      benchCfg.validate();
    } catch (const std::exception& e) {
      std::cerr << "smc: " << e.what() << '\n';
      return harness::kExitUsage;
    }
    std::vector<fs::path> files;
    std::error_code ec;
    for (const auto& entry : fs::directory_iterator(corpusDir, ec)) {
      const auto ext = entry.path().extension();
      if (entry.is_regular_file() && (ext == ".s" || ext == ".smci")) files.push_back(entry.path());
    }
    if (ec) {
      std::cerr << "smc: " << corpusDir << ": " << ec.message() << '\n';
      return harness::kExitLoad;
    }
    std::sort(files.begin(), files.end());
    std::vector<harness::BenchProgram> programs;
    int failures = 0;
    for (const auto& f : files) {
      try {
        programs.push_back({f.stem().string(), loadProgram(f)});
      } catch (const std::exception& e) {
        std::cerr << "smc: " << f.string() << ": " << e.what() << '\n';
        ++failures;
      }
    }
    const auto rows = harness::runBench(programs, harness::defaultGrid(), benchCfg);
    std::cout << harness::formatBench(rows);
    nlohmann::json all = nlohmann::json::array();
    for (const auto& r : rows) {
      if (!r.matchesNative) ++failures;
      nlohmann::json j = harness::countersJson(r.stats);
      j["exitCode"] = r.exitCode;
      j["program"] = r.program;
      j["policy"] = r.policy;
      j["matchesNative"] = r.matchesNative;
      if (!r.error.empty()) j["error"] = r.error;
      all.push_back(std::move(j));
    }
    if (!benchJson.empty()) std::ofstream(benchJson) << all.dump(2) << '\n';
    return failures == 0 ? 0 : 1;
  }
  return harness::kExitUsage;
}
