#pragma once

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>

#include "smc/image.hpp"

namespace smc::test {

inline std::filesystem::path corpusDir() { return SMC_CORPUS_DIR; }

inline std::string readFile(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream os;
  os << in.rdbuf();
  return os.str();
}

// name is relative to the corpus directory, without the .s suffix.
inline isa::Image corpus(const std::string& name) { return isa::assemble(readFile(corpusDir() / (name + ".s"))); }

inline std::string expectedOutput(const std::string& name) {
  return readFile(corpusDir() / (name + ".expected"));
}

}  // namespace smc::test
