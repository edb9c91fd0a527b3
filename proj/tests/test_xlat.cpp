#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <random>
#include <sstream>

#include "smc/xlat.hpp"
#include "support.hpp"

using namespace smc::xlat;

namespace {

std::vector<std::uint8_t> readHex(const std::string& text) {
  std::vector<std::uint8_t> out;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (auto c = line.find('#'); c != std::string::npos) line.resize(c);
    std::istringstream words(line);
    std::string w;
    while (words >> w) out.push_back(static_cast<std::uint8_t>(std::stoul(w, nullptr, 16)));
  }
  return out;
}

// Clone region backed by a plain buffer.
class Buffer final : public ByteReader {
 public:
  Buffer(std::uint32_t base, std::uint32_t size) : base_(base), bytes_(size, 0) {}
  bool read(std::uint32_t addr, std::span<std::uint8_t> out) const override {
    if (addr < base_ || addr + out.size() > base_ + bytes_.size()) return false;
    std::copy_n(bytes_.begin() + (addr - base_), out.size(), out.begin());
    return true;
  }
  void write(std::uint32_t addr, const std::vector<std::uint8_t>& b) {
    std::copy(b.begin(), b.end(), bytes_.begin() + (addr - base_));
  }
  std::uint32_t base() const { return base_; }
  std::uint32_t end() const { return base_ + static_cast<std::uint32_t>(bytes_.size()); }

 private:
  std::uint32_t base_;
  std::vector<std::uint8_t> bytes_;
};

std::uint32_t pickDelta(std::mt19937& rng) {
  static constexpr std::uint32_t kEdges[] = {1, 2, 5, 6, 253, 254, 255, 256, 257, 511, 512, 65535, 65536, 0x01000000};
  if (rng() % 3 == 0) return kEdges[rng() % std::size(kEdges)];
  return 1 + rng() % 300;
}

Layout randomLayout(std::mt19937& rng, std::uint32_t origBase, std::uint32_t cloneBase, std::size_t n) {
  Layout l;
  LayoutEntry e{origBase, cloneBase};
  for (std::size_t i = 0; i < n; ++i) {
    l.push_back(e);
    e.orig += pickDelta(rng);
    e.clone += pickDelta(rng);
  }
  return l;
}

struct Block {
  Layout layout;
  std::uint32_t tableAddr;
  std::uint32_t lastLength;
};

// Lays out blocks back to back: [code zeros][table], like the engine does.
// Instruction lengths on the original side are taken from the deltas and the
// last instruction gets a random length 1..6.
std::vector<Block> buildClone(std::mt19937& rng, Buffer& buf, XlatMap& map, int blocks) {
  std::vector<Block> out;
  std::uint32_t orig = 0x1000;
  std::uint32_t cursor = buf.base();
  for (int b = 0; b < blocks; ++b) {
    const std::size_t n = 1 + rng() % 12;
    Layout l;
    LayoutEntry e{orig, cursor};
    for (std::size_t i = 0; i < n; ++i) {
      l.push_back(e);
      e.orig += 1 + rng() % 6;
      e.clone += 1 + rng() % 20;
    }
    const std::uint32_t lastLen = 1 + rng() % 6;
    const std::uint32_t codeEnd = l.back().clone + 1 + rng() % 20;
    const std::uint32_t tableAddr = (codeEnd + 3u) & ~3u;
    const auto table = emitTable(l);
    buf.write(tableAddr, table);
    const std::uint32_t origStop = l.back().orig + lastLen;
    const OrigRange range{l.front().orig, origStop};
    map.registerRanges(std::span<const OrigRange>(&range, 1), tableAddr);
    out.push_back({l, tableAddr, lastLen});
    cursor = tableAddr + static_cast<std::uint32_t>(table.size());
    orig = origStop + static_cast<std::uint32_t>(rng() % 3) * 7;  // sometimes a gap
  }
  return out;
}

}  // namespace

TEST_CASE("table: single instruction is header only") {
  const LayoutEntry one{0x1000, 0x5000};
  auto bytes = emitTable(std::span<const LayoutEntry>(&one, 1));
  CHECK(bytes.size() == kHeaderSize);
  CHECK(std::equal(kMarker.begin(), kMarker.end(), bytes.begin()));
  CHECK(decodeTable(bytes) == Layout{one});
}

TEST_CASE("table: plain six-byte steps") {
  Layout l{{0x1000, 0x5000}, {0x1006, 0x5006}};
  auto bytes = emitTable(l);
  REQUIRE(bytes.size() == kHeaderSize + 2);
  CHECK(bytes[16] == 0x06);
  CHECK(bytes[17] == 0x06);
}

TEST_CASE("table: golden bytes with an escaped 512 delta") {
  Layout l{{0x1000, 0x5000}, {0x1006, 0x5006}, {0x1206, 0x500C}};
  const auto golden = readHex(smc::test::readFile(std::filesystem::path(SMC_TEST_DIR) / "golden/table_two_pairs.hex"));
  CHECK(emitTable(l) == golden);
  CHECK(decodeTable(golden) == l);
  CHECK(tableSize(l) == golden.size());
}

TEST_CASE("table: escape boundary at 255 and 256 on each side") {
  for (std::uint32_t d : {254u, 255u, 256u}) {
    Layout a{{0x1000, 0x5000}, {0x1000 + d, 0x5001}};
    Layout b{{0x1000, 0x5000}, {0x1001, 0x5000 + d}};
    CHECK(decodeTable(emitTable(a)) == a);
    CHECK(decodeTable(emitTable(b)) == b);
    const auto bytes = emitTable(a);
    CHECK(bytes.size() == kHeaderSize + (d <= kMaxPlainDelta ? 2 : 6));
  }
}

TEST_CASE("table: rejects non-monotonic layouts and malformed bytes") {
  Layout empty;
  CHECK_THROWS_AS(emitTable(empty), NonMonotonicLayout);
  Layout same{{0x1000, 0x5000}, {0x1000, 0x5004}};
  CHECK_THROWS_AS(emitTable(same), NonMonotonicLayout);
  Layout back{{0x1000, 0x5000}, {0x1004, 0x4FF0}};
  CHECK_THROWS_AS(emitTable(back), NonMonotonicLayout);

  Layout ok{{0x1000, 0x5000}, {0x1006, 0x5006}};
  auto bytes = emitTable(ok);
  auto truncated = std::vector<std::uint8_t>(bytes.begin(), bytes.end() - 1);
  CHECK_THROWS_AS(decodeTable(truncated), TableFormatError);
  bytes[0] = 0;
  CHECK_THROWS_AS(decodeTable(bytes), TableFormatError);
}

TEST_CASE("table: 10000 random layouts roundtrip") {
  std::mt19937 rng(2024);
  int sawEscape = 0;
  for (int i = 0; i < 10000; ++i) {
    const Layout l = randomLayout(rng, static_cast<std::uint32_t>(rng() % 0x100000), 0x40000000 + rng() % 0x1000,
                                  1 + rng() % 40);
    const auto bytes = emitTable(l);
    REQUIRE(bytes.size() == tableSize(l));
    REQUIRE(decodeTable(bytes) == l);
    if (bytes.size() > kHeaderSize + 2 * (l.size() - 1)) ++sawEscape;
  }
  CHECK(sawEscape > 1000);
}

TEST_CASE("map: origToClone and cloneToOrig are inverse on every instruction start") {
  std::mt19937 rng(99);
  for (int round = 0; round < 50; ++round) {
    Buffer buf(0x40000000, 0x8000);
    XlatMap map(buf, buf.base(), buf.end());
    const auto blocks = buildClone(rng, buf, map, 1 + static_cast<int>(rng() % 20));
    for (const auto& b : blocks) {
      for (const auto& e : b.layout) {
        REQUIRE(map.origToClone(e.orig) == e.clone);
        auto back = map.cloneToOrig(e.clone);
        REQUIRE(back);
        REQUIRE(back.orig == e.orig);
        REQUIRE(back.tableAddr == b.tableAddr);
      }
    }
  }
}

TEST_CASE("map: misses, non-starts and instruction containment") {
  Buffer buf(0x40000000, 0x1000);
  XlatMap map(buf, buf.base(), buf.end());
  Layout l{{0x1000, 0x40000000}, {0x1006, 0x40000010}, {0x1009, 0x40000020}};
  buf.write(0x40000030, emitTable(l));
  const OrigRange r{0x1000, 0x100F};
  map.registerRanges(std::span<const OrigRange>(&r, 1), 0x40000030);

  CHECK(map.origToClone(0x1000) == 0x40000000u);
  CHECK_FALSE(map.origToClone(0x1002));
  CHECK_FALSE(map.origToClone(0x2000));
  CHECK(map.cloneToOrig(0x40000000).orig == 0x1000);
  CHECK(map.cloneToOrig(0x40000020).orig == 0x1009);
  CHECK(map.cloneToOrig(0x40000004).error == CloneLookup::Error::NotAnInstructionStart);
  CHECK(map.cloneToOrig(0x40000100).error == CloneLookup::Error::NotInClone);
  CHECK(map.cloneToOrig(0x3000).error == CloneLookup::Error::NotInClone);

  CHECK(map.instructionStartContaining(0x1002) == 0x1000u);
  CHECK(map.instructionStartContaining(0x1006) == 0x1006u);
  CHECK(map.instructionStartContaining(0x100E) == 0x1009u);
  CHECK_FALSE(map.instructionStartContaining(0x100F));
  CHECK_FALSE(map.instructionStartContaining(0x0FFF));
}

TEST_CASE("map: overlapping registration is rejected and retire splits ranges") {
  Buffer buf(0x40000000, 0x1000);
  XlatMap map(buf, buf.base(), buf.end());
  Layout l{{0x1000, 0x40000000}, {0x1004, 0x40000004}, {0x1008, 0x40000008}};
  buf.write(0x40000010, emitTable(l));
  const OrigRange r{0x1000, 0x100C};
  map.registerRanges(std::span<const OrigRange>(&r, 1), 0x40000010);
  const OrigRange clash{0x100B, 0x1010};
  CHECK_THROWS_AS(map.registerRanges(std::span<const OrigRange>(&clash, 1), 0x40000010), OverlappingRange);
  CHECK(map.registrations().size() == 1);

  REQUIRE(map.origToClone(0x1004) == 0x40000004u);
  map.retire({0x1004, 0x1008});
  CHECK_FALSE(map.origToClone(0x1004));
  CHECK(map.origToClone(0x1000) == 0x40000000u);
  CHECK(map.origToClone(0x1008) == 0x40000008u);
  CHECK(map.registrations().size() == 2);
  CHECK_FALSE(map.overlaps({0x1004, 0x1008}));
}

TEST_CASE("map: cache-on answers equal cache-off answers for random queries") {
  std::mt19937 rng(5);
  for (int round = 0; round < 20; ++round) {
    Buffer buf(0x40000000, 0x8000);
    XlatMap cached(buf, buf.base(), buf.end(), 16);
    XlatMap plain(buf, buf.base(), buf.end(), 16);
    plain.setCacheEnabled(false);
    const auto blocks = buildClone(rng, buf, cached, 10);
    for (const auto& [range, table] : cached.registrations())
      plain.registerRanges(std::span<const OrigRange>(&range, 1), table);

    std::vector<std::uint32_t> starts;
    for (const auto& b : blocks)
      for (const auto& e : b.layout) starts.push_back(e.orig);
    for (int q = 0; q < 5000; ++q) {
      std::uint32_t addr = rng() % 2 == 0 ? starts[rng() % starts.size()] : 0x1000 + rng() % 0x400;
      REQUIRE(cached.origToClone(addr) == plain.origToClone(addr));
      if (q % 997 == 0) {
        const std::uint32_t s = starts[rng() % starts.size()];
        cached.retire({s, s + 1});
        plain.retire({s, s + 1});
      }
    }
    CHECK(cached.cacheHits() > 0);
    CHECK(plain.cacheHits() == 0);
  }
}
