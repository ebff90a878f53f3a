#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "shapereg/serialize.hpp"

using namespace shapereg;

namespace {
std::string temp_path(const char* name) {
  return (std::filesystem::temp_directory_path() / name).string();
}
}  // namespace

TEST_CASE("weight container round trip", "[serialize]") {
  Rng rng(41);
  NamedTensors entries;
  entries.emplace_back("enc.s1c1.w", Tensor::randn({4, 1, 3, 3}, rng));
  entries.emplace_back("enc.s1c1.b", Tensor::zeros({4}));
  entries.emplace_back("meta.seed", Tensor::scalar(12345));
  entries.emplace_back("head.l1.w", Tensor::randn({8, 16}, rng));

  const std::string path = temp_path("srtw_roundtrip.bin");
  save_tensors(path, entries);
  auto loaded = load_tensors(path);

  REQUIRE(loaded.size() == entries.size());
  for (size_t i = 0; i < entries.size(); ++i) {
    CHECK(loaded[i].first == entries[i].first);
    CHECK(loaded[i].second.shape() == entries[i].second.shape());
    CHECK(loaded[i].second.values() == entries[i].second.values());
  }
  std::filesystem::remove(path);
}

TEST_CASE("container header is the documented layout", "[serialize]") {
  const std::string path = temp_path("srtw_header.bin");
  save_tensors(path, {{"x", Tensor::from({2}, {1.0, 2.0})}});
  std::ifstream is(path, std::ios::binary);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(is)),
                                   std::istreambuf_iterator<char>());
  REQUIRE(bytes.size() == 4 + 4 + 4 + 2 + 1 + 1 + 4 + 16);
  CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "SRTW");
  CHECK(bytes[4] == 1);   // version u32 LE
  CHECK(bytes[8] == 1);   // entry count
  CHECK(bytes[12] == 1);  // name length u16 LE
  CHECK(bytes[14] == 'x');
  CHECK(bytes[15] == 1);  // rank
  CHECK(bytes[16] == 2);  // dim u32 LE
  std::filesystem::remove(path);
}

TEST_CASE("truncated container is rejected with the offset", "[serialize]") {
  const std::string path = temp_path("srtw_trunc.bin");
  save_tensors(path, {{"weights", Tensor::from({4}, {1, 2, 3, 4})}});
  auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full - 9);
  try {
    load_tensors(path);
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find(path) != std::string::npos);
    CHECK(msg.find("offset") != std::string::npos);
  }
  std::filesystem::remove(path);
}

TEST_CASE("bad magic is rejected", "[serialize]") {
  const std::string path = temp_path("srtw_magic.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "NOPE then some bytes";
  }
  CHECK_THROWS_AS(load_tensors(path), std::runtime_error);
  std::filesystem::remove(path);
}
