#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "shapereg/data.hpp"

using namespace shapereg;
using Catch::Approx;

namespace {

namespace fs = std::filesystem;

SyntheticConfig tiny_config() {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  cfg.landmarks_per_structure = 8;
  cfg.n_train = 4;
  cfg.n_test = 2;
  return cfg;
}

struct TempDir {
  fs::path path;
  explicit TempDir(const char* name) {
    path = fs::temp_directory_path() / name;
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("generation is bit-deterministic in (config, seed)", "[data]") {
  auto cfg = tiny_config();
  Dataset a = generate_synthetic(cfg, 42);
  Dataset b = generate_synthetic(cfg, 42);
  CHECK(a == b);
  Dataset c = generate_synthetic(cfg, 43);
  CHECK_FALSE(a == c);
}

TEST_CASE("generated samples respect the configured layout", "[data]") {
  auto cfg = tiny_config();
  Dataset ds = generate_synthetic(cfg, 7);
  REQUIRE(ds.samples.size() == 6);
  CHECK(ds.manifest.structures.size() == 3);
  for (const auto& sample : ds.samples) {
    REQUIRE(sample.landmarks.slices.size() == 3);
    for (const auto& slice : sample.landmarks.slices)
      CHECK(slice.end - slice.begin == cfg.landmarks_per_structure);
    for (const auto& p : sample.landmarks.points) {
      CHECK(p.x >= 0.0);
      CHECK(p.x < cfg.image_size);
      CHECK(p.y >= 0.0);
      CHECK(p.y < cfg.image_size);
    }
    CHECK(sample.image.size == cfg.image_size);
    for (double v : sample.image.pix) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
      CHECK(v == Approx(std::round(v * 255) / 255).margin(1e-12));
    }
  }
}

TEST_CASE("noiseless bright regions agree with rasterized landmarks",
          "[data]") {
  auto cfg = tiny_config();
  cfg.image_size = 64;
  cfg.landmarks_per_structure = 16;
  cfg.noise_sigma = 0.0;
  cfg.n_train = 3;
  cfg.n_test = 0;
  Dataset ds = generate_synthetic(cfg, 11);
  for (const auto& sample : ds.samples) {
    auto gt = rasterize(sample.landmarks, cfg.image_size);
    // background never exceeds 0.34; structures start at contrast_min above it
    for (size_t s = 0; s < gt.size(); ++s) {
      Mask bright;
      bright.size = cfg.image_size;
      bright.bits.assign(sample.image.pix.size(), 0);
      // isolate this structure's intensity: brightest pixel inside its mask
      double level = 0;
      for (size_t i = 0; i < gt[s].bits.size(); ++i)
        if (gt[s].bits[i]) level = std::max(level, sample.image.pix[i]);
      for (size_t i = 0; i < bright.bits.size(); ++i)
        bright.bits[i] = std::abs(sample.image.pix[i] - level) < 1e-9 ? 1 : 0;
      CHECK(dice(bright, gt[s]) > 0.95);
    }
  }
}

TEST_CASE("dataset round-trips through disk exactly", "[data]") {
  TempDir dir("shapereg_data_roundtrip");
  Dataset ds = generate_synthetic(tiny_config(), 13);
  save_dataset(ds, dir.path.string());
  Dataset back = load_dataset(dir.path.string());
  CHECK(ds == back);
}

TEST_CASE("truncated image files are rejected by name", "[data]") {
  TempDir dir("shapereg_data_trunc");
  Dataset ds = generate_synthetic(tiny_config(), 17);
  save_dataset(ds, dir.path.string());
  auto img = dir.path / "images" / "0002.pgm";
  fs::resize_file(img, fs::file_size(img) - 64);
  try {
    load_dataset(dir.path.string());
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    CHECK(std::string(e.what()).find("0002.pgm") != std::string::npos);
  }
}

TEST_CASE("manifest/sample count mismatch is rejected", "[data]") {
  TempDir dir("shapereg_data_mismatch");
  Dataset ds = generate_synthetic(tiny_config(), 19);
  save_dataset(ds, dir.path.string());
  fs::remove(dir.path / "images" / "0005.pgm");
  CHECK_THROWS_AS(load_dataset(dir.path.string()), std::runtime_error);
}

TEST_CASE("malformed landmark files report file and line", "[data]") {
  TempDir dir("shapereg_data_csv");
  Dataset ds = generate_synthetic(tiny_config(), 23);
  save_dataset(ds, dir.path.string());
  auto csv = dir.path / "landmarks" / "0001.csv";
  std::ofstream os(csv, std::ios::app);
  os << "lung_left,99,bad,row\n";
  os.close();
  try {
    load_dataset(dir.path.string());
    FAIL("expected an exception");
  } catch (const std::runtime_error& e) {
    std::string msg = e.what();
    CHECK(msg.find("0001.csv") != std::string::npos);
    CHECK(msg.find(":26") != std::string::npos);  // header + 24 rows + 1
  }
}

TEST_CASE("corrupt_mask endpoints", "[data]") {
  Dataset ds = generate_synthetic(tiny_config(), 29);
  const Image& img = ds.samples[0].image;

  Rng rng(1);
  Image same = corrupt_mask(img, 0.0, rng);
  CHECK(same.pix == img.pix);

  Image gone = corrupt_mask(img, 1.0, rng);
  for (double v : gone.pix) CHECK(v == 0.0);

  CHECK_THROWS_AS(corrupt_mask(img, 1.5, rng), std::invalid_argument);
}

TEST_CASE("corrupt_mask zeroes exactly the square", "[data]") {
  Image img;
  img.size = 256;
  img.pix.assign(256 * 256, 1.0);
  Rng rng(31);
  Image out = corrupt_mask(img, 0.5, rng);
  long long zeros = 0;
  for (double v : out.pix) zeros += v == 0.0;
  CHECK(zeros == 128 * 128);

  // changed pixels must form one axis-aligned square; everything else intact
  int min_x = 256, max_x = -1, min_y = 256, max_y = -1;
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x)
      if (out.pix[static_cast<size_t>(y) * 256 + x] !=
          img.pix[static_cast<size_t>(y) * 256 + x]) {
        min_x = std::min(min_x, x);
        max_x = std::max(max_x, x);
        min_y = std::min(min_y, y);
        max_y = std::max(max_y, y);
      }
  CHECK(max_x - min_x + 1 == 128);
  CHECK(max_y - min_y + 1 == 128);
  for (int y = min_y; y <= max_y; ++y)
    for (int x = min_x; x <= max_x; ++x)
      CHECK(out.pix[static_cast<size_t>(y) * 256 + x] == 0.0);
}
