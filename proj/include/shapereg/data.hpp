#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapereg/common.hpp"
#include "shapereg/geometry.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

[[noreturn]] inline void io_fail(const std::string& msg) {
  throw std::runtime_error(msg);
}

// Grayscale image, values in [0,1] quantized to multiples of 1/255 so the
// on-disk 8-bit form round-trips exactly.
struct Image {
  int size = 0;
  std::vector<double> pix;

  double at(int x, int y) const { return pix[static_cast<size_t>(y) * size + x]; }
};

inline Tensor image_tensor(const Image& img) {
  return Tensor::from({1, img.size, img.size}, img.pix);
}

struct Sample {
  Image image;
  Shape landmarks;
};

struct DatasetManifest {
  int n_samples = 0;
  int image_size = 0;
  double spacing_mm = 1.0;
  std::vector<std::pair<std::string, int>> structures;  // name, landmark count
  std::vector<int> train;
  std::vector<int> test;
  uint64_t seed = 0;
};

struct Dataset {
  DatasetManifest manifest;
  std::vector<Sample> samples;

  std::vector<Shape> train_shapes() const {
    std::vector<Shape> out;
    out.reserve(manifest.train.size());
    for (int i : manifest.train)
      out.push_back(samples[static_cast<size_t>(i)].landmarks);
    return out;
  }
};

inline bool operator==(const Image& a, const Image& b) {
  return a.size == b.size && a.pix == b.pix;
}

inline bool operator==(const Shape& a, const Shape& b) {
  if (a.spacing_mm != b.spacing_mm || a.points.size() != b.points.size() ||
      a.slices.size() != b.slices.size())
    return false;
  for (size_t i = 0; i < a.points.size(); ++i)
    if (a.points[i].x != b.points[i].x || a.points[i].y != b.points[i].y)
      return false;
  for (size_t i = 0; i < a.slices.size(); ++i)
    if (a.slices[i].name != b.slices[i].name ||
        a.slices[i].begin != b.slices[i].begin ||
        a.slices[i].end != b.slices[i].end)
      return false;
  return true;
}

inline bool operator==(const Dataset& a, const Dataset& b) {
  const auto& ma = a.manifest;
  const auto& mb = b.manifest;
  if (ma.n_samples != mb.n_samples || ma.image_size != mb.image_size ||
      ma.spacing_mm != mb.spacing_mm || ma.structures != mb.structures ||
      ma.train != mb.train || ma.test != mb.test || ma.seed != mb.seed)
    return false;
  if (a.samples.size() != b.samples.size()) return false;
  for (size_t i = 0; i < a.samples.size(); ++i)
    if (!(a.samples[i].image == b.samples[i].image) ||
        !(a.samples[i].landmarks == b.samples[i].landmarks))
      return false;
  return true;
}

// ---------------------------------------------------------------------------
// Synthetic data: smooth star-shaped blobs from low-order Fourier radius
// functions, rendered as constant-intensity regions over a linear background
// ramp plus Gaussian noise. Landmarks sit at equal arc-length parameters, so
// landmark i has the same meaning across samples.

struct SyntheticConfig {
  int n_structures = 3;
  int landmarks_per_structure = 16;
  int n_harmonics = 4;
  double amplitude = 0.13;        // first-harmonic std, relative to base radius
  double amplitude_decay = 0.55;  // per-order decay of harmonic std
  double contrast_min = 0.35;     // structure brightness over the background
  double contrast_max = 0.65;
  double noise_sigma = 0.02;
  int image_size = 64;
  int n_train = 160;
  int n_test = 40;
  double spacing_mm = 2.8;  // chest-scale physical size at 64 px

  void validate() const {
    require(n_structures >= 1, "SyntheticConfig: need at least one structure");
    require(landmarks_per_structure >= 3,
            "SyntheticConfig: need at least 3 landmarks per structure");
    require(n_harmonics >= 0 && amplitude >= 0 && amplitude_decay > 0,
            "SyntheticConfig: invalid harmonic settings");
    require(contrast_min > 0 && contrast_max >= contrast_min,
            "SyntheticConfig: invalid contrast range");
    require(noise_sigma >= 0, "SyntheticConfig: noise_sigma must be >= 0");
    require(image_size >= 16 && image_size % 8 == 0,
            "SyntheticConfig: image_size must be >= 16 and divisible by 8");
    require(n_train >= 1 && n_test >= 0, "SyntheticConfig: invalid split sizes");
    require(spacing_mm > 0, "SyntheticConfig: spacing_mm must be positive");
  }
};

namespace detail {

struct BlobLayout {
  std::vector<Vec2> centers;  // fractions of image size
  std::vector<double> radii;  // fractions of image size
};

// Base positions and radii are budgeted so that even worst-case draws
// (max jitter, max scale, max harmonic excursion) keep blobs disjoint and
// inside the frame; the rejection loop then only has to catch rare cases.
inline BlobLayout blob_layout(int n) {
  BlobLayout l;
  if (n == 1) {
    l.centers = {{0.5, 0.5}};
    l.radii = {0.18};
  } else if (n == 2) {
    l.centers = {{0.28, 0.5}, {0.72, 0.5}};
    l.radii = {0.11, 0.11};
  } else if (n == 3) {
    // two lung-like blobs over a heart-like one
    l.centers = {{0.28, 0.40}, {0.72, 0.40}, {0.50, 0.74}};
    l.radii = {0.11, 0.11, 0.088};
  } else {
    double ring = 0.30;
    double r = std::clamp(0.2 * std::sin(3.14159265358979 / n) - 0.03, 0.03, 0.10);
    for (int i = 0; i < n; ++i) {
      double a = 2.0 * 3.14159265358979 * i / n;
      l.centers.push_back({0.5 + ring * std::cos(a), 0.5 + ring * std::sin(a)});
      l.radii.push_back(r);
    }
  }
  return l;
}

struct BlobContour {
  std::vector<Vec2> fine;       // dense polyline used for rendering
  std::vector<Vec2> landmarks;  // equal arc-length samples
  Vec2 center;
  double max_r = 0;
};

// One smooth star-shaped contour r(theta) around a jittered center. Radius
// positivity makes the curve simple; margin and size checks are enforced by
// the caller through the returned extremes.
inline BlobContour make_blob(Vec2 center, double base_r, int n_landmarks,
                             const SyntheticConfig& cfg, Rng& rng) {
  const int kFine = 1024;
  BlobContour blob;
  blob.center = center;
  std::vector<double> ca(static_cast<size_t>(cfg.n_harmonics));
  std::vector<double> cb(static_cast<size_t>(cfg.n_harmonics));
  double scale = rng.uniform(0.85, 1.15);
  for (int h = 0; h < cfg.n_harmonics; ++h) {
    double sd = cfg.amplitude * std::pow(cfg.amplitude_decay, h);
    ca[static_cast<size_t>(h)] = rng.normal(0.0, sd);
    cb[static_cast<size_t>(h)] = rng.normal(0.0, sd);
  }
  const double r0 = base_r * scale;
  auto radius = [&](double theta) {
    double m = 1.0;
    for (int h = 0; h < cfg.n_harmonics; ++h)
      m += ca[static_cast<size_t>(h)] * std::cos((h + 1) * theta) +
           cb[static_cast<size_t>(h)] * std::sin((h + 1) * theta);
    return r0 * m;
  };
  blob.fine.resize(kFine);
  double min_r = 1e300;
  for (int i = 0; i < kFine; ++i) {
    double theta = 2.0 * 3.14159265358979 * i / kFine;
    double r = radius(theta);
    min_r = std::min(min_r, r);
    blob.max_r = std::max(blob.max_r, r);
    blob.fine[static_cast<size_t>(i)] = {center.x + r * std::cos(theta),
                                         center.y + r * std::sin(theta)};
  }
  if (min_r < 0.4 * r0 || blob.max_r > 1.3 * r0) {
    blob.fine.clear();  // too wild, caller resamples
    return blob;
  }
  // equal arc-length landmark placement along the fine polyline
  std::vector<double> cum(static_cast<size_t>(kFine) + 1, 0.0);
  for (int i = 0; i < kFine; ++i)
    cum[static_cast<size_t>(i) + 1] =
        cum[static_cast<size_t>(i)] +
        norm(blob.fine[static_cast<size_t>((i + 1) % kFine)] -
             blob.fine[static_cast<size_t>(i)]);
  double perimeter = cum.back();
  blob.landmarks.resize(static_cast<size_t>(n_landmarks));
  size_t seg = 0;
  for (int m = 0; m < n_landmarks; ++m) {
    double s = perimeter * m / n_landmarks;
    while (seg + 1 < cum.size() - 1 && cum[seg + 1] <= s) ++seg;
    double t = (s - cum[seg]) / std::max(1e-12, cum[seg + 1] - cum[seg]);
    Vec2 a = blob.fine[seg];
    Vec2 b = blob.fine[(seg + 1) % kFine];
    blob.landmarks[static_cast<size_t>(m)] = a + t * (b - a);
  }
  return blob;
}

}  // namespace detail

inline std::vector<std::string> synthetic_structure_names(int n) {
  if (n == 3) return {"lung_left", "lung_right", "heart"};
  std::vector<std::string> names;
  for (int i = 0; i < n; ++i) {
    std::ostringstream os;
    os << "structure_" << i;
    names.push_back(os.str());
  }
  return names;
}

inline Sample generate_sample(const SyntheticConfig& cfg, uint64_t seed,
                              int index) {
  cfg.validate();
  Rng rng(Rng::mix(seed, static_cast<uint64_t>(index)));
  const int size = cfg.image_size;
  const auto layout = detail::blob_layout(cfg.n_structures);
  const auto names = synthetic_structure_names(cfg.n_structures);
  const double jitter_sd = 0.03 * size;
  const double jitter_max = 0.045 * size;

  std::vector<detail::BlobContour> blobs(static_cast<size_t>(cfg.n_structures));
  for (int s = 0; s < cfg.n_structures; ++s) {
    bool ok = false;
    for (int attempt = 0; attempt < 100 && !ok; ++attempt) {
      double jx = std::clamp(rng.normal(0.0, jitter_sd), -jitter_max, jitter_max);
      double jy = std::clamp(rng.normal(0.0, jitter_sd), -jitter_max, jitter_max);
      Vec2 center = {layout.centers[static_cast<size_t>(s)].x * size + jx,
                     layout.centers[static_cast<size_t>(s)].y * size + jy};
      auto blob = detail::make_blob(center, layout.radii[static_cast<size_t>(s)] * size,
                                    cfg.landmarks_per_structure, cfg, rng);
      if (blob.fine.empty()) continue;
      if (center.x - blob.max_r < 2.0 || center.x + blob.max_r > size - 3.0 ||
          center.y - blob.max_r < 2.0 || center.y + blob.max_r > size - 3.0)
        continue;
      bool overlap = false;
      for (int t = 0; t < s; ++t) {
        const auto& other = blobs[static_cast<size_t>(t)];
        if (norm(center - other.center) < blob.max_r + other.max_r + 1.0)
          overlap = true;
      }
      if (overlap) continue;
      blobs[static_cast<size_t>(s)] = std::move(blob);
      ok = true;
    }
    if (!ok)
      io_fail("generate_synthetic: structure '" + names[static_cast<size_t>(s)] +
              "' failed validity checks after 100 resamples (sample " +
              std::to_string(index) + ")");
  }

  // landmarks, in structure order
  Sample sample;
  sample.landmarks.spacing_mm = cfg.spacing_mm;
  for (int s = 0; s < cfg.n_structures; ++s) {
    StructureSlice slice;
    slice.name = names[static_cast<size_t>(s)];
    slice.begin = static_cast<int>(sample.landmarks.points.size());
    for (const auto& p : blobs[static_cast<size_t>(s)].landmarks)
      sample.landmarks.points.push_back(p);
    slice.end = static_cast<int>(sample.landmarks.points.size());
    sample.landmarks.slices.push_back(slice);
  }
  sample.landmarks.validate();

  // render: background ramp, constant-intensity structures, noise, quantize
  double b0 = rng.uniform(0.08, 0.18);
  double gx = rng.uniform(-0.08, 0.08);
  double gy = rng.uniform(-0.08, 0.08);
  std::vector<double> intensity(static_cast<size_t>(cfg.n_structures));
  for (auto& in : intensity)
    in = b0 + rng.uniform(cfg.contrast_min, cfg.contrast_max);

  sample.image.size = size;
  sample.image.pix.resize(static_cast<size_t>(size) * size);
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x)
      sample.image.pix[static_cast<size_t>(y) * size + x] =
          b0 + gx * (x / static_cast<double>(size)) +
          gy * (y / static_cast<double>(size));
  for (int s = 0; s < cfg.n_structures; ++s) {
    Mask m = rasterize_contour(blobs[static_cast<size_t>(s)].fine, size);
    for (size_t i = 0; i < m.bits.size(); ++i)
      if (m.bits[i]) sample.image.pix[i] = intensity[static_cast<size_t>(s)];
  }
  for (auto& v : sample.image.pix) {
    if (cfg.noise_sigma > 0) v += rng.normal(0.0, cfg.noise_sigma);
    v = std::clamp(v, 0.0, 1.0);
    v = std::round(v * 255.0) / 255.0;
  }
  return sample;
}

inline Dataset generate_synthetic(const SyntheticConfig& cfg, uint64_t seed) {
  cfg.validate();
  Dataset ds;
  ds.manifest.n_samples = cfg.n_train + cfg.n_test;
  ds.manifest.image_size = cfg.image_size;
  ds.manifest.spacing_mm = cfg.spacing_mm;
  ds.manifest.seed = seed;
  for (const auto& name : synthetic_structure_names(cfg.n_structures))
    ds.manifest.structures.emplace_back(name, cfg.landmarks_per_structure);
  for (int i = 0; i < cfg.n_train; ++i) ds.manifest.train.push_back(i);
  for (int i = 0; i < cfg.n_test; ++i) ds.manifest.test.push_back(cfg.n_train + i);
  ds.samples.reserve(static_cast<size_t>(ds.manifest.n_samples));
  for (int i = 0; i < ds.manifest.n_samples; ++i)
    ds.samples.push_back(generate_sample(cfg, seed, i));
  return ds;
}

// Zero-fills a square occluder with side round(fraction * size), placed
// uniformly such that it lies fully inside the image.
inline Image corrupt_mask(const Image& image, double fraction, Rng& rng) {
  require(fraction >= 0.0 && fraction <= 1.0,
          "corrupt_mask: fraction must be in [0,1]");
  Image out = image;
  int side = static_cast<int>(std::llround(fraction * image.size));
  if (side <= 0) return out;
  side = std::min(side, image.size);
  int x0 = rng.uniform_int(image.size - side + 1);
  int y0 = rng.uniform_int(image.size - side + 1);
  for (int y = y0; y < y0 + side; ++y)
    for (int x = x0; x < x0 + side; ++x)
      out.pix[static_cast<size_t>(y) * image.size + x] = 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// On-disk dataset format:
//   DIR/manifest.json
//   DIR/images/NNNN.pgm      (P5, 8-bit)
//   DIR/landmarks/NNNN.csv   (header "structure,index,x,y")

namespace detail {

inline std::string sample_id(int index) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%04d", index);
  return buf;
}

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace detail

inline void save_pgm(const std::string& path, const Image& img) {
  std::ofstream os(path, std::ios::binary);
  if (!os) io_fail(path + ": cannot open for writing");
  os << "P5\n" << img.size << " " << img.size << "\n255\n";
  std::vector<unsigned char> bytes(img.pix.size());
  for (size_t i = 0; i < img.pix.size(); ++i)
    bytes[i] = static_cast<unsigned char>(
        std::llround(std::clamp(img.pix[i], 0.0, 1.0) * 255.0));
  os.write(reinterpret_cast<const char*>(bytes.data()),
           static_cast<std::streamsize>(bytes.size()));
  if (!os) io_fail(path + ": write failed");
}

inline Image load_pgm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) io_fail(path + ": cannot open for reading");
  std::string magic;
  int w = 0, h = 0, maxval = 0;
  if (!(is >> magic) || magic != "P5")
    io_fail(path + ": not a P5 PGM (offset 0)");
  if (!(is >> w >> h >> maxval) || w <= 0 || h <= 0)
    io_fail(path + ": malformed PGM header");
  if (maxval != 255) io_fail(path + ": expected maxval 255");
  if (w != h) io_fail(path + ": image must be square, got " +
                      std::to_string(w) + "x" + std::to_string(h));
  is.get();  // single whitespace after maxval
  std::vector<unsigned char> bytes(static_cast<size_t>(w) * h);
  is.read(reinterpret_cast<char*>(bytes.data()),
          static_cast<std::streamsize>(bytes.size()));
  if (static_cast<size_t>(is.gcount()) != bytes.size())
    io_fail(path + ": truncated pixel data at offset " +
            std::to_string(is.tellg() == -1 ? -1l : static_cast<long>(is.tellg())));
  Image img;
  img.size = w;
  img.pix.resize(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) img.pix[i] = bytes[i] / 255.0;
  return img;
}

inline void save_landmarks_csv(const std::string& path, const Shape& shape) {
  std::ofstream os(path);
  if (!os) io_fail(path + ": cannot open for writing");
  os << "structure,index,x,y\n";
  for (const auto& s : shape.slices)
    for (int i = s.begin; i < s.end; ++i)
      os << s.name << "," << (i - s.begin) << ","
         << detail::format_double(shape.points[static_cast<size_t>(i)].x) << ","
         << detail::format_double(shape.points[static_cast<size_t>(i)].y)
         << "\n";
  if (!os) io_fail(path + ": write failed");
}

inline Shape load_landmarks_csv(const std::string& path, double spacing_mm) {
  std::ifstream is(path);
  if (!is) io_fail(path + ": cannot open for reading");
  std::string line;
  int lineno = 1;
  if (!std::getline(is, line) || line != "structure,index,x,y")
    io_fail(path + ":1: expected header 'structure,index,x,y'");
  Shape shape;
  shape.spacing_mm = spacing_mm;
  std::string current;
  int expect_index = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::array<std::string, 4> fields;
    size_t start = 0;
    for (int f = 0; f < 4; ++f) {
      size_t comma = (f < 3) ? line.find(',', start) : line.size();
      if (comma == std::string::npos)
        io_fail(path + ":" + std::to_string(lineno) + ": expected 4 fields");
      fields[static_cast<size_t>(f)] = line.substr(start, comma - start);
      start = comma + 1;
    }
    int index;
    double x, y;
    try {
      index = std::stoi(fields[1]);
      x = std::stod(fields[2]);
      y = std::stod(fields[3]);
    } catch (const std::exception&) {
      io_fail(path + ":" + std::to_string(lineno) + ": malformed numeric field");
    }
    if (fields[0] != current) {
      if (!shape.slices.empty() &&
          shape.has_structure(fields[0]))
        io_fail(path + ":" + std::to_string(lineno) + ": structure '" +
                fields[0] + "' appears in two blocks");
      if (!shape.slices.empty())
        shape.slices.back().end = static_cast<int>(shape.points.size());
      StructureSlice s;
      s.name = fields[0];
      s.begin = static_cast<int>(shape.points.size());
      shape.slices.push_back(s);
      current = fields[0];
      expect_index = 0;
    }
    if (index != expect_index)
      io_fail(path + ":" + std::to_string(lineno) + ": expected index " +
              std::to_string(expect_index) + ", got " + std::to_string(index));
    ++expect_index;
    shape.points.push_back({x, y});
  }
  if (shape.slices.empty()) io_fail(path + ": no landmarks");
  shape.slices.back().end = static_cast<int>(shape.points.size());
  try {
    shape.validate();
  } catch (const std::exception& e) {
    io_fail(path + ": " + e.what());
  }
  return shape;
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(fs::path(dir) / "images");
  fs::create_directories(fs::path(dir) / "landmarks");
  nlohmann::json j;
  j["n_samples"] = ds.manifest.n_samples;
  j["image_size"] = ds.manifest.image_size;
  j["spacing_mm"] = ds.manifest.spacing_mm;
  nlohmann::json structures = nlohmann::json::array();
  for (const auto& [name, count] : ds.manifest.structures)
    structures.push_back({{"name", name}, {"landmarks", count}});
  j["structures"] = structures;
  j["train"] = ds.manifest.train;
  j["test"] = ds.manifest.test;
  j["seed"] = ds.manifest.seed;
  std::ofstream os(fs::path(dir) / "manifest.json");
  if (!os) io_fail(dir + "/manifest.json: cannot open for writing");
  os << j.dump(2) << "\n";
  require(static_cast<int>(ds.samples.size()) == ds.manifest.n_samples,
          "save_dataset: manifest/sample count mismatch");
  for (int i = 0; i < ds.manifest.n_samples; ++i) {
    const auto id = detail::sample_id(i);
    save_pgm((fs::path(dir) / "images" / (id + ".pgm")).string(),
             ds.samples[static_cast<size_t>(i)].image);
    save_landmarks_csv(
        (fs::path(dir) / "landmarks" / (id + ".csv")).string(),
        ds.samples[static_cast<size_t>(i)].landmarks);
  }
}

inline Dataset load_dataset(const std::string& dir) {
  namespace fs = std::filesystem;
  const std::string manifest_path = (fs::path(dir) / "manifest.json").string();
  std::ifstream is(manifest_path);
  if (!is) io_fail(manifest_path + ": cannot open for reading");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    io_fail(manifest_path + ": " + e.what());
  }
  Dataset ds;
  try {
    ds.manifest.n_samples = j.at("n_samples").get<int>();
    ds.manifest.image_size = j.at("image_size").get<int>();
    ds.manifest.spacing_mm = j.at("spacing_mm").get<double>();
    for (const auto& s : j.at("structures"))
      ds.manifest.structures.emplace_back(s.at("name").get<std::string>(),
                                          s.at("landmarks").get<int>());
    ds.manifest.train = j.at("train").get<std::vector<int>>();
    ds.manifest.test = j.at("test").get<std::vector<int>>();
    ds.manifest.seed = j.at("seed").get<uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    io_fail(manifest_path + ": " + e.what());
  }
  const auto& m = ds.manifest;
  if (m.n_samples <= 0 || m.image_size <= 0 || m.spacing_mm <= 0 ||
      m.structures.empty())
    io_fail(manifest_path + ": invalid manifest values");
  if (m.image_size % 8 != 0)
    io_fail(manifest_path + ": image_size must be divisible by 8");
  std::vector<char> seen(static_cast<size_t>(m.n_samples), 0);
  for (int i : m.train) {
    if (i < 0 || i >= m.n_samples)
      io_fail(manifest_path + ": train index " + std::to_string(i) +
              " out of range");
    seen[static_cast<size_t>(i)] = 1;
  }
  for (int i : m.test) {
    if (i < 0 || i >= m.n_samples)
      io_fail(manifest_path + ": test index " + std::to_string(i) +
              " out of range");
    if (seen[static_cast<size_t>(i)])
      io_fail(manifest_path + ": sample " + std::to_string(i) +
              " is in both splits");
  }
  ds.samples.resize(static_cast<size_t>(m.n_samples));
  for (int i = 0; i < m.n_samples; ++i) {
    const auto id = detail::sample_id(i);
    const std::string img_path = (fs::path(dir) / "images" / (id + ".pgm")).string();
    const std::string lm_path =
        (fs::path(dir) / "landmarks" / (id + ".csv")).string();
    Image img = load_pgm(img_path);
    if (img.size != m.image_size)
      io_fail(img_path + ": size " + std::to_string(img.size) +
              " does not match manifest image_size " +
              std::to_string(m.image_size));
    Shape shape = load_landmarks_csv(lm_path, m.spacing_mm);
    if (shape.slices.size() != m.structures.size())
      io_fail(lm_path + ": expected " + std::to_string(m.structures.size()) +
              " structures, found " + std::to_string(shape.slices.size()));
    for (size_t s = 0; s < shape.slices.size(); ++s) {
      if (shape.slices[s].name != m.structures[s].first ||
          shape.slices[s].end - shape.slices[s].begin !=
              m.structures[s].second)
        io_fail(lm_path + ": structure layout does not match the manifest");
    }
    for (const auto& p : shape.points)
      if (!(p.x >= 0 && p.x < m.image_size && p.y >= 0 && p.y < m.image_size))
        io_fail(lm_path + ": landmark (" + detail::format_double(p.x) + ", " +
                detail::format_double(p.y) + ") outside [0, " +
                std::to_string(m.image_size) + ")");
    ds.samples[static_cast<size_t>(i)] = {std::move(img), std::move(shape)};
  }
  return ds;
}

}  // namespace shapereg
