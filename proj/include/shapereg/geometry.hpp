#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "shapereg/common.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

// Landmark shapes. Points are (x, y) in image pixels; structure slices
// partition the point list into closed contours (last point connects back to
// the first).

struct StructureSlice {
  std::string name;
  int begin = 0;
  int end = 0;  // half-open
};

struct Shape {
  std::vector<Vec2> points;
  std::vector<StructureSlice> slices;
  double spacing_mm = 1.0;

  int num_landmarks() const { return static_cast<int>(points.size()); }

  const StructureSlice& slice(const std::string& name) const {
    for (const auto& s : slices)
      if (s.name == name) return s;
    fail("Shape: no structure named '" + name + "'");
  }

  bool has_structure(const std::string& name) const {
    for (const auto& s : slices)
      if (s.name == name) return true;
    return false;
  }

  void validate() const {
    int expect = 0;
    for (const auto& s : slices) {
      require(s.begin == expect, "Shape: slices must be contiguous");
      require(s.end - s.begin >= 3,
              "Shape: contour '" + s.name + "' has fewer than 3 points");
      expect = s.end;
    }
    require(expect == num_landmarks(),
            "Shape: slices cover " + std::to_string(expect) + " of " +
                std::to_string(num_landmarks()) + " points");
  }

  bool same_layout(const Shape& o) const {
    if (points.size() != o.points.size() || slices.size() != o.slices.size())
      return false;
    for (size_t i = 0; i < slices.size(); ++i)
      if (slices[i].name != o.slices[i].name ||
          slices[i].begin != o.slices[i].begin ||
          slices[i].end != o.slices[i].end)
        return false;
    return true;
  }
};

inline Tensor shape_tensor(const Shape& s) {
  std::vector<double> flat;
  flat.reserve(s.points.size() * 2);
  for (const auto& p : s.points) {
    flat.push_back(p.x);
    flat.push_back(p.y);
  }
  return Tensor::from({s.num_landmarks(), 2}, std::move(flat));
}

inline Shape shape_from_tensor(const Tensor& t, const Shape& layout) {
  require(t.rank() == 2 && t.dim(1) == 2 && t.dim(0) == layout.num_landmarks(),
          "shape_from_tensor: tensor " + dims_str(t.shape()) +
              " does not match layout with L=" +
              std::to_string(layout.num_landmarks()));
  Shape out = layout;
  const auto& v = t.values();
  for (int i = 0; i < layout.num_landmarks(); ++i)
    out.points[static_cast<size_t>(i)] = {v[static_cast<size_t>(i) * 2],
                                          v[static_cast<size_t>(i) * 2 + 1]};
  return out;
}

// Point cloud fed to the geometric networks: each landmark plus four jittered
// neighbours. landmark_index[i] is the row of landmark i's own point.
struct PointCloud {
  std::vector<Vec2> coords;
  std::vector<int> landmark_index;
};

// Uniform draw over training shapes, excluding `exclude` (pass -1 to allow
// all, e.g. when initializing test predictions).
inline const Shape& pick_initial_shape(const std::vector<Shape>& train_shapes,
                                       Rng& rng, int exclude) {
  require(train_shapes.size() >= 2,
          "pick_initial_shape: need at least 2 training shapes, have " +
              std::to_string(train_shapes.size()));
  int n = static_cast<int>(train_shapes.size());
  if (exclude < 0 || exclude >= n)
    return train_shapes[static_cast<size_t>(rng.uniform_int(n))];
  int r = rng.uniform_int(n - 1);
  if (r >= exclude) ++r;
  return train_shapes[static_cast<size_t>(r)];
}

// Expands a shape to its 5L-point cloud: for each landmark, the landmark
// itself followed by four offsets drawn from N(0, sigma^2 I), clamped into
// the image.
inline PointCloud expand_point_cloud(const Shape& shape, double sigma,
                                     Rng& rng, int image_size) {
  require(sigma >= 0.0, "expand_point_cloud: sigma must be >= 0");
  const double hi = image_size - 1e-6;
  auto clamp_px = [hi](double v) { return std::clamp(v, 0.0, hi); };
  PointCloud cloud;
  cloud.coords.reserve(shape.points.size() * 5);
  cloud.landmark_index.reserve(shape.points.size());
  for (const auto& p : shape.points) {
    cloud.landmark_index.push_back(static_cast<int>(cloud.coords.size()));
    cloud.coords.push_back(p);
    for (int j = 0; j < 4; ++j) {
      double dx = rng.normal(0.0, sigma);
      double dy = rng.normal(0.0, sigma);
      cloud.coords.push_back({clamp_px(p.x + dx), clamp_px(p.y + dy)});
    }
  }
  return cloud;
}

inline Tensor cloud_tensor(const PointCloud& cloud) {
  std::vector<double> flat;
  flat.reserve(cloud.coords.size() * 2);
  for (const auto& p : cloud.coords) {
    flat.push_back(p.x);
    flat.push_back(p.y);
  }
  return Tensor::from({static_cast<int>(cloud.coords.size()), 2},
                      std::move(flat));
}

// ---------------------------------------------------------------------------
// Rasterization and metrics

struct Mask {
  int size = 0;
  std::vector<uint8_t> bits;  // 0/1, row-major

  uint8_t at(int x, int y) const { return bits[static_cast<size_t>(y) * size + x]; }
  long long count() const {
    long long c = 0;
    for (uint8_t b : bits) c += b;
    return c;
  }
};

// Even-odd scanline fill of one closed contour: a pixel is set iff its center
// (x+0.5, y+0.5) has an odd number of contour crossings strictly to its
// right. Matches the brute-force point-in-polygon test exactly.
inline Mask rasterize_contour(const std::vector<Vec2>& poly, int size) {
  require(poly.size() >= 3, "rasterize: contour has fewer than 3 points");
  Mask mask;
  mask.size = size;
  mask.bits.assign(static_cast<size_t>(size) * size, 0);
  const int n = static_cast<int>(poly.size());
  std::vector<double> xs;
  for (int iy = 0; iy < size; ++iy) {
    double yc = iy + 0.5;
    xs.clear();
    for (int i = 0; i < n; ++i) {
      const Vec2& a = poly[static_cast<size_t>(i)];
      const Vec2& b = poly[static_cast<size_t>((i + 1) % n)];
      if ((a.y <= yc) == (b.y <= yc)) continue;  // no crossing (horizontals too)
      xs.push_back(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
    }
    if (xs.empty()) continue;
    std::sort(xs.begin(), xs.end());
    size_t next = 0;
    for (int ix = 0; ix < size; ++ix) {
      double xc = ix + 0.5;
      while (next < xs.size() && xs[next] <= xc) ++next;
      // crossings strictly to the right of the pixel center
      if ((xs.size() - next) % 2 == 1)
        mask.bits[static_cast<size_t>(iy) * size + ix] = 1;
    }
  }
  return mask;
}

inline std::vector<Mask> rasterize(const Shape& shape, int size) {
  shape.validate();
  std::vector<Mask> masks;
  masks.reserve(shape.slices.size());
  for (const auto& s : shape.slices) {
    std::vector<Vec2> poly(shape.points.begin() + s.begin,
                           shape.points.begin() + s.end);
    masks.push_back(rasterize_contour(poly, size));
  }
  return masks;
}

// Dice similarity coefficient in [0,1]; two empty masks count as identical.
inline double dice(const Mask& a, const Mask& b) {
  require(a.size == b.size && a.bits.size() == b.bits.size(),
          "dice: mask sizes differ: " + std::to_string(a.size) + " vs " +
              std::to_string(b.size));
  long long inter = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.bits.size(); ++i) {
    inter += a.bits[i] & b.bits[i];
    na += a.bits[i];
    nb += b.bits[i];
  }
  if (na + nb == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(na + nb);
}

inline double point_segment_distance(Vec2 p, Vec2 a, Vec2 b) {
  Vec2 ab = b - a;
  double len2 = dot(ab, ab);
  if (len2 == 0.0) return norm(p - a);
  double t = std::clamp(dot(p - a, ab) / len2, 0.0, 1.0);
  return norm(p - (a + t * ab));
}

inline double point_polyline_distance(Vec2 p, const std::vector<Vec2>& poly) {
  double best = std::numeric_limits<double>::infinity();
  const int n = static_cast<int>(poly.size());
  for (int i = 0; i < n; ++i)
    best = std::min(best, point_segment_distance(
                              p, poly[static_cast<size_t>(i)],
                              poly[static_cast<size_t>((i + 1) % n)]));
  return best;
}

// Symmetric average surface distance of one structure, in mm: the mean
// distance from each shape's landmarks to the other's closed contour
// polyline, averaged over both directions, scaled by the pixel spacing.
inline double asd(const Shape& pred, const Shape& gt,
                  const std::string& structure) {
  require(pred.has_structure(structure) && gt.has_structure(structure),
          "asd: structure '" + structure + "' missing from a shape");
  auto contour = [&](const Shape& s) {
    const auto& sl = s.slice(structure);
    return std::vector<Vec2>(s.points.begin() + sl.begin,
                             s.points.begin() + sl.end);
  };
  auto a = contour(pred);
  auto b = contour(gt);
  auto one_way = [](const std::vector<Vec2>& from,
                    const std::vector<Vec2>& to) {
    double acc = 0.0;
    for (const auto& p : from) acc += point_polyline_distance(p, to);
    return acc / static_cast<double>(from.size());
  };
  return 0.5 * (one_way(a, b) + one_way(b, a)) * gt.spacing_mm;
}

// Coordinate-wise mean of shapes sharing a layout.
inline Shape mean_shape(const std::vector<Shape>& shapes) {
  require(!shapes.empty(), "mean_shape: no shapes");
  const Shape& first = shapes.front();
  Shape out = first;
  for (auto& p : out.points) p = {0.0, 0.0};
  for (const auto& s : shapes) {
    require(s.same_layout(first),
            "mean_shape: inconsistent landmark layout across shapes");
    for (size_t i = 0; i < s.points.size(); ++i)
      out.points[i] = out.points[i] + s.points[i];
  }
  double inv = 1.0 / static_cast<double>(shapes.size());
  for (auto& p : out.points) p = inv * p;
  return out;
}

}  // namespace shapereg
