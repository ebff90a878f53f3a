#pragma once

#include <string>
#include <vector>

#include "shapereg/geometry.hpp"
#include "shapereg/layers.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

// Shape-regression heads. All three consume the L x K landmark features from
// the GNN through the same shared three-layer MLP (K -> 2K -> 2K -> M) and
// differ only in how M is decoded into landmark coordinates.

// Displacements live in a [-r, r] box realizing a (2r+1)^2 pixel search
// window; 22 px at 256 resolution, scaled with the image.
inline constexpr double kDispBoundAt256 = 22.0;

inline double displacement_bound(int image_size) {
  return kDispBoundAt256 * image_size / 256.0;
}

class MlpHead {
 public:
  MlpHead() = default;

  MlpHead(int feature_dim, int out_dim, Rng& rng)
      : l1_(feature_dim, 2 * feature_dim, rng),
        l2_(2 * feature_dim, 2 * feature_dim, rng),
        l3_(2 * feature_dim, out_dim, rng) {
    // The output feeds bounded decoders (tanh box, softmax grids): starting
    // small keeps them unsaturated, otherwise gradients vanish at init.
    for (auto& w : l3_.w.raw_data()) w *= 0.1;
  }

  // {L,K} -> {L,M}; weights shared across rows, no output activation.
  Tensor forward(const Tensor& feats) const {
    return l3_(relu(l2_(relu(l1_(feats)))));
  }

  void params(NamedTensors& out, const std::string& prefix) const {
    l1_.params(out, prefix + ".l1");
    l2_.params(out, prefix + ".l2");
    l3_.params(out, prefix + ".l3");
  }

 private:
  Linear l1_, l2_, l3_;
};

// U = r * tanh(raw / r): smooth, bounded to [-r, r], sign preserving, and
// near-identity for small raw values.
inline Tensor displacement_from_raw(const Tensor& raw, double r) {
  require(raw.rank() == 2 && raw.dim(1) == 2,
          "displacement_from_raw: expects {L,2}, got " + dims_str(raw.shape()));
  require(r > 0, "displacement_from_raw: bound must be positive");
  return mul_scalar(tanh(mul_scalar(raw, 1.0 / r)), r);
}

// Mean squared Euclidean landmark distance.
inline Tensor l2_shape_loss(const Tensor& pred, const Tensor& target) {
  require(pred.rank() == 2 && pred.dim(1) == 2,
          "l2_shape_loss: expects {L,2} predictions");
  require(pred.shape() == target.shape(),
          "l2_shape_loss: shapes differ: " + dims_str(pred.shape()) + " vs " +
              dims_str(target.shape()));
  Tensor d = sub(pred, target);
  return mul_scalar(sum(mul(d, d)), 1.0 / pred.dim(0));
}

inline Tensor l2_shape_loss(const Tensor& pred, const Shape& target) {
  return l2_shape_loss(pred, shape_tensor(target));
}

// Cyclic next-index permutation within each structure's contour.
inline std::vector<int> cyclic_next_indices(const Shape& layout) {
  std::vector<int> next(static_cast<size_t>(layout.num_landmarks()));
  for (const auto& s : layout.slices)
    for (int i = s.begin; i < s.end; ++i)
      next[static_cast<size_t>(i)] = (i + 1 < s.end) ? i + 1 : s.begin;
  return next;
}

// Displacement loss: (1-lambda) * mean_i |S*_i - (S_init_i + U_i)|^2
//                  + lambda   * mean_i |U_{next(i)} - U_i|^2,
// with the forward differences taken cyclically along each structure's
// contour and never across structures.
inline Tensor loss_disp(const Shape& s_star, const Shape& s_init,
                        const Tensor& u, double lambda_r) {
  require(lambda_r >= 0.0 && lambda_r <= 1.0,
          "loss_disp: lambda_R must be in [0,1]");
  require(s_star.num_landmarks() == s_init.num_landmarks(),
          "loss_disp: shapes have different landmark counts");
  require(u.rank() == 2 && u.dim(1) == 2 &&
              u.dim(0) == s_star.num_landmarks(),
          "loss_disp: displacement " + dims_str(u.shape()) +
              " does not match L=" + std::to_string(s_star.num_landmarks()));
  const int l = s_star.num_landmarks();
  // data term computed exactly as l2_shape_loss(S_init + U, S*), so the
  // lambda = 0 case matches it bit for bit
  Tensor data_term =
      l2_shape_loss(add(shape_tensor(s_init), u), shape_tensor(s_star));
  Tensor du = sub(gather_rows(u, cyclic_next_indices(s_star)), u);
  Tensor smooth_term = mul_scalar(sum(mul(du, du)), 1.0 / l);
  return add(mul_scalar(data_term, 1.0 - lambda_r),
             mul_scalar(smooth_term, lambda_r));
}

// Regular grid covering the displacement box: the Cartesian product of n
// evenly spaced values spanning [-radius, radius], 121 points for n = 11.
struct HeatmapGrid {
  int n = 11;
  double radius = kDispBoundAt256;

  int points() const { return n * n; }

  Tensor coords() const {
    std::vector<double> flat;
    flat.reserve(static_cast<size_t>(n) * n * 2);
    auto value = [this](int i) {
      return -radius + 2.0 * radius * i / (n - 1);
    };
    for (int iy = 0; iy < n; ++iy)
      for (int ix = 0; ix < n; ++ix) {
        flat.push_back(value(ix));
        flat.push_back(value(iy));
      }
    return Tensor::from({n * n, 2}, std::move(flat));
  }
};

// Soft-argmax: per-landmark softmax over the grid logits, displacement is the
// probability-weighted sum of grid coordinates. Always inside the grid hull.
inline Tensor heatmap_to_displacement(const Tensor& logits,
                                      const HeatmapGrid& grid) {
  require(logits.rank() == 2 && logits.dim(1) == grid.points(),
          "heatmap_to_displacement: logits " + dims_str(logits.shape()) +
              " do not match grid of " + std::to_string(grid.points()) +
              " points");
  return matmul(softmax(logits, 1), grid.coords());
}

// All training shapes stacked into {N, 2L}, kept alongside their layout.
struct ShapeDictionary {
  std::vector<Shape> shapes;
  Tensor stacked;

  static ShapeDictionary build(const std::vector<Shape>& train_shapes) {
    require(!train_shapes.empty(), "ShapeDictionary: empty dictionary");
    ShapeDictionary d;
    d.shapes = train_shapes;
    const Shape& first = train_shapes.front();
    std::vector<double> flat;
    flat.reserve(train_shapes.size() * first.points.size() * 2);
    for (const auto& s : train_shapes) {
      require(s.same_layout(first),
              "ShapeDictionary: inconsistent landmark layout");
      for (const auto& p : s.points) {
        flat.push_back(p.x);
        flat.push_back(p.y);
      }
    }
    d.stacked = Tensor::from({static_cast<int>(train_shapes.size()),
                              first.num_landmarks() * 2},
                             std::move(flat));
    return d;
  }

  int size() const { return static_cast<int>(shapes.size()); }
  int num_landmarks() const { return shapes.front().num_landmarks(); }
};

// Softmax the N logits into convex weights and blend the stored shapes:
// every predicted landmark lies in the convex hull of its dictionary entries.
inline Tensor shape_from_weights(const Tensor& logits,
                                 const ShapeDictionary& dict) {
  require(dict.size() > 0, "shape_from_weights: empty dictionary");
  require(logits.rank() == 1 && logits.dim(0) == dict.size(),
          "shape_from_weights: logits " + dims_str(logits.shape()) +
              " do not match dictionary of " + std::to_string(dict.size()));
  Tensor w = softmax(logits, 0);
  Tensor blended = matmul(reshape(w, {1, dict.size()}), dict.stacked);
  return reshape(blended, {dict.num_landmarks(), 2});
}

// The direct shape head: the shared MLP output {L,M} is mean-pooled over
// landmarks (the minimal permutation-invariant reduction) and projected to
// one logit per training shape.
class ShapeHead {
 public:
  ShapeHead() = default;

  ShapeHead(int feature_dim, int pooled_dim, int dictionary_size, Rng& rng)
      : mlp_(feature_dim, pooled_dim, rng),
        proj_(pooled_dim, dictionary_size, rng),
        pooled_dim_(pooled_dim),
        dictionary_size_(dictionary_size) {
    // near-uniform dictionary weights at init (see MlpHead)
    for (auto& w : proj_.w.raw_data()) w *= 0.1;
  }

  Tensor logits(const Tensor& landmark_feats) const {
    Tensor pooled = mean_over_rows(mlp_.forward(landmark_feats));  // {M}
    return reshape(proj_(reshape(pooled, {1, pooled_dim_})),
                   {dictionary_size_});
  }

  void params(NamedTensors& out, const std::string& prefix) const {
    mlp_.params(out, prefix);
    proj_.params(out, prefix + ".proj");
  }

 private:
  MlpHead mlp_;
  Linear proj_;
  int pooled_dim_ = 0;
  int dictionary_size_ = 0;
};

}  // namespace shapereg
