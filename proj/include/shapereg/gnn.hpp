#pragma once

#include <algorithm>
#include <numeric>
#include <string>
#include <vector>

#include "shapereg/geometry.hpp"
#include "shapereg/layers.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

// Geometric networks mapping the 5L-point cloud with sampled image features
// to per-point K-dimensional features.

struct GnnConfig {
  int k_neighbors = 16;
  int n_layers = 2;
  int feature_dim = 128;  // K
  int input_dim = 0;      // C + 2 positional channels

  void validate() const {
    require(feature_dim > 0, "GnnConfig: feature_dim must be positive");
    require(k_neighbors >= 1, "GnnConfig: k_neighbors must be >= 1");
    require(n_layers >= 1, "GnnConfig: n_layers must be >= 1");
  }
};

struct NeighborGraph {
  int k = 0;
  std::vector<int> indices;  // P*k row-major; each row contains the point itself
};

// Euclidean k-nearest neighbours including self, ties broken by lower index.
inline NeighborGraph knn(const std::vector<Vec2>& coords, int k) {
  const int p = static_cast<int>(coords.size());
  require(k >= 1 && k <= p, "knn: k=" + std::to_string(k) +
                                " out of range for " + std::to_string(p) +
                                " points");
  NeighborGraph g;
  g.k = k;
  g.indices.resize(static_cast<size_t>(p) * k);
  std::vector<std::pair<double, int>> dist(static_cast<size_t>(p));
  for (int i = 0; i < p; ++i) {
    for (int j = 0; j < p; ++j) {
      Vec2 d = coords[static_cast<size_t>(i)] - coords[static_cast<size_t>(j)];
      dist[static_cast<size_t>(j)] = {dot(d, d), j};
    }
    std::partial_sort(dist.begin(), dist.begin() + k, dist.end());
    for (int j = 0; j < k; ++j)
      g.indices[static_cast<size_t>(i) * k + j] = dist[static_cast<size_t>(j)].second;
  }
  return g;
}

// Coordinates normalized to [-1, 1] by the image size, as a constant tensor.
inline Tensor normalized_coords(const PointCloud& cloud, int image_size) {
  std::vector<double> flat;
  flat.reserve(cloud.coords.size() * 2);
  for (const auto& c : cloud.coords) {
    flat.push_back(2.0 * c.x / image_size - 1.0);
    flat.push_back(2.0 * c.y / image_size - 1.0);
  }
  return Tensor::from({static_cast<int>(cloud.coords.size()), 2},
                      std::move(flat));
}

// PointNet: per-point MLP (C+2 -> 64 -> 128), global max-pool, pooled vector
// concatenated back to every point, fused down to K. Input per point is
// [sampled image features || normalized coordinates].
class PointNet {
 public:
  PointNet() = default;

  PointNet(const GnnConfig& cfg, Rng& rng)
      : l1_(cfg.input_dim, 64, rng),
        l2_(64, 128, rng),
        fuse_(256, cfg.feature_dim, rng) {
    cfg.validate();
  }

  Tensor forward(const PointCloud& cloud, const Tensor& feats,
                 int image_size) const {
    const int p = static_cast<int>(cloud.coords.size());
    require(feats.rank() == 2 && feats.dim(0) == p,
            "pointnet: features " + dims_str(feats.shape()) +
                " do not match cloud of " + std::to_string(p) + " points");
    Tensor in = concat_cols(feats, normalized_coords(cloud, image_size));
    Tensor h = relu(l2_(relu(l1_(in))));       // {P,128}
    Tensor pooled = max_over_rows(h);          // {128}
    Tensor cat = concat_cols(h, repeat_row(pooled, p));
    return fuse_(cat);                         // {P,K}
  }

  void params(NamedTensors& out, const std::string& prefix) const {
    l1_.params(out, prefix + ".mlp1");
    l2_.params(out, prefix + ".mlp2");
    fuse_.params(out, prefix + ".fuse");
  }

 private:
  Linear l1_, l2_, fuse_;
};

// One vector self-attention layer over the kNN neighbourhood. For point i
// with neighbours j:
//   logits_ij = gamma(phi(f_i) - psi(f_j) + delta_ij)
//   values_ij = alpha(f_j) + delta_ij,  delta_ij = theta(p_i - p_j)
// attention is softmaxed per neighbourhood per channel, the aggregate is
// linearly projected and added back to f_i. Positions enter only through
// p_i - p_j, so the layer is translation invariant by construction.
class PointTransformerLayer {
 public:
  PointTransformerLayer() = default;

  PointTransformerLayer(int feature_dim, int hidden, Rng& rng)
      : phi_(feature_dim, feature_dim, rng),
        psi_(feature_dim, feature_dim, rng),
        alpha_(feature_dim, feature_dim, rng),
        theta1_(2, hidden, rng),
        theta2_(hidden, feature_dim, rng),
        gamma1_(feature_dim, hidden, rng),
        gamma2_(hidden, feature_dim, rng),
        out_(feature_dim, feature_dim, rng) {}

  Tensor forward(const Tensor& feats, const Tensor& rel_pos,
                 const NeighborGraph& graph) const {
    const int p = feats.dim(0);
    const int k = graph.k;
    require(static_cast<int>(graph.indices.size()) == p * k,
            "point_transformer_layer: graph does not match features");
    Tensor q = repeat_rows(phi_(feats), k);              // {Pk,K}
    Tensor kk = gather_rows(psi_(feats), graph.indices);
    Tensor v = gather_rows(alpha_(feats), graph.indices);
    Tensor delta = theta2_(relu(theta1_(rel_pos)));      // {Pk,K}
    Tensor logits = gamma2_(relu(gamma1_(add(sub(q, kk), delta))));
    Tensor attn = softmax_groups(logits, k);
    Tensor agg = sum_groups(mul(attn, add(v, delta)), k);  // {P,K}
    return add(feats, out_(agg));
  }

  void params(NamedTensors& out, const std::string& prefix) const {
    phi_.params(out, prefix + ".phi");
    psi_.params(out, prefix + ".psi");
    alpha_.params(out, prefix + ".alpha");
    theta1_.params(out, prefix + ".theta1");
    theta2_.params(out, prefix + ".theta2");
    gamma1_.params(out, prefix + ".gamma1");
    gamma2_.params(out, prefix + ".gamma2");
    out_.params(out, prefix + ".out");
  }

 private:
  Linear phi_, psi_, alpha_;
  Linear theta1_, theta2_;  // positional encoding, 2 -> hidden -> K
  Linear gamma1_, gamma2_;  // attention mapping, K -> hidden -> K
  Linear out_;
};

// Point Transformer stack: linear embedding of the sampled image features,
// then n_layers of local vector attention. Coordinates reach the network only
// as relative offsets, keeping the stack rigid-translation invariant. The
// embedding therefore consumes C channels; the two positional input channels
// of GnnConfig::input_dim apply to the PointNet baseline.
class PointTransformer {
 public:
  PointTransformer() = default;

  PointTransformer(const GnnConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    int hidden = std::max(4, cfg.feature_dim / 4);
    embed_ = Linear(cfg.input_dim - 2, cfg.feature_dim, rng);
    for (int i = 0; i < cfg.n_layers; ++i)
      layers_.emplace_back(cfg.feature_dim, hidden, rng);
  }

  Tensor forward(const PointCloud& cloud, const Tensor& feats) const {
    const int p = static_cast<int>(cloud.coords.size());
    require(feats.rank() == 2 && feats.dim(0) == p,
            "point_transformer: features " + dims_str(feats.shape()) +
                " do not match cloud of " + std::to_string(p) + " points");
    require(cfg_.k_neighbors <= p,
            "point_transformer: k_neighbors exceeds point count");
    NeighborGraph graph = knn(cloud.coords, cfg_.k_neighbors);
    std::vector<double> rel;
    rel.reserve(graph.indices.size() * 2);
    for (int i = 0; i < p; ++i)
      for (int j = 0; j < graph.k; ++j) {
        Vec2 d = cloud.coords[static_cast<size_t>(i)] -
                 cloud.coords[static_cast<size_t>(
                     graph.indices[static_cast<size_t>(i) * graph.k + j])];
        rel.push_back(d.x);
        rel.push_back(d.y);
      }
    Tensor rel_pos =
        Tensor::from({p * graph.k, 2}, std::move(rel));
    Tensor f = embed_(feats);
    for (const auto& layer : layers_) f = layer.forward(f, rel_pos, graph);
    return f;
  }

  const GnnConfig& config() const { return cfg_; }

  void params(NamedTensors& out, const std::string& prefix) const {
    embed_.params(out, prefix + ".embed");
    for (size_t i = 0; i < layers_.size(); ++i)
      layers_[i].params(out, prefix + ".layer" + std::to_string(i));
  }

 private:
  GnnConfig cfg_;
  Linear embed_;
  std::vector<PointTransformerLayer> layers_;
};

// Gathers the rows of the landmarks' own points, in landmark order.
inline Tensor select_landmarks(const Tensor& feats, const PointCloud& cloud) {
  require(feats.rank() == 2, "select_landmarks: expects {P,K} features");
  for (int idx : cloud.landmark_index)
    if (idx < 0 || idx >= feats.dim(0))
      fail("select_landmarks: landmark index " + std::to_string(idx) +
           " out of range");
  return gather_rows(feats, cloud.landmark_index);
}

}  // namespace shapereg
