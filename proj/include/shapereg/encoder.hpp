#pragma once

#include <string>
#include <vector>

#include "shapereg/layers.hpp"
#include "shapereg/tensor.hpp"

namespace shapereg {

// Convolutional encoder with total stride 8. Four stages of
// [conv3x3 -> relu -> conv3x3 -> relu]; stages 1-3 stride 2 on their first
// conv, stage 4 runs two dilation-2 convs at stride 1 so the receptive field
// grows without losing resolution. No batch norm: batches are single images
// and determinism matters more than train speed here.

struct EncoderConfig {
  std::vector<int> widths{16, 32, 64, 64};
  int in_channels = 1;

  void validate() const {
    require(widths.size() == 4, "EncoderConfig: expected 4 stage widths");
    for (int w : widths) require(w > 0, "EncoderConfig: widths must be positive");
    require(in_channels > 0, "EncoderConfig: in_channels must be positive");
  }
};

class Encoder {
 public:
  Encoder() = default;

  Encoder(const EncoderConfig& cfg, Rng& rng) : cfg_(cfg) {
    cfg.validate();
    const auto& w = cfg.widths;
    convs_.emplace_back(cfg.in_channels, w[0], 3, 2, 1, 1, rng);
    convs_.emplace_back(w[0], w[0], 3, 1, 1, 1, rng);
    convs_.emplace_back(w[0], w[1], 3, 2, 1, 1, rng);
    convs_.emplace_back(w[1], w[1], 3, 1, 1, 1, rng);
    convs_.emplace_back(w[1], w[2], 3, 2, 1, 1, rng);
    convs_.emplace_back(w[2], w[2], 3, 1, 1, 1, rng);
    convs_.emplace_back(w[2], w[3], 3, 1, 2, 2, rng);
    convs_.emplace_back(w[3], w[3], 3, 1, 2, 2, rng);
  }

  // {1,H,W} -> {C,H/8,W/8}
  Tensor encode(const Tensor& image) const {
    require(image.rank() == 3 && image.dim(0) == cfg_.in_channels,
            "encode: expected {" + std::to_string(cfg_.in_channels) +
                ",H,W} input, got " + dims_str(image.shape()));
    require(image.dim(1) % 8 == 0 && image.dim(2) % 8 == 0,
            "encode: spatial dims must be divisible by 8, got " +
                dims_str(image.shape()));
    Tensor x = image;
    for (const auto& conv : convs_) x = relu(conv(x));
    return x;
  }

  int out_channels() const { return cfg_.widths.back(); }

  void params(NamedTensors& out, const std::string& prefix) const {
    static const char* names[8] = {"s1c1", "s1c2", "s2c1", "s2c2",
                                   "s3c1", "s3c2", "s4c1", "s4c2"};
    for (size_t i = 0; i < convs_.size(); ++i)
      convs_[i].params(out, prefix + "." + names[i]);
  }

 private:
  EncoderConfig cfg_;
  std::vector<Conv> convs_;
};

// Pixel-classification head over the encoder features: a 1x1 conv branch is
// gated by a global-average-pooled squeeze-excite branch, projected to one
// channel per structure, bilinearly upsampled x8 and squashed through a
// sigmoid.
class PixelDecoder {
 public:
  PixelDecoder() = default;

  PixelDecoder(int in_channels, int hidden, int n_structures, Rng& rng)
      : branch_(in_channels, hidden, 1, 1, 1, 0, rng),
        se_(in_channels, hidden, rng),
        out_(hidden, n_structures, 1, 1, 1, 0, rng),
        hidden_(hidden),
        n_structures_(n_structures) {}

  // {C,h,w} -> {S, 8h, 8w} probabilities in (0,1)
  Tensor operator()(const Tensor& fmap) const {
    Tensor a = relu(branch_(fmap));
    Tensor pooled = global_avg_pool(fmap);  // {C}
    Tensor gate = sigmoid(reshape(se_(reshape(pooled, {1, fmap.dim(0)})),
                                  {hidden_}));
    Tensor gated = scale_channels(a, gate);
    Tensor logits = out_(gated);
    return sigmoid(upsample_bilinear(logits, 8));
  }

  int n_structures() const { return n_structures_; }

  void params(NamedTensors& out, const std::string& prefix) const {
    branch_.params(out, prefix + ".branch");
    se_.params(out, prefix + ".se");
    out_.params(out, prefix + ".out");
  }

 private:
  Conv branch_;
  Linear se_;
  Conv out_;
  int hidden_ = 0;
  int n_structures_ = 0;
};

// Mean over pixels of -[pos_weight * t * log(p) + (1-t) * log(1-p)], with
// probabilities clamped to [1e-7, 1 - 1e-7].
inline Tensor weighted_bce(const Tensor& pred, const Tensor& target,
                           double pos_weight) {
  require(pred.shape() == target.shape(),
          "weighted_bce: shapes differ: " + dims_str(pred.shape()) + " vs " +
              dims_str(target.shape()));
  require(pos_weight > 0, "weighted_bce: pos_weight must be positive");
  Tensor p = clamp(pred, 1e-7, 1.0 - 1e-7);
  Tensor pos = mul_scalar(mul(target, log(p)), -pos_weight);
  Tensor one_minus_t = add_scalar(mul_scalar(target, -1.0), 1.0);
  Tensor one_minus_p = add_scalar(mul_scalar(p, -1.0), 1.0);
  Tensor neg = mul_scalar(mul(one_minus_t, log(one_minus_p)), -1.0);
  return mean(add(pos, neg));
}

}  // namespace shapereg
