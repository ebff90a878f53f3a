#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <json.hpp>

#include "shapereg/data.hpp"
#include "shapereg/encoder.hpp"
#include "shapereg/gnn.hpp"
#include "shapereg/heads.hpp"
#include "shapereg/serialize.hpp"

namespace shapereg {

// ---------------------------------------------------------------------------
// Optimizer and learning-rate schedule

// One Adam update on a flat parameter array. Rejects non-finite gradients so
// a diverged run aborts loudly instead of poisoning the weights.
inline void adam_step(std::vector<double>& params,
                      const std::vector<double>& grads,
                      std::vector<double>& m, std::vector<double>& v,
                      double lr, double beta1, double beta2, double eps,
                      long long t) {
  require(t >= 1, "adam_step: t must be >= 1");
  require(params.size() == grads.size() && params.size() == m.size() &&
              params.size() == v.size(),
          "adam_step: state sizes do not match parameters");
  const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
  for (size_t i = 0; i < params.size(); ++i) {
    const double g = grads[i];
    require(std::isfinite(g), "adam_step: non-finite gradient");
    m[i] = beta1 * m[i] + (1.0 - beta1) * g;
    v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
    const double mhat = m[i] / bc1;
    const double vhat = v[i] / bc2;
    params[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

class Adam {
 public:
  explicit Adam(std::vector<Tensor> params, double lr, double beta1 = 0.9,
                double beta2 = 0.999, double eps = 1e-8)
      : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2),
        eps_(eps) {
    m_.resize(params_.size());
    v_.resize(params_.size());
    for (size_t i = 0; i < params_.size(); ++i) {
      m_[i].assign(params_[i].values().size(), 0.0);
      v_[i].assign(params_[i].values().size(), 0.0);
    }
  }

  void step() {
    ++t_;
    for (size_t i = 0; i < params_.size(); ++i)
      adam_step(params_[i].raw_data(), params_[i].grad(), m_[i], v_[i], lr_,
                beta1_, beta2_, eps_, t_);
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<double>> m_, v_;
  double lr_, beta1_, beta2_, eps_;
  long long t_ = 0;
};

// Reduce-on-plateau: when the best-so-far loss has not improved for
// `patience` consecutive epochs, multiply the lr by `factor` and reset.
class PlateauScheduler {
 public:
  PlateauScheduler(double factor = 0.1, int patience = 30)
      : factor_(factor), patience_(patience) {
    require(factor > 0.0 && factor < 1.0,
            "plateau_scheduler: factor must be in (0,1)");
    require(patience >= 1, "plateau_scheduler: patience must be >= 1");
  }

  // Returns true when a reduction fires at this epoch.
  bool update(double loss) {
    if (loss < best_) {
      best_ = loss;
      counter_ = 0;
      return false;
    }
    if (++counter_ >= patience_) {
      multiplier_ *= factor_;
      counter_ = 0;
      return true;
    }
    return false;
  }

  double multiplier() const { return multiplier_; }

 private:
  double factor_;
  int patience_;
  double best_ = std::numeric_limits<double>::infinity();
  int counter_ = 0;
  double multiplier_ = 1.0;
};

// Epoch indices (0-based) at which a reduction fires for a given validation
// loss history.
inline std::vector<int> plateau_events(const std::vector<double>& history,
                                       int patience = 30,
                                       double factor = 0.1) {
  PlateauScheduler sched(factor, patience);
  std::vector<int> events;
  for (size_t e = 0; e < history.size(); ++e)
    if (sched.update(history[e])) events.push_back(static_cast<int>(e));
  return events;
}

// ---------------------------------------------------------------------------
// Experiment configuration

enum class ModelVariant { kPointNet = 0, kPointTransformer = 1,
                          kPixelBaseline = 2, kMeanShape = 3 };
enum class HeadVariant { kDisp = 0, kHeatmap = 1, kShape = 2 };

inline std::string to_string(ModelVariant m) {
  switch (m) {
    case ModelVariant::kPointNet: return "pointnet";
    case ModelVariant::kPointTransformer: return "point_transformer";
    case ModelVariant::kPixelBaseline: return "pixel_baseline";
    case ModelVariant::kMeanShape: return "mean_shape";
  }
  fail("unknown model variant");
}

inline std::string to_string(HeadVariant h) {
  switch (h) {
    case HeadVariant::kDisp: return "disp";
    case HeadVariant::kHeatmap: return "heatmap";
    case HeadVariant::kShape: return "shape";
  }
  fail("unknown head variant");
}

inline ModelVariant model_from_string(const std::string& s) {
  if (s == "pointnet") return ModelVariant::kPointNet;
  if (s == "point_transformer") return ModelVariant::kPointTransformer;
  if (s == "pixel_baseline") return ModelVariant::kPixelBaseline;
  if (s == "mean_shape") return ModelVariant::kMeanShape;
  fail("unknown model variant '" + s + "'");
}

inline HeadVariant head_from_string(const std::string& s) {
  if (s == "disp") return HeadVariant::kDisp;
  if (s == "heatmap") return HeadVariant::kHeatmap;
  if (s == "shape") return HeadVariant::kShape;
  fail("unknown head variant '" + s + "'");
}

struct ExperimentConfig {
  ModelVariant model = ModelVariant::kPointTransformer;
  HeadVariant head = HeadVariant::kDisp;
  double lr = 1e-3;
  double lr_factor = 0.1;
  int patience = 30;
  int epochs = 150;
  double lambda_r = 0.2;
  double sigma_offset = 3.0;  // px at 256 resolution, scaled with image size
  std::vector<uint64_t> seeds = {1};
  int n_initial_shapes = 5;
  std::string dataset;
  std::string output;

  uint64_t master_seed() const { return seeds.empty() ? 1 : seeds.front(); }

  void validate() const {
    require(lr > 0, "ExperimentConfig: lr must be positive");
    require(lr_factor > 0 && lr_factor < 1,
            "ExperimentConfig: lr_factor must be in (0,1)");
    require(patience >= 1, "ExperimentConfig: patience must be >= 1");
    require(epochs >= 1, "ExperimentConfig: epochs must be >= 1");
    require(lambda_r >= 0 && lambda_r <= 1,
            "ExperimentConfig: lambda_r must be in [0,1]");
    require(sigma_offset >= 0, "ExperimentConfig: sigma_offset must be >= 0");
    require(n_initial_shapes >= 1,
            "ExperimentConfig: n_initial_shapes must be >= 1");
    require(!seeds.empty(), "ExperimentConfig: seeds must not be empty");
  }
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> allowed = {
      "model", "head", "lr", "lr_factor", "patience", "epochs",
      "lambda_r", "sigma_offset", "seeds", "n_initial_shapes", "dataset",
      "output"};
  for (const auto& [key, value] : j.items())
    require(std::find(allowed.begin(), allowed.end(), key) != allowed.end(),
            "config: unknown key '" + key + "'");
  ExperimentConfig c;
  if (j.contains("model")) c.model = model_from_string(j.at("model"));
  if (j.contains("head")) c.head = head_from_string(j.at("head"));
  if (j.contains("lr")) c.lr = j.at("lr").get<double>();
  if (j.contains("lr_factor")) c.lr_factor = j.at("lr_factor").get<double>();
  if (j.contains("patience")) c.patience = j.at("patience").get<int>();
  if (j.contains("epochs")) c.epochs = j.at("epochs").get<int>();
  if (j.contains("lambda_r")) c.lambda_r = j.at("lambda_r").get<double>();
  if (j.contains("sigma_offset"))
    c.sigma_offset = j.at("sigma_offset").get<double>();
  if (j.contains("seeds")) c.seeds = j.at("seeds").get<std::vector<uint64_t>>();
  if (j.contains("n_initial_shapes"))
    c.n_initial_shapes = j.at("n_initial_shapes").get<int>();
  if (j.contains("dataset")) c.dataset = j.at("dataset").get<std::string>();
  if (j.contains("output")) c.output = j.at("output").get<std::string>();
  c.validate();
  return c;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) io_fail(path + ": cannot open for reading");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    io_fail(path + ": " + e.what());
  }
  try {
    return experiment_config_from_json(j);
  } catch (const std::exception& e) {
    io_fail(path + ": " + e.what());
  }
}

inline SyntheticConfig synthetic_config_from_json(const nlohmann::json& j) {
  static const std::vector<std::string> allowed = {
      "n_structures", "landmarks_per_structure", "n_harmonics", "amplitude",
      "amplitude_decay", "contrast_min", "contrast_max", "noise_sigma",
      "image_size", "n_train", "n_test", "spacing_mm"};
  for (const auto& [key, value] : j.items())
    require(std::find(allowed.begin(), allowed.end(), key) != allowed.end(),
            "config: unknown key '" + key + "'");
  SyntheticConfig c;
  if (j.contains("n_structures")) c.n_structures = j.at("n_structures").get<int>();
  if (j.contains("landmarks_per_structure"))
    c.landmarks_per_structure = j.at("landmarks_per_structure").get<int>();
  if (j.contains("n_harmonics")) c.n_harmonics = j.at("n_harmonics").get<int>();
  if (j.contains("amplitude")) c.amplitude = j.at("amplitude").get<double>();
  if (j.contains("amplitude_decay"))
    c.amplitude_decay = j.at("amplitude_decay").get<double>();
  if (j.contains("contrast_min")) c.contrast_min = j.at("contrast_min").get<double>();
  if (j.contains("contrast_max")) c.contrast_max = j.at("contrast_max").get<double>();
  if (j.contains("noise_sigma")) c.noise_sigma = j.at("noise_sigma").get<double>();
  if (j.contains("image_size")) c.image_size = j.at("image_size").get<int>();
  if (j.contains("n_train")) c.n_train = j.at("n_train").get<int>();
  if (j.contains("n_test")) c.n_test = j.at("n_test").get<int>();
  if (j.contains("spacing_mm")) c.spacing_mm = j.at("spacing_mm").get<double>();
  c.validate();
  return c;
}

inline SyntheticConfig load_synthetic_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) io_fail(path + ": cannot open for reading");
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    io_fail(path + ": " + e.what());
  }
  try {
    return synthetic_config_from_json(j);
  } catch (const std::exception& e) {
    io_fail(path + ": " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Model bundle

// Desk-scale model widths. The GNN feature width defaults to 64 here (the
// cited 128 is exercised in tests but oversized for 64 px synthetic images).
struct ModelDefaults {
  int feature_dim = 64;
  int k_neighbors = 16;
  int n_layers = 2;
  int decoder_hidden = 32;
};

struct Pipeline {
  ModelVariant model = ModelVariant::kPointTransformer;
  HeadVariant head = HeadVariant::kDisp;
  int image_size = 0;
  int feature_dim = 64;
  int k_neighbors = 16;
  int n_layers = 2;
  int decoder_hidden = 32;
  double sigma_offset_px = 0.0;
  double disp_bound_px = 0.0;
  double lambda_r = 0.2;
  int n_initial_shapes = 5;
  uint64_t seed = 1;

  Encoder encoder;
  PixelDecoder decoder;
  PointNet pointnet;
  PointTransformer transformer;
  MlpHead mlp;
  ShapeHead shape_head;
  ShapeDictionary dict;
  HeatmapGrid grid;
  Shape mean;

  bool is_shape_model() const {
    return model == ModelVariant::kPointNet ||
           model == ModelVariant::kPointTransformer;
  }

  static Pipeline build(const ExperimentConfig& cfg, const Dataset& ds,
                        const ModelDefaults& defaults = {}) {
    cfg.validate();
    require(!ds.manifest.train.empty(), "Pipeline: dataset has no train split");
    Pipeline p;
    p.model = cfg.model;
    p.head = cfg.head;
    p.image_size = ds.manifest.image_size;
    p.feature_dim = defaults.feature_dim;
    p.k_neighbors = defaults.k_neighbors;
    p.n_layers = defaults.n_layers;
    p.decoder_hidden = defaults.decoder_hidden;
    p.sigma_offset_px = cfg.sigma_offset * p.image_size / 256.0;
    p.disp_bound_px = displacement_bound(p.image_size);
    p.lambda_r = cfg.lambda_r;
    p.n_initial_shapes = cfg.n_initial_shapes;
    p.seed = cfg.master_seed();
    p.grid = HeatmapGrid{11, p.disp_bound_px};

    auto train_shapes = ds.train_shapes();
    p.mean = mean_shape(train_shapes);

    Rng rng(Rng::mix(p.seed, 0x1017));
    EncoderConfig enc_cfg;
    if (p.model != ModelVariant::kMeanShape) p.encoder = Encoder(enc_cfg, rng);
    const int n_structures = static_cast<int>(ds.manifest.structures.size());
    if (p.model == ModelVariant::kPixelBaseline)
      p.decoder = PixelDecoder(p.encoder.out_channels(), p.decoder_hidden,
                               n_structures, rng);
    if (p.is_shape_model()) {
      GnnConfig gcfg;
      gcfg.k_neighbors = p.k_neighbors;
      gcfg.n_layers = p.n_layers;
      gcfg.feature_dim = p.feature_dim;
      gcfg.input_dim = p.encoder.out_channels() + 2;
      if (p.model == ModelVariant::kPointNet)
        p.pointnet = PointNet(gcfg, rng);
      else
        p.transformer = PointTransformer(gcfg, rng);
      if (p.head == HeadVariant::kDisp)
        p.mlp = MlpHead(p.feature_dim, 2, rng);
      else if (p.head == HeadVariant::kHeatmap)
        p.mlp = MlpHead(p.feature_dim, p.grid.points(), rng);
      else {
        p.dict = ShapeDictionary::build(train_shapes);
        p.shape_head = ShapeHead(p.feature_dim, p.dict.size(), p.dict.size(), rng);
      }
    }
    return p;
  }

  NamedTensors trainable_params() const {
    NamedTensors out;
    if (model == ModelVariant::kMeanShape) return out;
    encoder.params(out, "enc");
    if (model == ModelVariant::kPixelBaseline) decoder.params(out, "dec");
    if (is_shape_model()) {
      if (model == ModelVariant::kPointNet)
        pointnet.params(out, "gnn");
      else
        transformer.params(out, "gnn");
      if (head == HeadVariant::kShape)
        shape_head.params(out, "head");
      else
        mlp.params(out, "head");
    }
    return out;
  }

  // Encoded feature map for one image; shared across initial shapes.
  Tensor encode_image(const Image& img) const {
    return encoder.encode(image_tensor(img));
  }

  Tensor landmark_features(const Tensor& fmap, const PointCloud& cloud) const {
    Tensor feats = bilinear_sample(fmap, cloud_tensor(cloud), image_size);
    Tensor out = model == ModelVariant::kPointNet
                     ? pointnet.forward(cloud, feats, image_size)
                     : transformer.forward(cloud, feats);
    return select_landmarks(out, cloud);
  }

  // Realized prediction { init + U } or dictionary blend, as a tensor.
  Tensor predict_tensor(const Tensor& fmap, const Shape& init,
                        const PointCloud& cloud) const {
    Tensor lm = landmark_features(fmap, cloud);
    switch (head) {
      case HeadVariant::kDisp: {
        Tensor u = displacement_from_raw(mlp.forward(lm), disp_bound_px);
        return add(shape_tensor(init), u);
      }
      case HeadVariant::kHeatmap: {
        Tensor u = heatmap_to_displacement(mlp.forward(lm), grid);
        return add(shape_tensor(init), u);
      }
      case HeadVariant::kShape:
        return shape_from_weights(shape_head.logits(lm), dict);
    }
    fail("predict_tensor: unknown head");
  }

  Shape predict_shape(const Tensor& fmap, const Shape& init,
                      Rng& rng) const {
    if (model == ModelVariant::kMeanShape) return mean;
    PointCloud cloud =
        expand_point_cloud(init, sigma_offset_px, rng, image_size);
    return shape_from_tensor(predict_tensor(fmap, init, cloud), mean);
  }

  // Head loss for one training sample (shape models).
  Tensor training_loss(const Sample& sample, const Shape& init,
                       const PointCloud& cloud) const {
    Tensor fmap = encode_image(sample.image);
    if (head == HeadVariant::kDisp) {
      Tensor lm = landmark_features(fmap, cloud);
      Tensor u = displacement_from_raw(mlp.forward(lm), disp_bound_px);
      return loss_disp(sample.landmarks, init, u, lambda_r);
    }
    return l2_shape_loss(predict_tensor(fmap, init, cloud), sample.landmarks);
  }

  Tensor predict_probs(const Image& img) const {
    return decoder(encode_image(img));
  }

  // -- serialization ---------------------------------------------------------

  void save(const std::string& path) const {
    NamedTensors entries;
    auto meta = [&entries](const std::string& name, double v) {
      entries.emplace_back("meta." + name, Tensor::scalar(v));
    };
    meta("schema", 1);
    meta("model", static_cast<double>(model));
    meta("head", static_cast<double>(head));
    meta("image_size", image_size);
    meta("feature_dim", feature_dim);
    meta("k_neighbors", k_neighbors);
    meta("n_layers", n_layers);
    meta("decoder_hidden", decoder_hidden);
    meta("sigma_offset_px", sigma_offset_px);
    meta("disp_bound_px", disp_bound_px);
    meta("lambda_r", lambda_r);
    meta("n_initial_shapes", n_initial_shapes);
    meta("seed", static_cast<double>(seed));
    meta("dict_size", head == HeadVariant::kShape ? dict.size() : 0);
    entries.emplace_back("baseline.mean_shape", shape_tensor(mean));
    if (is_shape_model() && head == HeadVariant::kShape)
      entries.emplace_back("dict.shapes", dict.stacked);
    auto params = trainable_params();
    entries.insert(entries.end(), params.begin(), params.end());
    save_tensors(path, entries);
  }

  static Pipeline load(const std::string& path, const Dataset& ds) {
    NamedTensors stored = load_tensors(path);
    auto find = [&stored, &path](const std::string& name) -> const Tensor& {
      for (const auto& [n, t] : stored)
        if (n == name) return t;
      io_fail(path + ": missing entry '" + name + "'");
    };
    auto meta = [&](const std::string& name) { return find("meta." + name).item(); };
    if (static_cast<int>(meta("schema")) != 1)
      io_fail(path + ": unsupported schema");
    ExperimentConfig cfg;
    cfg.model = static_cast<ModelVariant>(static_cast<int>(meta("model")));
    cfg.head = static_cast<HeadVariant>(static_cast<int>(meta("head")));
    cfg.lambda_r = meta("lambda_r");
    cfg.n_initial_shapes = static_cast<int>(meta("n_initial_shapes"));
    cfg.seeds = {static_cast<uint64_t>(meta("seed"))};
    ModelDefaults defaults;
    defaults.feature_dim = static_cast<int>(meta("feature_dim"));
    defaults.k_neighbors = static_cast<int>(meta("k_neighbors"));
    defaults.n_layers = static_cast<int>(meta("n_layers"));
    defaults.decoder_hidden = static_cast<int>(meta("decoder_hidden"));
    if (static_cast<int>(meta("image_size")) != ds.manifest.image_size)
      io_fail(path + ": weights were trained at image_size " +
              std::to_string(static_cast<int>(meta("image_size"))) +
              ", dataset has " + std::to_string(ds.manifest.image_size));

    Pipeline p = build(cfg, ds, defaults);
    p.sigma_offset_px = meta("sigma_offset_px");
    p.disp_bound_px = meta("disp_bound_px");
    p.grid = HeatmapGrid{11, p.disp_bound_px};

    const Tensor& mean_t = find("baseline.mean_shape");
    p.mean = shape_from_tensor(mean_t, p.mean);
    if (p.is_shape_model() && p.head == HeadVariant::kShape) {
      const Tensor& stacked = find("dict.shapes");
      int n = static_cast<int>(meta("dict_size"));
      require(stacked.rank() == 2 && stacked.dim(0) == n &&
                  stacked.dim(1) == p.mean.num_landmarks() * 2,
              path + ": dict.shapes has unexpected shape " +
                  dims_str(stacked.shape()));
      ShapeDictionary d;
      d.stacked = stacked;
      d.shapes.assign(static_cast<size_t>(n), p.mean);
      for (int i = 0; i < n; ++i)
        d.shapes[static_cast<size_t>(i)] = shape_from_tensor(
            slice_rows(reshape(stacked, {n * p.mean.num_landmarks(), 2}),
                       i * p.mean.num_landmarks(),
                       (i + 1) * p.mean.num_landmarks()),
            p.mean);
      p.dict = std::move(d);
    }
    load_into(stored, p.trainable_params());
    return p;
  }
};

// ---------------------------------------------------------------------------
// Evaluation

struct MetricSamples {
  std::vector<double> dsc;  // percent
  std::vector<double> asd;  // mm
};

struct EvalStats {
  std::vector<std::string> names;
  std::vector<int> landmark_counts;
  std::vector<MetricSamples> per_structure;
  MetricSamples overall;
};

inline double vec_mean(const std::vector<double>& v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double vec_sd(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  double m = vec_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size()));
}

inline double vec_median(std::vector<double> v) {
  require(!v.empty(), "median of empty vector");
  std::sort(v.begin(), v.end());
  size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

namespace detail {

// Boundary pixel centers of a mask (set pixels with an unset 4-neighbour or
// on the border).
inline std::vector<Vec2> mask_contour_points(const Mask& m) {
  std::vector<Vec2> pts;
  for (int y = 0; y < m.size; ++y)
    for (int x = 0; x < m.size; ++x) {
      if (!m.at(x, y)) continue;
      bool edge = x == 0 || y == 0 || x == m.size - 1 || y == m.size - 1 ||
                  !m.at(x - 1, y) || !m.at(x + 1, y) || !m.at(x, y - 1) ||
                  !m.at(x, y + 1);
      if (edge) pts.push_back({x + 0.5, y + 0.5});
    }
  return pts;
}

// ASD between a predicted mask and a ground-truth contour, in mm. The mask
// side contributes its boundary pixel centers. An empty prediction falls back
// to the image diagonal.
inline double asd_mask_vs_shape(const Mask& pred, const Shape& gt,
                                const std::string& structure) {
  const auto& sl = gt.slice(structure);
  std::vector<Vec2> contour(gt.points.begin() + sl.begin,
                            gt.points.begin() + sl.end);
  auto pts = mask_contour_points(pred);
  if (pts.empty())
    return pred.size * std::sqrt(2.0) * gt.spacing_mm;
  double fwd = 0.0;
  for (const auto& p : pts) fwd += point_polyline_distance(p, contour);
  fwd /= static_cast<double>(pts.size());
  double rev = 0.0;
  for (const auto& g : contour) {
    double best = std::numeric_limits<double>::infinity();
    for (const auto& p : pts) best = std::min(best, norm(g - p));
    rev += best;
  }
  rev /= static_cast<double>(contour.size());
  return 0.5 * (fwd + rev) * gt.spacing_mm;
}

inline void record_metrics(EvalStats& stats, const std::vector<double>& dsc,
                           const std::vector<double>& asd_mm) {
  double wsum = 0.0, dacc = 0.0, aacc = 0.0;
  for (size_t s = 0; s < stats.names.size(); ++s) {
    stats.per_structure[s].dsc.push_back(dsc[s]);
    stats.per_structure[s].asd.push_back(asd_mm[s]);
    double w = stats.landmark_counts[s];
    wsum += w;
    dacc += w * dsc[s];
    aacc += w * asd_mm[s];
  }
  stats.overall.dsc.push_back(dacc / wsum);
  stats.overall.asd.push_back(aacc / wsum);
}

}  // namespace detail

// Evaluates a model over the test split: every test image under
// n_initial_shapes random initial shapes (drawn from the training split);
// DSC via rasterization, ASD on landmarks, aggregated per structure and
// landmark-weighted overall. The pixel baseline thresholds at 0.5 and uses
// mask-contour ASD; it ignores initial shapes.
inline EvalStats evaluate_model(const Pipeline& p, const Dataset& ds,
                                int n_initial_shapes, Rng& rng,
                                const std::vector<Image>* test_images = nullptr) {
  require(n_initial_shapes >= 1, "evaluate: n_initial_shapes must be >= 1");
  EvalStats stats;
  for (const auto& [name, count] : ds.manifest.structures) {
    stats.names.push_back(name);
    stats.landmark_counts.push_back(count);
    stats.per_structure.push_back({});
  }
  auto train_shapes = ds.train_shapes();
  const int n_structures = static_cast<int>(stats.names.size());
  for (size_t ti = 0; ti < ds.manifest.test.size(); ++ti) {
    const Sample& sample =
        ds.samples[static_cast<size_t>(ds.manifest.test[ti])];
    const Image& img = test_images ? (*test_images)[ti] : sample.image;
    auto gt_masks = rasterize(sample.landmarks, ds.manifest.image_size);
    if (p.model == ModelVariant::kPixelBaseline) {
      Tensor probs = p.predict_probs(img);
      const auto& pv = probs.values();
      const int hw = ds.manifest.image_size * ds.manifest.image_size;
      std::vector<double> dsc(static_cast<size_t>(n_structures));
      std::vector<double> asd_mm(static_cast<size_t>(n_structures));
      for (int s = 0; s < n_structures; ++s) {
        Mask m;
        m.size = ds.manifest.image_size;
        m.bits.resize(static_cast<size_t>(hw));
        for (int i = 0; i < hw; ++i)
          m.bits[static_cast<size_t>(i)] =
              pv[static_cast<size_t>(s) * hw + i] > 0.5 ? 1 : 0;
        dsc[static_cast<size_t>(s)] =
            100.0 * dice(m, gt_masks[static_cast<size_t>(s)]);
        asd_mm[static_cast<size_t>(s)] = detail::asd_mask_vs_shape(
            m, sample.landmarks, stats.names[static_cast<size_t>(s)]);
      }
      detail::record_metrics(stats, dsc, asd_mm);
      continue;
    }
    Tensor fmap;
    if (p.model != ModelVariant::kMeanShape) fmap = p.encode_image(img);
    for (int init_i = 0; init_i < n_initial_shapes; ++init_i) {
      const Shape& init = train_shapes.size() >= 2
                              ? pick_initial_shape(train_shapes, rng, -1)
                              : train_shapes.front();
      Shape pred = p.predict_shape(fmap, init, rng);
      auto pred_masks = rasterize(pred, ds.manifest.image_size);
      std::vector<double> dsc(static_cast<size_t>(n_structures));
      std::vector<double> asd_mm(static_cast<size_t>(n_structures));
      for (int s = 0; s < n_structures; ++s) {
        dsc[static_cast<size_t>(s)] =
            100.0 * dice(pred_masks[static_cast<size_t>(s)],
                         gt_masks[static_cast<size_t>(s)]);
        asd_mm[static_cast<size_t>(s)] =
            asd(pred, sample.landmarks, stats.names[static_cast<size_t>(s)]);
      }
      detail::record_metrics(stats, dsc, asd_mm);
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Reports

struct StructStats {
  std::string name;
  int landmarks = 0;
  double dsc_mean = 0, dsc_sd = 0;
  double asd_mean = 0, asd_sd = 0;
};

struct RunReport {
  std::vector<StructStats> structures;
  StructStats overall;
  std::vector<double> loss_history;
  std::vector<double> val_loss_history;
  std::vector<double> lr_history;
  double wall_time_sec = 0.0;  // printed, never serialized: report files must
                               // be bit-identical across reruns
};

inline RunReport make_report(const EvalStats& stats) {
  RunReport r;
  for (size_t s = 0; s < stats.names.size(); ++s) {
    StructStats st;
    st.name = stats.names[s];
    st.landmarks = stats.landmark_counts[s];
    st.dsc_mean = vec_mean(stats.per_structure[s].dsc);
    st.dsc_sd = vec_sd(stats.per_structure[s].dsc);
    st.asd_mean = vec_mean(stats.per_structure[s].asd);
    st.asd_sd = vec_sd(stats.per_structure[s].asd);
    r.structures.push_back(st);
    r.overall.landmarks += st.landmarks;
  }
  r.overall.name = "average";
  r.overall.dsc_mean = vec_mean(stats.overall.dsc);
  r.overall.dsc_sd = vec_sd(stats.overall.dsc);
  r.overall.asd_mean = vec_mean(stats.overall.asd);
  r.overall.asd_sd = vec_sd(stats.overall.asd);
  return r;
}

inline nlohmann::json report_to_json(const RunReport& r) {
  auto stats_json = [](const StructStats& s) {
    return nlohmann::json{{"name", s.name},
                          {"landmarks", s.landmarks},
                          {"dsc_mean", s.dsc_mean},
                          {"dsc_sd", s.dsc_sd},
                          {"asd_mean", s.asd_mean},
                          {"asd_sd", s.asd_sd}};
  };
  nlohmann::json j;
  nlohmann::json structures = nlohmann::json::array();
  for (const auto& s : r.structures) structures.push_back(stats_json(s));
  j["structures"] = structures;
  j["overall"] = stats_json(r.overall);
  j["loss_history"] = r.loss_history;
  j["val_loss_history"] = r.val_loss_history;
  j["lr_history"] = r.lr_history;
  return j;
}

inline void write_report(const RunReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) io_fail(path + ": cannot open for writing");
  os << report_to_json(r).dump(2) << "\n";
}

inline void write_history_csv(const RunReport& r, const std::string& path) {
  std::ofstream os(path);
  if (!os) io_fail(path + ": cannot open for writing");
  os << "epoch,train_loss,val_loss,lr\n";
  for (size_t e = 0; e < r.loss_history.size(); ++e) {
    os << e << "," << detail::format_double(r.loss_history[e]) << ","
       << detail::format_double(e < r.val_loss_history.size()
                                    ? r.val_loss_history[e]
                                    : 0.0)
       << ","
       << detail::format_double(e < r.lr_history.size() ? r.lr_history[e]
                                                        : 0.0)
       << "\n";
  }
}

// ---------------------------------------------------------------------------
// Training

struct TrainResult {
  Pipeline pipeline;
  RunReport report;
};

inline constexpr uint64_t kEvalStream = 0xE7A1;
inline constexpr uint64_t kTrainStream = 0x7121;
inline constexpr uint64_t kValStream = 0x5A1D;

// Pixel-baseline target masks and class-imbalance weights over the training
// split: pos_weight per structure = (negative pixels) / (positive pixels).
namespace detail {

struct PixelTargets {
  std::vector<std::vector<Tensor>> masks;  // [train position][structure] {1,HW}
  std::vector<double> pos_weights;
};

inline PixelTargets pixel_targets(const Dataset& ds) {
  PixelTargets t;
  const int size = ds.manifest.image_size;
  const int hw = size * size;
  const int n_structures = static_cast<int>(ds.manifest.structures.size());
  std::vector<long long> pos(static_cast<size_t>(n_structures), 0);
  t.masks.reserve(ds.manifest.train.size());
  for (int idx : ds.manifest.train) {
    auto masks = rasterize(ds.samples[static_cast<size_t>(idx)].landmarks, size);
    std::vector<Tensor> row;
    for (int s = 0; s < n_structures; ++s) {
      std::vector<double> m(static_cast<size_t>(hw));
      for (int i = 0; i < hw; ++i) {
        m[static_cast<size_t>(i)] = masks[static_cast<size_t>(s)].bits[static_cast<size_t>(i)];
        pos[static_cast<size_t>(s)] += masks[static_cast<size_t>(s)].bits[static_cast<size_t>(i)];
      }
      row.push_back(Tensor::from({1, hw}, std::move(m)));
    }
    t.masks.push_back(std::move(row));
  }
  long long total = static_cast<long long>(ds.manifest.train.size()) * hw;
  for (int s = 0; s < n_structures; ++s) {
    long long p = pos[static_cast<size_t>(s)];
    t.pos_weights.push_back(p > 0 && p < total
                                ? static_cast<double>(total - p) / p
                                : 1.0);
  }
  return t;
}

}  // namespace detail

inline Tensor pixel_training_loss(const Pipeline& p, const Image& img,
                                  const std::vector<Tensor>& target_masks,
                                  const std::vector<double>& pos_weights) {
  Tensor probs = p.predict_probs(img);
  const int n_structures = probs.dim(0);
  const int hw = probs.dim(1) * probs.dim(2);
  Tensor flat = reshape(probs, {n_structures, hw});
  Tensor total;
  for (int s = 0; s < n_structures; ++s) {
    Tensor l = weighted_bce(slice_rows(flat, s, s + 1),
                            target_masks[static_cast<size_t>(s)],
                            pos_weights[static_cast<size_t>(s)]);
    total = s == 0 ? l : add(total, l);
  }
  return mul_scalar(total, 1.0 / n_structures);
}

// Trains per the experiment config: batch size 1, Adam, plateau schedule on
// the validation loss (a fixed 10% subset of the training split evaluated
// with frozen initial shapes and clouds), then evaluates on the test split.
// Deterministic given (config, seeds).
inline TrainResult train(const ExperimentConfig& cfg, const Dataset& ds) {
  cfg.validate();
  auto t0 = std::chrono::steady_clock::now();
  TrainResult result{Pipeline::build(cfg, ds), {}};
  Pipeline& p = result.pipeline;

  if (cfg.model != ModelVariant::kMeanShape) {
    auto train_shapes = ds.train_shapes();
    const int n_train = static_cast<int>(ds.manifest.train.size());
    Rng train_rng(Rng::mix(p.seed, kTrainStream));

    // pixel-baseline targets
    detail::PixelTargets targets;
    if (cfg.model == ModelVariant::kPixelBaseline)
      targets = detail::pixel_targets(ds);

    // validation subset: fixed 10% of the training split (at least one
    // sample), with initial shapes and clouds frozen at setup
    const int n_val = std::max(1, n_train / 10);
    std::vector<int> val_pos;
    for (int i = n_train - n_val; i < n_train; ++i) val_pos.push_back(i);
    Rng val_rng(Rng::mix(p.seed, kValStream));
    std::vector<std::pair<int, PointCloud>> val_clouds;  // (init index, cloud)
    if (p.is_shape_model())
      for (int pos : val_pos) {
        int init_idx = pos;
        if (n_train > 1) {
          init_idx = val_rng.uniform_int(n_train - 1);
          if (init_idx >= pos) ++init_idx;
        }
        val_clouds.emplace_back(
            init_idx,
            expand_point_cloud(train_shapes[static_cast<size_t>(init_idx)],
                               p.sigma_offset_px, val_rng, p.image_size));
      }

    auto params = p.trainable_params();
    std::vector<Tensor> tensors;
    tensors.reserve(params.size());
    for (auto& [name, t] : params) tensors.push_back(t);
    Adam opt(tensors, cfg.lr);
    PlateauScheduler sched(cfg.lr_factor, cfg.patience);

    std::vector<int> order(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; ++i) order[static_cast<size_t>(i)] = i;

    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
      // deterministic shuffle of the per-sample update order
      for (int i = n_train - 1; i > 0; --i)
        std::swap(order[static_cast<size_t>(i)],
                  order[static_cast<size_t>(train_rng.uniform_int(i + 1))]);
      double epoch_loss = 0.0;
      for (int pos : order) {
        const Sample& sample =
            ds.samples[static_cast<size_t>(ds.manifest.train[static_cast<size_t>(pos)])];
        Tensor loss;
        if (p.is_shape_model()) {
          const Shape& init =
              n_train > 1 ? pick_initial_shape(train_shapes, train_rng, pos)
                          : sample.landmarks;
          PointCloud cloud = expand_point_cloud(init, p.sigma_offset_px,
                                                train_rng, p.image_size);
          loss = p.training_loss(sample, init, cloud);
        } else {
          loss = pixel_training_loss(p, sample.image,
                                     targets.masks[static_cast<size_t>(pos)],
                                     targets.pos_weights);
        }
        double lv = loss.item();
        if (!std::isfinite(lv))
          io_fail("train: non-finite loss at epoch " + std::to_string(epoch) +
                  ", train sample " +
                  std::to_string(ds.manifest.train[static_cast<size_t>(pos)]));
        backward(loss);
        opt.step();
        opt.zero_grad();
        epoch_loss += lv;
      }
      epoch_loss /= n_train;

      // validation loss with frozen picks
      double val_loss = 0.0;
      for (size_t vi = 0; vi < val_pos.size(); ++vi) {
        const Sample& sample = ds.samples[static_cast<size_t>(
            ds.manifest.train[static_cast<size_t>(val_pos[vi])])];
        if (p.is_shape_model()) {
          const auto& [init_idx, cloud] = val_clouds[vi];
          val_loss += p.training_loss(
                           sample, train_shapes[static_cast<size_t>(init_idx)],
                           cloud)
                          .item();
        } else {
          val_loss += pixel_training_loss(
                          p, sample.image,
                          targets.masks[static_cast<size_t>(val_pos[vi])],
                          targets.pos_weights)
                          .item();
        }
      }
      val_loss /= static_cast<double>(val_pos.size());

      if (sched.update(val_loss)) opt.set_lr(opt.lr() * cfg.lr_factor);
      result.report.loss_history.push_back(epoch_loss);
      result.report.val_loss_history.push_back(val_loss);
      result.report.lr_history.push_back(opt.lr());
    }
  }

  Rng eval_rng(Rng::mix(p.seed, kEvalStream));
  EvalStats stats = evaluate_model(p, ds, cfg.n_initial_shapes, eval_rng);
  auto histories = std::move(result.report);
  result.report = make_report(stats);
  result.report.loss_history = std::move(histories.loss_history);
  result.report.val_loss_history = std::move(histories.val_loss_history);
  result.report.lr_history = std::move(histories.lr_history);
  result.report.wall_time_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
          .count();
  return result;
}

// Standalone evaluation (CLI `evaluate`): deterministic given the stored seed.
inline RunReport evaluate_to_report(const Pipeline& p, const Dataset& ds) {
  Rng rng(Rng::mix(p.seed, kEvalStream));
  return make_report(evaluate_model(p, ds, p.n_initial_shapes, rng));
}

// ---------------------------------------------------------------------------
// Corruption ablation

struct AblationRow {
  std::string model;
  double fraction = 0.0;
  uint64_t seed = 0;
  double dsc_abs = 0.0;
  double dsc_rel = 0.0;
  double asd_mm = 0.0;
};

inline std::vector<double> default_fractions() {
  std::vector<double> f;
  for (int i = 0; i <= 10; ++i) f.push_back(i / 10.0);
  return f;
}

inline std::vector<uint64_t> default_corruption_seeds() { return {1, 2, 3}; }

// Sweeps the occlusion fraction over every model. Corruption masks are drawn
// per (fraction, seed) and shared across models; evaluation rng is re-seeded
// from each model's stored seed so initial shapes match the clean baseline
// and fraction 0 reproduces it exactly.
inline std::vector<AblationRow> ablate(
    const std::vector<std::pair<std::string, const Pipeline*>>& models,
    const Dataset& ds,
    const std::vector<double>& fractions = default_fractions(),
    const std::vector<uint64_t>& corruption_seeds = default_corruption_seeds()) {
  require(!models.empty(), "ablate: no models");
  std::vector<double> baseline_dsc;
  for (const auto& [name, p] : models) {
    Rng rng(Rng::mix(p->seed, kEvalStream));
    EvalStats stats = evaluate_model(*p, ds, p->n_initial_shapes, rng);
    baseline_dsc.push_back(vec_mean(stats.overall.dsc));
  }
  std::vector<AblationRow> rows;
  for (size_t fi = 0; fi < fractions.size(); ++fi) {
    double fraction = fractions[fi];
    for (uint64_t cseed : corruption_seeds) {
      Rng crng(Rng::mix(cseed, 0xC0DE + fi));
      std::vector<Image> corrupted;
      corrupted.reserve(ds.manifest.test.size());
      for (int idx : ds.manifest.test)
        corrupted.push_back(corrupt_mask(
            ds.samples[static_cast<size_t>(idx)].image, fraction, crng));
      for (size_t mi = 0; mi < models.size(); ++mi) {
        const auto& [name, p] = models[mi];
        Rng rng(Rng::mix(p->seed, kEvalStream));
        EvalStats stats =
            evaluate_model(*p, ds, p->n_initial_shapes, rng, &corrupted);
        AblationRow row;
        row.model = name;
        row.fraction = fraction;
        row.seed = cseed;
        row.dsc_abs = vec_mean(stats.overall.dsc);
        row.dsc_rel = baseline_dsc[mi] > 0 ? row.dsc_abs / baseline_dsc[mi] : 0.0;
        row.asd_mm = vec_mean(stats.overall.asd);
        rows.push_back(row);
      }
    }
  }
  return rows;
}

inline void write_ablation_csv(const std::vector<AblationRow>& rows,
                               const std::string& path) {
  std::ofstream os(path);
  if (!os) io_fail(path + ": cannot open for writing");
  os << "model,fraction,seed,dsc_abs,dsc_rel,asd_mm\n";
  for (const auto& r : rows)
    os << r.model << "," << detail::format_double(r.fraction) << "," << r.seed
       << "," << detail::format_double(r.dsc_abs) << ","
       << detail::format_double(r.dsc_rel) << ","
       << detail::format_double(r.asd_mm) << "\n";
}

}  // namespace shapereg
