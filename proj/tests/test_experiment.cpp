#include <catch2/catch_amalgamated.hpp>

#include <filesystem>

#include "shapereg/experiment.hpp"

using namespace shapereg;
using Catch::Approx;

namespace {

SyntheticConfig tiny_data_config() {
  SyntheticConfig cfg;
  cfg.image_size = 32;
  cfg.landmarks_per_structure = 6;
  cfg.n_structures = 2;
  cfg.n_train = 5;
  cfg.n_test = 2;
  return cfg;
}

ExperimentConfig tiny_train_config() {
  ExperimentConfig cfg;
  cfg.model = ModelVariant::kPointTransformer;
  cfg.head = HeadVariant::kDisp;
  cfg.epochs = 2;
  cfg.n_initial_shapes = 2;
  cfg.seeds = {5};
  return cfg;
}

}  // namespace

TEST_CASE("adam leaves parameters unchanged for zero gradients",
          "[experiment]") {
  std::vector<double> p = {1.0, -2.0, 3.0};
  std::vector<double> g = {0.0, 0.0, 0.0};
  std::vector<double> m(3, 0.0), v(3, 0.0);
  adam_step(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1);
  CHECK(p == std::vector<double>{1.0, -2.0, 3.0});
}

TEST_CASE("adam first step moves by about lr", "[experiment]") {
  for (double g0 : {0.5, -3.0, 40.0}) {
    std::vector<double> p = {1.0};
    std::vector<double> g = {g0};
    std::vector<double> m(1, 0.0), v(1, 0.0);
    adam_step(p, g, m, v, 1e-3, 0.9, 0.999, 1e-8, 1);
    CHECK(std::abs(p[0] - 1.0) == Approx(1e-3).epsilon(1e-6));
    CHECK((g0 > 0 ? p[0] < 1.0 : p[0] > 1.0));
  }
}

TEST_CASE("adam is deterministic and rejects non-finite grads",
          "[experiment]") {
  std::vector<double> p1 = {0.3, 0.7}, p2 = p1;
  std::vector<double> g = {0.1, -0.2};
  std::vector<double> m1(2, 0), v1(2, 0), m2(2, 0), v2(2, 0);
  adam_step(p1, g, m1, v1, 1e-2, 0.9, 0.999, 1e-8, 1);
  adam_step(p2, g, m2, v2, 1e-2, 0.9, 0.999, 1e-8, 1);
  CHECK(p1 == p2);

  std::vector<double> bad = {std::nan(""), 0.0};
  CHECK_THROWS_AS(adam_step(p1, bad, m1, v1, 1e-2, 0.9, 0.999, 1e-8, 2),
                  std::invalid_argument);
}

TEST_CASE("plateau scheduler counter arithmetic", "[experiment]") {
  // strictly decreasing: no reductions
  std::vector<double> decreasing;
  for (int i = 0; i < 100; ++i) decreasing.push_back(100.0 - i);
  CHECK(plateau_events(decreasing, 30, 0.1).empty());

  // constant for 61 epochs: exactly two reductions
  std::vector<double> constant(61, 5.0);
  auto events = plateau_events(constant, 30, 0.1);
  REQUIRE(events.size() == 2);
  CHECK(events[0] == 30);
  CHECK(events[1] == 60);

  // improvement at epoch 29 resets the counter
  std::vector<double> improv(60, 5.0);
  improv[28] = 4.0;  // 0-based epoch 28 = "epoch 29"
  auto events2 = plateau_events(improv, 30, 0.1);
  REQUIRE(events2.size() == 1);
  CHECK(events2[0] == 58);  // 30 stagnant epochs after the reset

  CHECK_THROWS_AS(PlateauScheduler(1.5, 30), std::invalid_argument);
}

TEST_CASE("training overfits a single-sample dataset", "[experiment]") {
  SyntheticConfig dcfg = tiny_data_config();
  dcfg.n_train = 1;
  dcfg.n_test = 1;
  Dataset ds = generate_synthetic(dcfg, 3);

  ExperimentConfig cfg = tiny_train_config();
  cfg.epochs = 200;
  cfg.n_initial_shapes = 1;
  auto result = train(cfg, ds);
  REQUIRE(result.report.loss_history.size() == 200);
  CHECK(result.report.loss_history.back() <
        0.05 * result.report.loss_history.front());
}

TEST_CASE("training is deterministic given config and seed", "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 5);
  ExperimentConfig cfg = tiny_train_config();
  auto r1 = train(cfg, ds);
  auto r2 = train(cfg, ds);
  CHECK(r1.report.loss_history == r2.report.loss_history);
  CHECK(r1.report.val_loss_history == r2.report.val_loss_history);
  CHECK(report_to_json(r1.report).dump() == report_to_json(r2.report).dump());
}

TEST_CASE("mean_shape variant trains nothing and reports directly",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 7);
  ExperimentConfig cfg = tiny_train_config();
  cfg.model = ModelVariant::kMeanShape;
  auto result = train(cfg, ds);
  CHECK(result.report.loss_history.empty());
  CHECK(result.report.lr_history.empty());
  CHECK(result.report.overall.dsc_mean > 0.0);
}

TEST_CASE("mean shape on a degenerate dataset scores perfectly",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 9);
  // overwrite every sample with one canonical sample: mean == ground truth
  for (auto& s : ds.samples) s = ds.samples[0];
  ExperimentConfig cfg = tiny_train_config();
  cfg.model = ModelVariant::kMeanShape;
  auto result = train(cfg, ds);
  CHECK(result.report.overall.dsc_mean == Approx(100.0).margin(1e-9));
  CHECK(result.report.overall.asd_mean == Approx(0.0).margin(1e-12));
}

TEST_CASE("mean shape evaluation ignores the initial-shape count",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 11);
  ExperimentConfig cfg = tiny_train_config();
  cfg.model = ModelVariant::kMeanShape;
  Pipeline p = Pipeline::build(cfg, ds);
  Rng r1(Rng::mix(p.seed, kEvalStream)), r2(Rng::mix(p.seed, kEvalStream));
  auto one = evaluate_model(p, ds, 1, r1);
  auto five = evaluate_model(p, ds, 5, r2);
  CHECK(vec_mean(one.overall.dsc) == Approx(vec_mean(five.overall.dsc)).margin(1e-12));
  CHECK(vec_mean(one.overall.asd) == Approx(vec_mean(five.overall.asd)).margin(1e-12));
}

TEST_CASE("report aggregation is internally consistent", "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 13);
  ExperimentConfig cfg = tiny_train_config();
  auto result = train(cfg, ds);
  double wsum = 0.0, acc = 0.0;
  for (const auto& s : result.report.structures) {
    wsum += s.landmarks;
    acc += s.landmarks * s.dsc_mean;
  }
  CHECK(result.report.overall.dsc_mean == Approx(acc / wsum).margin(1e-9));
}

TEST_CASE("pipeline save/load round trip preserves predictions",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 15);
  for (HeadVariant head :
       {HeadVariant::kDisp, HeadVariant::kHeatmap, HeadVariant::kShape}) {
    ExperimentConfig cfg = tiny_train_config();
    cfg.head = head;
    cfg.epochs = 1;
    auto result = train(cfg, ds);
    auto path = (std::filesystem::temp_directory_path() /
                 ("shapereg_pipe_" + to_string(head) + ".bin"))
                    .string();
    result.pipeline.save(path);
    Pipeline loaded = Pipeline::load(path, ds);
    RunReport a = evaluate_to_report(result.pipeline, ds);
    RunReport b = evaluate_to_report(loaded, ds);
    CHECK(report_to_json(a).dump() == report_to_json(b).dump());
    std::filesystem::remove(path);
  }
}

TEST_CASE("ablation at fraction zero reproduces the plain evaluation",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 17);
  ExperimentConfig cfg = tiny_train_config();
  auto trained = train(cfg, ds);
  ExperimentConfig mcfg = cfg;
  mcfg.model = ModelVariant::kMeanShape;
  Pipeline mean_pipe = Pipeline::build(mcfg, ds);

  std::vector<std::pair<std::string, const Pipeline*>> models = {
      {"pt_disp", &trained.pipeline}, {"mean_shape", &mean_pipe}};
  auto rows = ablate(models, ds, {0.0, 0.5, 1.0}, {1, 2});

  REQUIRE(rows.size() == 3 * 2 * 2);
  Rng rng(Rng::mix(trained.pipeline.seed, kEvalStream));
  auto plain = evaluate_model(trained.pipeline, ds,
                              trained.pipeline.n_initial_shapes, rng);
  for (const auto& row : rows) {
    if (row.fraction == 0.0 && row.model == "pt_disp") {
      CHECK(row.dsc_abs == vec_mean(plain.overall.dsc));
      CHECK(row.dsc_rel == 1.0);
    }
    if (row.model == "mean_shape") {
      CHECK(row.dsc_rel == 1.0);  // image-independent across all fractions
    }
  }
}

TEST_CASE("fully masked images make predictions input-independent",
          "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 19);
  ExperimentConfig cfg = tiny_train_config();
  cfg.epochs = 1;
  auto trained = train(cfg, ds);
  const Pipeline& p = trained.pipeline;

  Rng crng(33);
  Image masked1 = corrupt_mask(ds.samples[5].image, 1.0, crng);
  Image masked2 = corrupt_mask(ds.samples[6].image, 1.0, crng);
  const Shape& init = ds.samples[0].landmarks;
  Rng o1(77), o2(77);  // identical offset draws
  Shape pred1 = p.predict_shape(p.encode_image(masked1), init, o1);
  Shape pred2 = p.predict_shape(p.encode_image(masked2), init, o2);
  for (size_t i = 0; i < pred1.points.size(); ++i) {
    CHECK(pred1.points[i].x == pred2.points[i].x);
    CHECK(pred1.points[i].y == pred2.points[i].y);
  }
}

TEST_CASE("experiment config json honors defaults and rejects unknown keys",
          "[experiment]") {
  nlohmann::json j = {{"model", "pointnet"}, {"head", "heatmap"},
                      {"lr", 0.005},         {"epochs", 3},
                      {"seeds", {9, 10}},    {"n_initial_shapes", 2}};
  ExperimentConfig cfg = experiment_config_from_json(j);
  CHECK(cfg.model == ModelVariant::kPointNet);
  CHECK(cfg.head == HeadVariant::kHeatmap);
  CHECK(cfg.lr == 0.005);
  CHECK(cfg.epochs == 3);
  CHECK(cfg.master_seed() == 9);
  CHECK(cfg.patience == 30);   // default
  CHECK(cfg.lambda_r == 0.2);  // default

  nlohmann::json bad = {{"model", "pointnet"}, {"learning_rate", 0.01}};
  CHECK_THROWS_AS(experiment_config_from_json(bad), std::invalid_argument);

  nlohmann::json invalid = {{"lr", -1.0}};
  CHECK_THROWS_AS(experiment_config_from_json(invalid), std::invalid_argument);
}

TEST_CASE("pixel baseline trains and evaluates", "[experiment]") {
  Dataset ds = generate_synthetic(tiny_data_config(), 21);
  ExperimentConfig cfg = tiny_train_config();
  cfg.model = ModelVariant::kPixelBaseline;
  cfg.epochs = 2;
  auto result = train(cfg, ds);
  CHECK(result.report.loss_history.size() == 2);
  CHECK(result.report.overall.dsc_mean >= 0.0);
  CHECK(result.report.overall.asd_mean >= 0.0);
}
