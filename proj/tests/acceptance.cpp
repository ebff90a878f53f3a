// Acceptance suite: runs every gate end to end and prints one line per
// criterion. Training criteria use the 64x64 synthetic benchmark (L=48,
// 160 train / 40 test) and fixed seeds throughout.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "shapereg/experiment.hpp"

#include "grad_suite.hpp"
#include "oracles.hpp"

using namespace shapereg;
namespace fs = std::filesystem;

namespace {

int failures = 0;

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0)
      .count();
}

void report(int id, bool pass, const std::string& label,
            const std::string& detail) {
  if (!pass) ++failures;
  std::printf("[%s] criterion %d: %s (%s)\n", pass ? "PASS" : "FAIL", id,
              label.c_str(), detail.c_str());
  std::fflush(stdout);
}

void report_soft(int id, const std::string& label, const std::string& detail) {
  std::printf("[REPORT] criterion %d: %s (%s)\n", id, label.c_str(),
              detail.c_str());
  std::fflush(stdout);
}

std::string fmt(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.4g", v);
  return buf;
}

// --- criterion 1: gradient suite -------------------------------------------

void criterion_gradients() {
  auto t0 = std::chrono::steady_clock::now();
  double worst = 0.0;
  std::string worst_name = "-";
  Rng rng(20240001);
  for (const auto& entry : gradsuite::entries()) {
    for (int seed_i = 0; seed_i < 10; ++seed_i) {
      double err = entry.run(rng);
      if (err > worst) {
        worst = err;
        worst_name = entry.name;
      }
    }
  }
  double elapsed = seconds_since(t0);
  bool pass = worst < 1e-4 && elapsed < 60.0;
  report(1, pass, "gradient suite < 1e-4 on 10 seeds per op",
         "worst " + fmt(worst) + " at " + worst_name + ", " + fmt(elapsed) +
             " s");
}

// --- criterion 2: metric oracles --------------------------------------------

void criterion_metric_oracles() {
  auto t0 = std::chrono::steady_clock::now();

  Rng rng(20240002);
  int raster_mismatch = 0;
  for (int trial = 0; trial < 100; ++trial) {
    auto poly = oracle::random_star_polygon(rng, 24, trial % 2 == 0);
    if (rasterize_contour(poly, 24).bits != oracle::rasterize(poly, 24).bits)
      ++raster_mismatch;
  }

  double dice_err = 0.0;
  for (int trial = 0; trial < 25; ++trial) {
    auto pa = oracle::random_star_polygon(rng, 32, false);
    auto pb = oracle::random_star_polygon(rng, 32, false);
    Mask ma = rasterize_contour(pa, 32), mb = rasterize_contour(pb, 32);
    dice_err = std::max(dice_err, std::abs(dice(ma, mb) - oracle::dice(ma, mb)));
  }

  double asd_err = 0.0;
  for (int trial = 0; trial < 20; ++trial) {
    auto pa = oracle::random_star_polygon(rng, 32, trial % 2 == 0);
    auto pb = pa;
    double dx = rng.uniform(2.0, 5.0), dy = rng.uniform(-3.0, 3.0);
    for (auto& p : pb) {
      p.x += dx;
      p.y += dy;
    }
    Shape a, b;
    a.points = pa;
    a.slices = {{"s", 0, static_cast<int>(pa.size())}};
    a.spacing_mm = 0.175;
    b.points = pb;
    b.slices = a.slices;
    b.spacing_mm = 0.175;
    asd_err = std::max(
        asd_err, std::abs(asd(a, b, "s") - oracle::ternary_asd(pa, pb, 0.175)));
  }

  double elapsed = seconds_since(t0);
  bool pass = raster_mismatch == 0 && dice_err < 1e-6 && asd_err < 1e-6 &&
              elapsed < 60.0;
  report(2, pass, "rasterize exact on 100 polygons; dice/asd vs oracles < 1e-6",
         "mismatches " + std::to_string(raster_mismatch) + ", dice err " +
             fmt(dice_err) + ", asd err " + fmt(asd_err) + ", " +
             fmt(elapsed) + " s");
}

// --- criterion 3: head invariants -------------------------------------------

void criterion_head_invariants() {
  HeatmapGrid grid;  // [-22, 22], 11 x 11
  Rng rng(20240003);
  bool bounded = true;
  const int draws = 100000;
  for (int i = 0; i < draws && bounded; ++i) {
    Tensor logits = Tensor::randn({1, grid.points()}, rng, 40.0);
    Tensor u = heatmap_to_displacement(logits, grid);
    for (double v : u.values()) bounded = bounded && v >= -22.0 && v <= 22.0;
  }

  // shape head: uniform logits -> mean shape; saturated logits -> entry n
  std::vector<Shape> shapes;
  Rng srng(20240004);
  for (int n = 0; n < 6; ++n) {
    Shape s;
    s.spacing_mm = 1.0;
    for (int i = 0; i < 5; ++i)
      s.points.push_back(
          {srng.uniform(5.0, 50.0), srng.uniform(5.0, 50.0)});
    s.slices = {{"s", 0, 5}};
    shapes.push_back(s);
  }
  auto dict = ShapeDictionary::build(shapes);
  Shape mean = mean_shape(shapes);
  double uniform_err = 0.0;
  Tensor uniform_t = shape_from_weights(Tensor::zeros({6}), dict);
  const auto& uniform_pred = uniform_t.values();
  for (int i = 0; i < 5; ++i) {
    uniform_err = std::max(uniform_err,
                           std::abs(uniform_pred[(size_t)i * 2] - mean.points[(size_t)i].x));
    uniform_err =
        std::max(uniform_err, std::abs(uniform_pred[(size_t)i * 2 + 1] -
                                       mean.points[(size_t)i].y));
  }
  double sat_err = 0.0;
  for (int n = 0; n < 6; ++n) {
    std::vector<double> logits(6, 0.0);
    logits[(size_t)n] = 50.0;
    Tensor pred_t = shape_from_weights(Tensor::from({6}, logits), dict);
    const auto& pred = pred_t.values();
    for (int i = 0; i < 5; ++i) {
      sat_err = std::max(sat_err, std::abs(pred[(size_t)i * 2] -
                                           shapes[(size_t)n].points[(size_t)i].x));
      sat_err = std::max(sat_err, std::abs(pred[(size_t)i * 2 + 1] -
                                           shapes[(size_t)n].points[(size_t)i].y));
    }
  }

  // loss_disp trivial cases, exact
  Shape init, star;
  init.spacing_mm = star.spacing_mm = 1.0;
  init.points = {{1, 1}, {5, 2}, {3, 7}, {2, 4}};
  star.points = {{2, 2}, {6, 1}, {5, 8}, {1, 3}};
  init.slices = star.slices = {{"s", 0, 4}};
  std::vector<double> gap;
  for (int i = 0; i < 4; ++i) {
    gap.push_back(star.points[(size_t)i].x - init.points[(size_t)i].x);
    gap.push_back(star.points[(size_t)i].y - init.points[(size_t)i].y);
  }
  bool exact_zero_data =
      loss_disp(star, init, Tensor::from({4, 2}, gap), 0.0).item() == 0.0;
  bool exact_zero_smooth =
      loss_disp(star, init,
                Tensor::from({4, 2}, {3, -2, 3, -2, 3, -2, 3, -2}), 1.0)
          .item() == 0.0;

  bool pass = bounded && uniform_err < 1e-6 && sat_err < 1e-6 &&
              exact_zero_data && exact_zero_smooth;
  report(3, pass, "head invariants (bounds, saturation, exact zeros)",
         std::string("bounded=") + (bounded ? "yes" : "no") + ", uniform err " +
             fmt(uniform_err) + ", saturation err " + fmt(sat_err) +
             ", exact zeros " +
             ((exact_zero_data && exact_zero_smooth) ? "yes" : "no"));
}

// --- criteria 4-7: the synthetic benchmark ----------------------------------

struct Benchmark {
  Dataset dataset;
  ExperimentConfig pt_config;
  TrainResult pt;         // point transformer + displacement head
  TrainResult mean_base;  // image-independent baseline
  fs::path workdir;
};

ExperimentConfig benchmark_config(ModelVariant model) {
  ExperimentConfig cfg;
  cfg.model = model;
  cfg.head = HeadVariant::kDisp;
  cfg.lambda_r = 0.2;
  cfg.lr = 1e-3;
  cfg.epochs = 30;
  cfg.patience = 30;
  cfg.seeds = {20240042};
  cfg.n_initial_shapes = 5;
  return cfg;
}

Benchmark criterion_end_to_end() {
  Benchmark bench;
  bench.workdir = fs::temp_directory_path() / "shapereg_acceptance";
  fs::create_directories(bench.workdir);

  auto t0 = std::chrono::steady_clock::now();
  SyntheticConfig data_cfg;  // 64x64, 3 structures x 16 landmarks, 160/40
  bench.dataset = generate_synthetic(data_cfg, 20240042);

  bench.pt_config = benchmark_config(ModelVariant::kPointTransformer);
  bench.pt = train(bench.pt_config, bench.dataset);
  bench.mean_base =
      train(benchmark_config(ModelVariant::kMeanShape), bench.dataset);

  double elapsed = seconds_since(t0);
  double dsc_pt = bench.pt.report.overall.dsc_mean;
  double dsc_mean = bench.mean_base.report.overall.dsc_mean;
  double asd_pt = bench.pt.report.overall.asd_mean;
  double asd_mean = bench.mean_base.report.overall.asd_mean;
  bool pass = dsc_pt >= dsc_mean + 10.0 && asd_pt < asd_mean &&
              elapsed <= 30.0 * 60.0;
  report(4, pass,
         "point transformer beats the mean-shape baseline by >= 10 DSC",
         "DSC " + fmt(dsc_pt) + " vs " + fmt(dsc_mean) + ", ASD " +
             fmt(asd_pt) + " vs " + fmt(asd_mean) + " mm, " + fmt(elapsed) +
             " s");

  write_report(bench.pt.report, (bench.workdir / "report.json").string());
  return bench;
}

void criterion_robustness(const Benchmark& bench) {
  auto t0 = std::chrono::steady_clock::now();
  ExperimentConfig px_cfg = benchmark_config(ModelVariant::kPixelBaseline);
  TrainResult pixel = train(px_cfg, bench.dataset);

  std::vector<std::pair<std::string, const Pipeline*>> models = {
      {"point_transformer", &bench.pt.pipeline},
      {"pixel_baseline", &pixel.pipeline},
      {"mean_shape", &bench.mean_base.pipeline}};
  auto rows = ablate(models, bench.dataset);
  write_ablation_csv(rows, (bench.workdir / "ablation.csv").string());

  auto median_rel = [&rows](const std::string& model, double fraction) {
    std::vector<double> vals;
    for (const auto& r : rows)
      if (r.model == model && r.fraction == fraction) vals.push_back(r.dsc_rel);
    return vec_median(vals);
  };

  bool shape_dominates = true;
  std::ostringstream curve;
  for (double f : {0.5, 0.6, 0.7, 0.8, 0.9, 1.0}) {
    double pt = median_rel("point_transformer", f);
    double px = median_rel("pixel_baseline", f);
    curve << " " << fmt(pt) << "/" << fmt(px);
    if (pt < px) shape_dominates = false;
  }

  // the image-independent baseline must give one constant curve
  bool mean_constant = true;
  double mean_ref = -1.0;
  for (const auto& r : rows)
    if (r.model == "mean_shape") {
      if (mean_ref < 0) mean_ref = r.dsc_abs;
      mean_constant = mean_constant && r.dsc_abs == mean_ref;
    }

  double elapsed = seconds_since(t0);
  bool pass = shape_dominates && mean_constant && elapsed <= 20.0 * 60.0;
  report(5, pass,
         "relative DSC: shape pipeline >= pixel baseline for fractions >= 0.5",
         "pt/pixel medians" + curve.str() + (mean_constant ? "" : ", mean-shape drifted") +
             ", " + fmt(elapsed) + " s");
}

void criterion_determinism(const Benchmark& bench) {
  TrainResult repeat = train(bench.pt_config, bench.dataset);
  write_report(repeat.report, (bench.workdir / "report_repeat.json").string());
  std::ifstream a(bench.workdir / "report.json", std::ios::binary);
  std::ifstream b(bench.workdir / "report_repeat.json", std::ios::binary);
  std::stringstream sa, sb;
  sa << a.rdbuf();
  sb << b.rdbuf();
  bool pass = !sa.str().empty() && sa.str() == sb.str();
  report(6, pass, "repeating the benchmark run is bit-identical",
         pass ? "report.json bytes equal" : "report.json bytes differ");
}

void criterion_comparative(const Benchmark& bench) {
  TrainResult pn =
      train(benchmark_config(ModelVariant::kPointNet), bench.dataset);
  double dsc_pt = bench.pt.report.overall.dsc_mean;
  double dsc_pn = pn.report.overall.dsc_mean;
  std::string detail = "point transformer DSC " + fmt(dsc_pt) +
                       ", pointnet DSC " + fmt(dsc_pn) +
                       (dsc_pt >= dsc_pn ? " (trend holds)" : " (trend reversed)");
  report_soft(7, "point transformer vs pointnet mean test DSC", detail);
}

}  // namespace

int main() {
  std::printf("acceptance suite\n");
  criterion_gradients();
  criterion_metric_oracles();
  criterion_head_invariants();
  Benchmark bench = criterion_end_to_end();
  criterion_robustness(bench);
  criterion_determinism(bench);
  criterion_comparative(bench);
  std::printf("%s (%d failing)\n", failures == 0 ? "ALL PASS" : "FAILURES",
              failures);
  return failures;
}
