#include <catch2/catch_amalgamated.hpp>

#include "shapereg/heads.hpp"

using namespace shapereg;
using Catch::Approx;

namespace {

Shape line_shape(std::vector<Vec2> pts, double spacing = 1.0) {
  Shape s;
  s.spacing_mm = spacing;
  s.points = std::move(pts);
  s.slices = {{"s", 0, static_cast<int>(s.points.size())}};
  return s;
}

}  // namespace

TEST_CASE("mlp_head output shapes", "[heads]") {
  Rng rng(1);
  MlpHead disp_head(128, 2, rng);
  MlpHead heat_head(128, 121, rng);
  Rng frng(2);
  Tensor feats = Tensor::randn({166, 128}, frng, 0.3);
  CHECK(disp_head.forward(feats).shape() == Dims{166, 2});
  CHECK(heat_head.forward(feats).shape() == Dims{166, 121});
}

TEST_CASE("mlp_head shares weights across rows", "[heads]") {
  Rng rng(3);
  MlpHead head(8, 4, rng);
  Rng frng(4);
  Tensor feats = Tensor::randn({5, 8}, frng);
  // duplicate row 2 as a new last row
  std::vector<double> dup = feats.values();
  for (int j = 0; j < 8; ++j) dup.push_back(feats.values()[2 * 8 + j]);
  Tensor out1 = head.forward(feats);
  Tensor out2 = head.forward(Tensor::from({6, 8}, dup));
  for (int j = 0; j < 4; ++j)
    CHECK(out2.values()[5 * 4 + j] == out1.values()[2 * 4 + j]);
}

TEST_CASE("displacement_from_raw bounds and asymptotes", "[heads]") {
  Tensor zero = Tensor::zeros({3, 2});
  Tensor u0 = displacement_from_raw(zero, 22.0);
  for (double v : u0.values()) CHECK(v == 0.0);

  Tensor huge = Tensor::constant({2, 2}, 1e9);
  Tensor usat = displacement_from_raw(huge, 22.0);
  for (double v : usat.values()) CHECK(v == Approx(22.0).margin(1e-9));

  Tensor at_r = Tensor::constant({1, 2}, 22.0);
  Tensor ur = displacement_from_raw(at_r, 22.0);
  for (double v : ur.values())
    CHECK(v == Approx(22.0 * std::tanh(1.0)).margin(1e-12));  // ~16.76
}

TEST_CASE("loss_disp trivial and arithmetic cases", "[heads]") {
  Shape init = line_shape({{1, 1}, {4, 2}, {2, 6}});
  Shape star = line_shape({{2, 3}, {5, 1}, {4, 4}});
  // U exactly closes the gap, lambda 0 -> 0
  std::vector<double> gap;
  for (int i = 0; i < 3; ++i) {
    gap.push_back(star.points[static_cast<size_t>(i)].x -
                  init.points[static_cast<size_t>(i)].x);
    gap.push_back(star.points[static_cast<size_t>(i)].y -
                  init.points[static_cast<size_t>(i)].y);
  }
  CHECK(loss_disp(star, init, Tensor::from({3, 2}, gap), 0.0).item() == 0.0);

  // lambda 1 with constant U per structure -> cyclic differences vanish
  Tensor constant_u = Tensor::from({3, 2}, {2, -1, 2, -1, 2, -1});
  CHECK(loss_disp(star, init, constant_u, 1.0).item() == 0.0);

  // L=2 single structure, S*-S_init = [(1,0),(0,1)], U=0, lambda 0.2 -> 0.8
  Shape i2 = line_shape({{0, 0}, {0, 0}});
  Shape s2 = line_shape({{1, 0}, {0, 1}});
  CHECK(loss_disp(s2, i2, Tensor::zeros({2, 2}), 0.2).item() ==
        Approx(0.8).margin(1e-12));

  CHECK_THROWS_AS(loss_disp(s2, init, Tensor::zeros({2, 2}), 0.2),
                  std::invalid_argument);
}

TEST_CASE("loss_disp with lambda 0 equals l2_shape_loss exactly", "[heads]") {
  Rng rng(5);
  Shape init = line_shape({{3, 4}, {8, 2}, {5, 9}, {1, 7}});
  Shape star = line_shape({{4, 5}, {7, 4}, {6, 7}, {2, 5}});
  Tensor u = Tensor::randn({4, 2}, rng);
  double a = loss_disp(star, init, u, 0.0).item();
  double b = l2_shape_loss(add(shape_tensor(init), u), star).item();
  CHECK(a == b);  // bit-identical by construction
}

TEST_CASE("heatmap grid spans the displacement box", "[heads]") {
  HeatmapGrid grid;
  REQUIRE(grid.points() == 121);
  Tensor g = grid.coords();
  REQUIRE(g.shape() == Dims{121, 2});
  const auto& v = g.values();
  CHECK(v[0] == -22.0);
  CHECK(v[1] == -22.0);
  CHECK(v[121 * 2 - 2] == 22.0);
  CHECK(v[121 * 2 - 1] == 22.0);
  // symmetric about the origin
  for (int i = 0; i < 121; ++i) {
    CHECK(v[static_cast<size_t>(i) * 2] ==
          Approx(-v[static_cast<size_t>(120 - i) * 2]).margin(1e-12));
    CHECK(v[static_cast<size_t>(i) * 2 + 1] ==
          Approx(-v[static_cast<size_t>(120 - i) * 2 + 1]).margin(1e-12));
  }
}

TEST_CASE("heatmap_to_displacement basics", "[heads]") {
  HeatmapGrid grid;
  Tensor uniform = Tensor::zeros({3, 121});
  Tensor u_uniform = heatmap_to_displacement(uniform, grid);
  for (double v : u_uniform.values()) CHECK(v == Approx(0.0).margin(1e-12));

  // saturated logit at grid point (22, -22): column index of x=22,y=-22
  std::vector<double> logits(121, 0.0);
  logits[10] = 50.0;  // iy=0 (y=-22), ix=10 (x=22)
  Tensor t = Tensor::from({1, 121}, logits);
  Tensor ut = heatmap_to_displacement(t, grid);
  const auto& u = ut.values();
  CHECK(u[0] == Approx(22.0).margin(1e-6));
  CHECK(u[1] == Approx(-22.0).margin(1e-6));
}

TEST_CASE("heatmap_to_displacement equals the direct weighted sum", "[heads]") {
  HeatmapGrid grid;
  Rng rng(6);
  Tensor logits = Tensor::randn({4, 121}, rng, 2.0);
  Tensor got_t = heatmap_to_displacement(logits, grid);
  const auto& got = got_t.values();
  Tensor grid_t = grid.coords();
  const auto& gv = grid_t.values();
  for (int i = 0; i < 4; ++i) {
    // independent softmax + weighted-sum loop
    double mx = -1e300;
    for (int m = 0; m < 121; ++m)
      mx = std::max(mx, logits.values()[static_cast<size_t>(i) * 121 + m]);
    double z = 0;
    std::vector<double> p(121);
    for (int m = 0; m < 121; ++m) {
      p[static_cast<size_t>(m)] =
          std::exp(logits.values()[static_cast<size_t>(i) * 121 + m] - mx);
      z += p[static_cast<size_t>(m)];
    }
    double ux = 0, uy = 0;
    for (int m = 0; m < 121; ++m) {
      ux += p[static_cast<size_t>(m)] / z * gv[static_cast<size_t>(m) * 2];
      uy += p[static_cast<size_t>(m)] / z * gv[static_cast<size_t>(m) * 2 + 1];
    }
    CHECK(got[static_cast<size_t>(i) * 2] == Approx(ux).margin(1e-9));
    CHECK(got[static_cast<size_t>(i) * 2 + 1] == Approx(uy).margin(1e-9));
  }
}

TEST_CASE("heatmap displacements stay inside the box", "[heads]") {
  HeatmapGrid grid;
  Rng rng(7);
  for (int trial = 0; trial < 200; ++trial) {
    Tensor logits = Tensor::randn({2, 121}, rng, 30.0);
    Tensor u = heatmap_to_displacement(logits, grid);
    for (double v : u.values()) {
      CHECK(v >= -22.0);
      CHECK(v <= 22.0);
    }
  }
}

TEST_CASE("shape_from_weights saturation, uniformity, closed form",
          "[heads]") {
  std::vector<Shape> shapes;
  shapes.push_back(line_shape({{0, 0}, {4, 0}, {0, 4}}));
  shapes.push_back(line_shape({{8, 8}, {12, 8}, {8, 12}}));
  auto dict = ShapeDictionary::build(shapes);

  // saturated -> shape 1
  Tensor sat = Tensor::from({2}, {0.0, 50.0});
  Tensor pred_t = shape_from_weights(sat, dict);
  const auto& pred = pred_t.values();
  for (int i = 0; i < 3; ++i) {
    CHECK(pred[static_cast<size_t>(i) * 2] ==
          Approx(shapes[1].points[static_cast<size_t>(i)].x).margin(1e-6));
    CHECK(pred[static_cast<size_t>(i) * 2 + 1] ==
          Approx(shapes[1].points[static_cast<size_t>(i)].y).margin(1e-6));
  }

  // uniform -> mean shape
  Tensor uni = Tensor::zeros({2});
  Tensor mean_t = shape_from_weights(uni, dict);
  const auto& mean_pred = mean_t.values();
  Shape m = mean_shape(shapes);
  for (int i = 0; i < 3; ++i) {
    CHECK(mean_pred[static_cast<size_t>(i) * 2] ==
          Approx(m.points[static_cast<size_t>(i)].x).margin(1e-12));
    CHECK(mean_pred[static_cast<size_t>(i) * 2 + 1] ==
          Approx(m.points[static_cast<size_t>(i)].y).margin(1e-12));
  }

  // logits [0, ln 3] -> 0.25 S0 + 0.75 S1
  Tensor ln3 = Tensor::from({2}, {0.0, std::log(3.0)});
  Tensor blend_t = shape_from_weights(ln3, dict);
  const auto& blend = blend_t.values();
  for (int i = 0; i < 3; ++i) {
    double ex = 0.25 * shapes[0].points[static_cast<size_t>(i)].x +
                0.75 * shapes[1].points[static_cast<size_t>(i)].x;
    CHECK(blend[static_cast<size_t>(i) * 2] == Approx(ex).margin(1e-12));
  }

  CHECK_THROWS_AS(shape_from_weights(Tensor::zeros({3}), dict),
                  std::invalid_argument);
}

TEST_CASE("shape_from_weights is invariant to dictionary reordering",
          "[heads]") {
  std::vector<Shape> shapes;
  shapes.push_back(line_shape({{0, 0}, {4, 0}, {0, 4}}));
  shapes.push_back(line_shape({{8, 8}, {12, 8}, {8, 12}}));
  shapes.push_back(line_shape({{2, 2}, {6, 2}, {2, 6}}));
  auto dict = ShapeDictionary::build(shapes);
  Tensor logits = Tensor::from({3}, {0.3, -0.5, 1.1});
  Tensor pred_t = shape_from_weights(logits, dict);
  const auto& pred = pred_t.values();

  std::vector<Shape> reordered = {shapes[2], shapes[0], shapes[1]};
  auto dict2 = ShapeDictionary::build(reordered);
  Tensor logits2 = Tensor::from({3}, {1.1, 0.3, -0.5});
  Tensor pred2_t = shape_from_weights(logits2, dict2);
  const auto& pred2 = pred2_t.values();
  for (size_t i = 0; i < pred.size(); ++i)
    CHECK(pred2[i] == Approx(pred[i]).margin(1e-12));
}

TEST_CASE("shape head pools then projects", "[heads]") {
  Rng rng(8);
  ShapeHead head(8, 5, 5, rng);
  Rng frng(9);
  Tensor feats = Tensor::randn({7, 8}, frng);
  Tensor logits = head.logits(feats);
  CHECK(logits.shape() == Dims{5});
  // permuting landmark rows leaves the pooled logits unchanged
  std::vector<int> perm = {6, 0, 3, 1, 5, 2, 4};
  Tensor permuted = gather_rows(feats, perm);
  const auto& a = logits.values();
  Tensor b_t = head.logits(permuted);
  const auto& b = b_t.values();
  for (size_t i = 0; i < a.size(); ++i) CHECK(b[i] == Approx(a[i]).margin(1e-12));
}

TEST_CASE("l2_shape_loss basics and oracle", "[heads]") {
  Shape star = line_shape({{1, 2}, {3, 4}, {5, 6}});
  CHECK(l2_shape_loss(shape_tensor(star), star).item() == 0.0);

  // uniform 1-px x-shift -> 1
  Tensor shifted = add(shape_tensor(star), Tensor::from({3, 2}, {1, 0, 1, 0, 1, 0}));
  CHECK(l2_shape_loss(shifted, star).item() == Approx(1.0).margin(1e-12));

  Rng rng(10);
  Tensor pred = Tensor::randn({3, 2}, rng, 4.0);
  double expect = 0.0;
  for (int i = 0; i < 3; ++i) {
    double dx = pred.values()[static_cast<size_t>(i) * 2] -
                star.points[static_cast<size_t>(i)].x;
    double dy = pred.values()[static_cast<size_t>(i) * 2 + 1] -
                star.points[static_cast<size_t>(i)].y;
    expect += dx * dx + dy * dy;
  }
  expect /= 3.0;
  CHECK(l2_shape_loss(pred, star).item() == Approx(expect).margin(1e-12));

  CHECK_THROWS_AS(l2_shape_loss(Tensor::zeros({2, 2}), star),
                  std::invalid_argument);
}
