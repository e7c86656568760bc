#include "checks.hpp"
#include "doctest.h"

#include <filesystem>

#include "dira/datasets.hpp"
#include "dira/errors.hpp"
#include "dira/localization.hpp"

using namespace dira;
namespace fs = std::filesystem;

TEST_CASE("localization oracles") {
  for (const auto& o : checks::localization_oracles(200)) {
    INFO(o.name << ": " << o.detail);
    CHECK(o.pass);
  }
}

TEST_CASE("Grad-CAM from activations") {
  nn::Tensor<double> a({1, 2, 2}), g({1, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) a[i] = g[i] = 1.0;
  for (double v : loc::cam_from_activations(a, g, 4, 4).values) CHECK(v == doctest::Approx(1.0));
  for (std::size_t i = 0; i < 4; ++i) g[i] = -0.3;
  for (double v : loc::cam_from_activations(a, g, 4, 4).values) CHECK(v == 0.0);

  nn::Tensor<double> a2({2, 2, 2}), g2({2, 2, 2});
  for (std::size_t i = 0; i < 4; ++i) {
    a2[i] = 1.0, a2[4 + i] = 2.0;
    g2[i] = 0.5, g2[4 + i] = -1.0;
  }
  for (double v : loc::cam_from_activations(a2, g2, 3, 3).values) CHECK(v == 0.0);
}

TEST_CASE("heatmap normalization") {
  CHECK(loc::normalize_heatmap({1, 3, {2, 4, 6}}) == std::vector<std::uint8_t>{0, 128, 255});
  CHECK(loc::normalize_heatmap({1, 3, {5, 5, 5}}) == std::vector<std::uint8_t>{0, 0, 0});
  CHECK(loc::normalize_heatmap({1, 2, {0, 255}}) == std::vector<std::uint8_t>{0, 255});
}

TEST_CASE("threshold boxes") {
  std::vector<std::uint8_t> h(16 * 16, 0);
  CHECK(loc::heatmap_to_boxes(h, 16, 16).empty());
  for (std::size_t r = 2; r < 6; ++r)
    for (std::size_t c = 3; c < 7; ++c) h[r * 16 + c] = 200;
  const auto one = loc::heatmap_to_boxes(h, 16, 16);
  REQUIRE(one.size() == 1);
  CHECK(one[0] == BBox{3, 2, 7, 6});

  std::vector<std::uint8_t> two(16 * 16, 0);
  two[0] = 100;
  two[1] = 80;
  two[10 * 16 + 10] = 250;
  const auto boxes = loc::heatmap_to_boxes(two, 16, 16);
  REQUIRE(boxes.size() == 1);
  CHECK(boxes[0] == BBox{10, 10, 11, 11});
  CHECK(loc::heatmap_to_boxes(two, 16, 16, 60, 180, loc::BoxRule::low_only).size() == 2);
  CHECK(loc::heatmap_to_boxes(two, 16, 16, 60, 180, loc::BoxRule::high_only).size() == 1);
  for (auto r : {loc::BoxRule::two_threshold, loc::BoxRule::low_only, loc::BoxRule::high_only})
    CHECK(loc::box_rule_from_string(loc::to_string(r)) == r);
}

TEST_CASE("scoring and delta sweep") {
  const std::vector<std::vector<BBox>> gt{{{0, 0, 2, 2}}, {}, {{4, 4, 8, 8}}};
  const std::vector<std::vector<BBox>> same{{{0, 0, 2, 2}}, {{1, 1, 2, 2}}, {{4, 4, 8, 8}}};
  auto s = loc::score_localization(same, gt, 0.5);
  CHECK(s.correct == 2);
  CHECK(s.total == 2);
  CHECK(box_iou({0, 0, 2, 2}, {1, 1, 3, 3}) == doctest::Approx(1.0 / 7.0).epsilon(1e-15));
  CHECK(loc::score_localization({{{1, 1, 3, 3}}}, {{{0, 0, 2, 2}}}, 0.3).correct == 0);
  CHECK(loc::score_localization({{{1, 1, 3, 3}}}, {{{0, 0, 2, 2}}}, 0.1).correct == 1);

  const auto deltas = loc::parse_deltas("0.1:0.6:0.1");
  REQUIRE(deltas.size() == 6);
  CHECK(deltas.front() == doctest::Approx(0.1));
  CHECK(deltas.back() == doctest::Approx(0.6));
  CHECK_THROWS(loc::parse_deltas("0.1:0.6"));
  CHECK_THROWS(loc::parse_deltas("0.6:0.1:0.1"));

  const std::vector<std::vector<BBox>> shifted{{{1, 0, 3, 2}}, {}, {{5, 5, 9, 9}, {0, 0, 1, 1}}};
  double prev = 1.0;
  for (double d : deltas) {
    const double acc = loc::score_localization(shifted, gt, d).accuracy();
    CHECK(acc <= prev);
    prev = acc;
  }
}

TEST_CASE("localization needs a classification model") {
  xfer::TaskModel seg = xfer::init_from_checkpoint(std::nullopt, xfer::TaskKind::segmentation, [] {
    pre::ModelConfig m;
    m.stage_channels = {4, 8};
    m.d_y = 8;
    return m;
  }(), 16, 1);
  data::PhantomParams pp;
  pp.size = 16;
  const std::vector<Image> images{data::generate_phantom(1, pp).image};
  CHECK_THROWS_AS(loc::grad_cam(seg, images), ParameterError);
}

TEST_CASE("localize_dataset covers every lesion image") {
  const fs::path dir = fs::temp_directory_path() / "dira_test_localization";
  fs::remove_all(dir);
  data::PhantomParams pp;
  pp.size = 32;
  data::build_dataset(8, 30, pp, dir / "data");
  const auto ds = data::load_dataset(dir / "data");
  pre::ModelConfig m;
  m.stage_channels = {4, 8};
  m.d_y = 8;
  const auto model = xfer::init_from_checkpoint(std::nullopt, xfer::TaskKind::classification, m, 16, 3);
  const auto run = loc::localize_dataset(model, ds, dir / "overlays", 3);
  std::size_t positives = 0;
  for (const auto& s : ds.samples) positives += s.meta.lesion_present;
  CHECK(run.ground_truth.size() == positives);
  CHECK(run.predictions.size() == 3);
  for (const auto& [rule, boxes] : run.predictions) {
    CHECK(boxes.size() == positives);
    double prev = 1.0;
    for (double d : loc::parse_deltas("0.1:0.6:0.1")) {
      const double acc = loc::score_localization(boxes, run.ground_truth, d).accuracy();
      CHECK(acc <= prev);
      prev = acc;
    }
  }
  for (const auto& g : run.ground_truth)
    for (const auto& b : g) {
      CHECK(b.valid());
      CHECK(b.x_max <= 16);
      CHECK(b.y_max <= 16);
    }
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(dir / "overlays")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 3);
  fs::remove_all(dir);
}
