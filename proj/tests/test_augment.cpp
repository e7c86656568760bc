#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "dira/augment.hpp"
#include "dira/datasets.hpp"
#include "dira/errors.hpp"

using namespace dira;

namespace {

Image phantom(std::uint64_t seed, std::size_t size = 32) {
  data::PhantomParams p;
  p.size = size;
  return data::generate_phantom(seed, p).image;
}

bool in_unit_range(const Image& im) {
  return std::all_of(im.pixels.begin(), im.pixels.end(), [](double v) { return v >= 0.0 && v <= 1.0; });
}

double mean_abs_diff(const Image& a, const Image& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.pixels.size(); ++i) s += std::abs(a.pixels[i] - b.pixels[i]);
  return s / static_cast<double>(a.pixels.size());
}

}  // namespace

TEST_CASE("identity pipeline returns the resized input") {
  const Image x = phantom(1);
  const auto cfg = aug::AugmentationConfig::none(16);
  const auto [out, rec] = aug::apply_T(x, cfg, 5);
  CHECK(out == resize_bilinear(x, 16, 16));
  const auto vp = aug::make_view_pair(x, x, cfg, 9);
  CHECK(vp.view1 == vp.view2);
  CHECK(vp.view1 == vp.target1);
}

TEST_CASE("flip is an involution") {
  const Image x = phantom(2);
  CHECK(aug::flip_horizontal(aug::flip_horizontal(x)) == x);
}

TEST_CASE("cutout touches exactly its rectangle") {
  const Image x = phantom(3);
  const Image y = aug::apply_cutout(x, {BBox{8, 8, 16, 16}}, 0.5);
  for (std::size_t r = 0; r < x.height; ++r)
    for (std::size_t c = 0; c < x.width; ++c) {
      const bool inside = r >= 8 && r < 16 && c >= 8 && c < 16;
      CHECK(y.at(r, c) == (inside ? 0.5 : x.at(r, c)));
    }
}

TEST_CASE("patch shuffle") {
  const Image x = phantom(4);
  CHECK(aug::shuffle_patches(x, 4, {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15}) == x);

  std::vector<std::size_t> perm{3, 0, 2, 1}, inverse(4);
  for (std::size_t i = 0; i < 4; ++i) inverse[perm[i]] = i;
  CHECK(aug::shuffle_patches(aug::shuffle_patches(x, 2, perm), 2, inverse) == x);

  Image q(4, 4);
  const double level[4] = {0.1, 0.2, 0.3, 0.4};
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) q.at(r, c) = level[(r / 2) * 2 + c / 2];
  const Image s = aug::shuffle_patches(q, 2, {3, 1, 2, 0});
  CHECK(s.at(0, 0) == 0.4);
  CHECK(s.at(3, 3) == 0.1);
  CHECK(s.at(0, 3) == 0.2);
  CHECK(s.at(3, 0) == 0.3);

  CHECK_THROWS_AS(aug::shuffle_patches(x, 2, {0, 0, 1, 2}), ParameterError);
  CHECK_THROWS_AS(aug::shuffle_patches(phantom(4, 18), 4, std::vector<std::size_t>(16, 0)), ParameterError);
}

TEST_CASE("view pairs") {
  const Image x = phantom(5);
  aug::AugmentationConfig cfg;
  cfg.output_size = 32;
  const auto a = aug::make_view_pair(x, x, cfg, 42);
  const auto b = aug::make_view_pair(x, x, cfg, 42);
  CHECK(a.view1 == b.view1);
  CHECK(a.view2 == b.view2);
  CHECK(a.target1 == b.target1);
  CHECK_FALSE(a.view1 == a.view2);

  const auto r = aug::replay_view_pair(x, x, a.aug_record());
  CHECK(r.view1 == a.view1);
  CHECK(r.view2 == a.view2);
  CHECK(r.target1 == a.target1);
}

TEST_CASE("range preservation and restoration difficulty") {
  aug::AugmentationConfig cfg;
  cfg.output_size = 32;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const Image x = phantom(100 + s);
    const auto vp = aug::make_view_pair(x, x, cfg, s);
    CHECK(in_unit_range(vp.view1));
    CHECK(in_unit_range(vp.view2));
    CHECK(in_unit_range(vp.target1));
    CHECK(mean_abs_diff(vp.view1, vp.target1) > 0.0);
  }
  CHECK(in_unit_range(aug::jitter(phantom(7), 3.0, 0.8)));
  CHECK(in_unit_range(aug::gaussian_blur(phantom(7), 2.0)));
}

TEST_CASE("record JSON round trip") {
  aug::AugmentationConfig cfg;
  cfg.output_size = 32;
  const auto rec = aug::sample_record(32, 32, cfg, 77);
  CHECK(aug::aug_record_from_json(aug::to_json(rec)) == rec);
}

TEST_CASE("config strictness") {
  CHECK_THROWS_AS(aug::augmentation_config_from_json({{"output_size", 32}, {"bogus", 1}}), ConfigError);
  const auto c = aug::augmentation_config_from_json({{"output_size", 24}, {"enabled_ops", {"crop", "flip"}}});
  CHECK(c.output_size == 24);
  CHECK(c.enabled(aug::Op::flip));
  CHECK_FALSE(c.enabled(aug::Op::blur));
  CHECK(aug::augmentation_config_from_json(aug::to_json(c)).enabled_ops == c.enabled_ops);
}
