#include "doctest.h"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "dira/datasets.hpp"
#include "dira/errors.hpp"

using namespace dira;
namespace fs = std::filesystem;

namespace {

BBox scan_box(const std::vector<std::uint8_t>& mask, std::size_t h, std::size_t w) {
  int x0 = static_cast<int>(w), y0 = static_cast<int>(h), x1 = -1, y1 = -1;
  for (std::size_t r = 0; r < h; ++r)
    for (std::size_t c = 0; c < w; ++c)
      if (mask[r * w + c]) {
        x0 = std::min(x0, static_cast<int>(c));
        y0 = std::min(y0, static_cast<int>(r));
        x1 = std::max(x1, static_cast<int>(c));
        y1 = std::max(y1, static_cast<int>(r));
      }
  return {x0, y0, x1 + 1, y1 + 1};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

std::vector<data::RecordMeta> synthetic_records(std::size_t n, std::size_t positives) {
  std::vector<data::RecordMeta> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    out[i].image_id = "r" + std::to_string(i);
    out[i].lesion_present = (i * 7) % n < positives;
  }
  return out;
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("dira_test_datasets_" + name);
  fs::remove_all(p);
  return p;
}

}  // namespace

TEST_CASE("phantom generation is deterministic") {
  const data::PhantomParams p;
  const auto a = data::generate_phantom(0, p), b = data::generate_phantom(0, p);
  CHECK(a.image == b.image);
  CHECK(a.mask == b.mask);
  CHECK(a.boxes == b.boxes);
  CHECK_FALSE(data::generate_phantom(1, p).image == a.image);
}

TEST_CASE("lesion probability zero gives no lesion") {
  data::PhantomParams p;
  p.lesion_probability = 0.0;
  for (std::uint64_t s = 0; s < 20; ++s) {
    const auto r = data::generate_phantom(s, p);
    CHECK_FALSE(r.lesion_present);
    CHECK_FALSE(r.lesion_class.has_value());
    CHECK(r.mask.empty());
    CHECK(r.boxes.empty());
  }
}

TEST_CASE("stored box equals scanned mask extent") {
  data::PhantomParams p;
  p.lesion_probability = 1.0;
  const auto r = data::generate_phantom(7, p);
  REQUIRE(r.lesion_present);
  REQUIRE(std::count(r.mask.begin(), r.mask.end(), 1) > 0);
  REQUIRE(r.boxes.size() == 1);
  CHECK(r.boxes[0] == scan_box(r.mask, p.size, p.size));
}

TEST_CASE("record invariants hold across seeds") {
  data::PhantomParams p;
  p.size = 32;
  p.k_templates = 3;
  p.n_lesion_classes = 3;
  for (std::uint64_t s = 0; s < 200; ++s) {
    const auto r = data::generate_phantom(s, p);
    CHECK(r.pseudo_class >= 0);
    CHECK(r.pseudo_class < 3);
    CHECK(std::all_of(r.image.pixels.begin(), r.image.pixels.end(), [](double v) { return v >= 0.0 && v <= 1.0; }));
    const bool any = std::any_of(r.mask.begin(), r.mask.end(), [](std::uint8_t v) { return v != 0; });
    CHECK(any == r.lesion_present);
    CHECK(r.lesion_class.has_value() == r.lesion_present);
    if (r.lesion_present) {
      CHECK(*r.lesion_class < 3);
      // one box per connected region, each tight around it
      std::vector<BBox> expect = component_boxes(label_components(r.mask, 32, 32), 32, 32);
      auto got = r.boxes;
      const auto key = [](const BBox& a, const BBox& b) {
        return std::tie(a.x_min, a.y_min, a.x_max, a.y_max) < std::tie(b.x_min, b.y_min, b.x_max, b.y_max);
      };
      std::sort(expect.begin(), expect.end(), key);
      std::sort(got.begin(), got.end(), key);
      CHECK(got == expect);
    }
  }
}

TEST_CASE("templates are pixel-identical without jitter or noise") {
  data::PhantomParams p;
  p.size = 32;
  p.jitter = 0.0;
  p.noise_amplitude = 0.0;
  p.lesion_probability = 0.0;
  std::vector<std::optional<Image>> first(p.k_templates);
  std::size_t compared = 0;
  for (std::uint64_t s = 0; s < 40; ++s) {
    const auto r = data::generate_phantom(s, p);
    auto& slot = first[static_cast<std::size_t>(r.pseudo_class)];
    if (!slot) {
      slot = r.image;
    } else {
      CHECK(*slot == r.image);
      ++compared;
    }
  }
  CHECK(compared > 0);
}

TEST_CASE("lesion count follows the probability") {
  data::PhantomParams p;
  p.size = 16;
  p.lesion_probability = 0.5;
  std::size_t count = 0;
  for (std::uint64_t s = 0; s < 10000; ++s) count += data::generate_phantom(s, p).lesion_present;
  CHECK(count >= 4700);
  CHECK(count <= 5300);
}

TEST_CASE("invalid parameters are rejected") {
  data::PhantomParams p;
  p.size = 8;
  CHECK_THROWS_AS(data::generate_phantom(0, p), ParameterError);
  p = {};
  p.lesion_probability = 1.5;
  CHECK_THROWS_AS(data::generate_phantom(0, p), ParameterError);
  p = {};
  p.k_templates = 0;
  CHECK_THROWS_AS(data::generate_phantom(0, p), ParameterError);
}

TEST_CASE("build_dataset writes deterministic directories") {
  data::PhantomParams p;
  p.size = 16;
  const fs::path a = scratch("a"), b = scratch("b");
  const auto m = data::build_dataset(3, 100, p, a);
  data::build_dataset(3, 100, p, b);
  CHECK(m.records.size() == 100);
  CHECK(data::read_manifest(a).records.size() == 100);

  std::size_t files = 0;
  for (const auto& e : fs::recursive_directory_iterator(a)) {
    if (!e.is_regular_file()) continue;
    const fs::path rel = fs::relative(e.path(), a);
    CHECK(slurp(e.path()) == slurp(b / rel));
    ++files;
  }
  const auto n_masks = std::count_if(m.records.begin(), m.records.end(), [](const auto& r) { return r.lesion_present; });
  CHECK(files == 100 + static_cast<std::size_t>(n_masks) + 1);

  const auto ds = data::load_dataset(a);
  REQUIRE(ds.samples.size() == 100);
  for (const auto& s : ds.samples) {
    CHECK(s.mask.size() == 16 * 16);
    if (s.meta.lesion_present) {
      CHECK(s.meta.boxes.size() >= 1);
    } else {
      CHECK(std::count(s.mask.begin(), s.mask.end(), 0) == 256);
    }
  }
  fs::remove_all(a);
  fs::remove_all(b);
}

TEST_CASE("manifest JSON round trip") {
  data::PhantomParams p;
  p.size = 16;
  const fs::path d = scratch("rt");
  const auto m = data::build_dataset(5, 12, p, d);
  CHECK(data::to_json(data::manifest_from_json(data::to_json(m))) == data::to_json(m));
  fs::remove_all(d);
  CHECK_THROWS_AS(data::read_manifest(d), StorageError);
}

TEST_CASE("label fraction splits") {
  const auto recs = synthetic_records(1000, 500);

  data::SplitSpec all{1.0, 3, data::Stratify::lesion_present};
  const auto ids = data::split_label_fraction(recs, all);
  REQUIRE(ids.size() == 1000);
  for (std::size_t i = 0; i < ids.size(); ++i) CHECK(ids[i] == recs[i].image_id);

  CHECK(data::split_label_fraction(recs, {0.01, 3, data::Stratify::none}).size() == 10);
  CHECK(data::split_label_fraction(recs, {0.01, 3, data::Stratify::lesion_present}).size() == 10);
  CHECK(data::split_label_fraction(recs, {1e-6, 3, data::Stratify::none}).size() == 1);

  const auto strat = synthetic_records(100, 40);
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    const auto sub = data::split_label_fraction(strat, {0.5, seed, data::Stratify::lesion_present});
    CHECK(sub.size() == 50);
    std::set<std::string> chosen(sub.begin(), sub.end());
    CHECK(chosen.size() == 50);
    std::size_t pos = 0;
    for (const auto& r : strat) pos += chosen.count(r.image_id) && r.lesion_present;
    CHECK(pos >= 19);
    CHECK(pos <= 21);
    CHECK(sub == data::split_label_fraction(strat, {0.5, seed, data::Stratify::lesion_present}));
  }
  CHECK_FALSE(data::split_label_fraction(strat, {0.5, 1, data::Stratify::none}) ==
              data::split_label_fraction(strat, {0.5, 2, data::Stratify::none}));

  CHECK_THROWS_AS(data::split_label_fraction(recs, {0.0, 1, data::Stratify::none}), ParameterError);
  CHECK_THROWS_AS(data::split_label_fraction(recs, {1.5, 1, data::Stratify::none}), ParameterError);
  CHECK_THROWS_AS(data::split_label_fraction(std::vector<data::RecordMeta>{}, all), PreconditionError);
}
