#include "dira/augment.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "dira/errors.hpp"
#include "dira/json_util.hpp"
#include "dira/rng.hpp"

namespace dira::aug {

using nlohmann::json;

namespace {

constexpr std::pair<Op, const char*> kOpNames[] = {
    {Op::crop, "crop"}, {Op::flip, "flip"},     {Op::jitter, "jitter"},
    {Op::blur, "blur"}, {Op::cutout, "cutout"}, {Op::shuffle, "shuffle"},
};

void require_range(const std::pair<double, double>& r, const char* what) {
  if (!(r.first <= r.second)) throw ParameterError(std::string(what) + " range must satisfy lo <= hi");
}

}  // namespace

std::string to_string(Op op) {
  for (const auto& [o, name] : kOpNames)
    if (o == op) return name;
  return "?";
}

Op op_from_string(const std::string& name) {
  for (const auto& [o, n] : kOpNames)
    if (name == n) return o;
  throw ConfigError("unknown augmentation op '" + name + "'");
}

void AugmentationConfig::validate() const {
  if (output_size < 16) throw ParameterError("augmentation output_size must be at least 16");
  require_range(crop_scale_range, "crop_scale");
  if (!(crop_scale_range.first > 0.0) || crop_scale_range.second > 1.0) {
    throw ParameterError("crop scales must lie in (0, 1]");
  }
  if (!(flip_probability >= 0.0 && flip_probability <= 1.0)) throw ParameterError("flip_probability must be in [0, 1]");
  if (!(jitter_strength >= 0.0 && jitter_strength <= 1.0)) throw ParameterError("jitter_strength must be in [0, 1]");
  require_range(blur_sigma_range, "blur_sigma");
  if (blur_sigma_range.first < 0.0) throw ParameterError("blur sigma must be non-negative");
  if (!(cutout.size_fraction > 0.0 && cutout.size_fraction <= 1.0)) {
    throw ParameterError("cutout size_fraction must be in (0, 1]");
  }
  if (!(cutout_fill >= 0.0 && cutout_fill <= 1.0)) throw ParameterError("cutout fill must be in [0, 1]");
  if (shuffle_grid == 0 || output_size % shuffle_grid != 0) {
    throw ParameterError("shuffle_grid must divide the output size");
  }
}

AugmentationConfig AugmentationConfig::none(std::size_t output_size) {
  AugmentationConfig c;
  c.output_size = output_size;
  c.enabled_ops.clear();
  return c;
}

json to_json(const AugmentationConfig& c) {
  json ops = json::array();
  for (Op op : c.enabled_ops) ops.push_back(to_string(op));
  return {
      {"output_size", c.output_size},
      {"crop_scale_range", {c.crop_scale_range.first, c.crop_scale_range.second}},
      {"flip_probability", c.flip_probability},
      {"jitter_strength", c.jitter_strength},
      {"blur_sigma_range", {c.blur_sigma_range.first, c.blur_sigma_range.second}},
      {"cutout", {{"count", c.cutout.count}, {"size_fraction", c.cutout.size_fraction}}},
      {"cutout_fill", c.cutout_fill},
      {"shuffle_grid", c.shuffle_grid},
      {"enabled_ops", ops},
  };
}

AugmentationConfig augmentation_config_from_json(const json& j) {
  require_keys(j,
               {"output_size", "crop_scale_range", "flip_probability", "jitter_strength", "blur_sigma_range", "cutout",
                "cutout_fill", "shuffle_grid", "enabled_ops"},
               "augment");
  AugmentationConfig c;
  try {
    auto pair_of = [](const json& v) {
      if (!v.is_array() || v.size() != 2) throw ConfigError("expected a [lo, hi] pair");
      return std::pair<double, double>{v[0].get<double>(), v[1].get<double>()};
    };
    if (j.contains("output_size")) c.output_size = j.at("output_size").get<std::size_t>();
    if (j.contains("crop_scale_range")) c.crop_scale_range = pair_of(j.at("crop_scale_range"));
    if (j.contains("flip_probability")) c.flip_probability = j.at("flip_probability").get<double>();
    if (j.contains("jitter_strength")) c.jitter_strength = j.at("jitter_strength").get<double>();
    if (j.contains("blur_sigma_range")) c.blur_sigma_range = pair_of(j.at("blur_sigma_range"));
    if (j.contains("cutout")) {
      const json& cj = j.at("cutout");
      require_keys(cj, {"count", "size_fraction"}, "augment.cutout");
      if (cj.contains("count")) c.cutout.count = cj.at("count").get<std::size_t>();
      if (cj.contains("size_fraction")) c.cutout.size_fraction = cj.at("size_fraction").get<double>();
    }
    if (j.contains("cutout_fill")) c.cutout_fill = j.at("cutout_fill").get<double>();
    if (j.contains("shuffle_grid")) c.shuffle_grid = j.at("shuffle_grid").get<std::size_t>();
    if (j.contains("enabled_ops")) {
      c.enabled_ops.clear();
      for (const auto& name : j.at("enabled_ops")) c.enabled_ops.insert(op_from_string(name.get<std::string>()));
    }
  } catch (const json::exception& e) {
    throw ConfigError(std::string("augment: ") + e.what());
  }
  return c;
}

json to_json(const AugRecord& r) {
  json boxes = json::array();
  for (const auto& b : r.cutouts) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
  return {
      {"output_size", r.output_size},
      {"crop", {r.crop_x0, r.crop_y0, r.crop_w, r.crop_h}},
      {"flip", r.flip},
      {"jitter", r.jitter},
      {"contrast", r.contrast},
      {"brightness", r.brightness},
      {"blur", r.blur},
      {"blur_sigma", r.blur_sigma},
      {"cutouts", boxes},
      {"cutout_fill", r.cutout_fill},
      {"shuffle_grid", r.shuffle_grid},
      {"permutation", r.permutation},
  };
}

AugRecord aug_record_from_json(const json& j) {
  AugRecord r;
  try {
    r.output_size = j.at("output_size").get<std::size_t>();
    const auto& crop = j.at("crop");
    r.crop_x0 = crop.at(0).get<double>();
    r.crop_y0 = crop.at(1).get<double>();
    r.crop_w = crop.at(2).get<double>();
    r.crop_h = crop.at(3).get<double>();
    r.flip = j.at("flip").get<bool>();
    r.jitter = j.at("jitter").get<bool>();
    r.contrast = j.at("contrast").get<double>();
    r.brightness = j.at("brightness").get<double>();
    r.blur = j.at("blur").get<bool>();
    r.blur_sigma = j.at("blur_sigma").get<double>();
    for (const auto& b : j.at("cutouts")) r.cutouts.push_back({b.at(0), b.at(1), b.at(2), b.at(3)});
    r.cutout_fill = j.at("cutout_fill").get<double>();
    r.shuffle_grid = j.at("shuffle_grid").get<std::size_t>();
    r.permutation = j.at("permutation").get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw ParameterError(std::string("malformed augmentation record: ") + e.what());
  }
  return r;
}

AugRecord sample_record(std::size_t height, std::size_t width, const AugmentationConfig& config, std::uint64_t seed) {
  config.validate();
  Rng rng(seed);
  AugRecord r;
  r.output_size = config.output_size;
  r.cutout_fill = config.cutout_fill;
  const double w = static_cast<double>(width), h = static_cast<double>(height);
  r.crop_w = w;
  r.crop_h = h;
  if (config.enabled(Op::crop)) {
    const double side = std::sqrt(uniform(rng, config.crop_scale_range.first, config.crop_scale_range.second));
    r.crop_w = side * w;
    r.crop_h = side * h;
    r.crop_x0 = uniform(rng, 0.0, w - r.crop_w);
    r.crop_y0 = uniform(rng, 0.0, h - r.crop_h);
    if (side >= 1.0) r.crop_x0 = r.crop_y0 = 0.0;
  }
  if (config.enabled(Op::flip)) r.flip = bernoulli(rng, config.flip_probability);
  if (config.enabled(Op::jitter)) {
    r.jitter = true;
    r.contrast = uniform(rng, 1.0 - config.jitter_strength, 1.0 + config.jitter_strength);
    r.brightness = uniform(rng, -0.5 * config.jitter_strength, 0.5 * config.jitter_strength);
  }
  if (config.enabled(Op::blur)) {
    r.blur = true;
    r.blur_sigma = uniform(rng, config.blur_sigma_range.first, config.blur_sigma_range.second);
  }
  const int out = static_cast<int>(config.output_size);
  if (config.enabled(Op::cutout)) {
    const int side = std::max(1, static_cast<int>(std::lround(config.cutout.size_fraction * out)));
    std::uniform_int_distribution<int> pos(0, out - side);
    for (std::size_t i = 0; i < config.cutout.count; ++i) {
      const int x = pos(rng), y = pos(rng);
      r.cutouts.push_back({x, y, x + side, y + side});
    }
  }
  if (config.enabled(Op::shuffle)) {
    const std::size_t n = config.shuffle_grid;
    r.shuffle_grid = n;
    r.permutation.resize(n * n);
    std::iota(r.permutation.begin(), r.permutation.end(), std::size_t{0});
    for (std::size_t i = r.permutation.size() - 1; i > 0; --i) {
      std::uniform_int_distribution<std::size_t> pick(0, i);
      std::swap(r.permutation[i], r.permutation[pick(rng)]);
    }
  }
  return r;
}

Image flip_horizontal(const Image& image) {
  Image out(image.height, image.width, image.channels);
  for (std::size_t y = 0; y < image.height; ++y)
    for (std::size_t x = 0; x < image.width; ++x)
      for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = image.at(y, image.width - 1 - x, c);
  return out;
}

Image jitter(const Image& image, double contrast, double brightness) {
  double mean = 0.0;
  for (double v : image.pixels) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(1, image.pixels.size()));
  Image out = image;
  for (double& v : out.pixels) v = std::clamp((v - mean) * contrast + mean + brightness, 0.0, 1.0);
  return out;
}

Image gaussian_blur(const Image& image, double sigma) {
  if (sigma < 0.0) throw ParameterError("blur sigma must be non-negative");
  if (sigma == 0.0) return image;
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> kernel(2 * radius + 1);
  double total = 0.0;
  for (int k = -radius; k <= radius; ++k) total += kernel[k + radius] = std::exp(-0.5 * k * k / (sigma * sigma));
  for (double& k : kernel) k /= total;

  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  Image tmp(image.height, image.width, image.channels), out(image.height, image.width, image.channels);
  for (std::size_t c = 0; c < image.channels; ++c) {
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * image.at(y, std::clamp(x + k, 0, w - 1), c);
        tmp.at(y, x, c) = acc;
      }
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        double acc = 0.0;
        for (int k = -radius; k <= radius; ++k) acc += kernel[k + radius] * tmp.at(std::clamp(y + k, 0, h - 1), x, c);
        out.at(y, x, c) = std::clamp(acc, 0.0, 1.0);
      }
  }
  return out;
}

Image apply_cutout(const Image& image, const std::vector<BBox>& boxes, double fill) {
  Image out = image;
  const int h = static_cast<int>(image.height), w = static_cast<int>(image.width);
  for (const auto& b : boxes) {
    for (int y = std::max(0, b.y_min); y < std::min(h, b.y_max); ++y)
      for (int x = std::max(0, b.x_min); x < std::min(w, b.x_max); ++x)
        for (std::size_t c = 0; c < image.channels; ++c) out.at(y, x, c) = fill;
  }
  return out;
}

Image shuffle_patches(const Image& image, std::size_t n, const std::vector<std::size_t>& permutation) {
  if (n == 0 || image.height % n != 0 || image.width % n != 0) {
    throw ParameterError("shuffle grid " + std::to_string(n) + " does not divide the image side");
  }
  if (permutation.size() != n * n) throw ParameterError("permutation must have n*n entries");
  std::vector<bool> seen(n * n, false);
  for (std::size_t p : permutation) {
    if (p >= n * n || seen[p]) throw ParameterError("permutation is not a bijection");
    seen[p] = true;
  }
  const std::size_t ph = image.height / n, pw = image.width / n;
  Image out(image.height, image.width, image.channels);
  for (std::size_t cell = 0; cell < n * n; ++cell) {
    const std::size_t src = permutation[cell];
    const std::size_t oy = (cell / n) * ph, ox = (cell % n) * pw;
    const std::size_t sy = (src / n) * ph, sx = (src % n) * pw;
    for (std::size_t y = 0; y < ph; ++y)
      for (std::size_t x = 0; x < pw; ++x)
        for (std::size_t c = 0; c < image.channels; ++c) out.at(oy + y, ox + x, c) = image.at(sy + y, sx + x, c);
  }
  return out;
}

Image render_target(const Image& image, const AugRecord& r) {
  validate_image(image);
  Image out = resize_bilinear(image, r.output_size, r.output_size, r.crop_x0, r.crop_y0, r.crop_w, r.crop_h);
  if (r.flip) out = flip_horizontal(out);
  return out;
}

Image replay(const Image& image, const AugRecord& r) {
  Image out = render_target(image, r);
  if (r.jitter) out = jitter(out, r.contrast, r.brightness);
  if (r.blur) out = gaussian_blur(out, r.blur_sigma);
  if (!r.cutouts.empty()) out = apply_cutout(out, r.cutouts, r.cutout_fill);
  if (r.shuffle_grid != 0) out = shuffle_patches(out, r.shuffle_grid, r.permutation);
  return out;
}

std::pair<Image, AugRecord> apply_T(const Image& image, const AugmentationConfig& config, std::uint64_t seed) {
  validate_image(image);
  AugRecord r = sample_record(image.height, image.width, config, seed);
  return {replay(image, r), std::move(r)};
}

json ViewPair::aug_record() const { return {{"view1", to_json(record1)}, {"view2", to_json(record2)}}; }

ViewPair make_view_pair(const Image& x1, const Image& x2, const AugmentationConfig& config, std::uint64_t seed) {
  ViewPair vp;
  std::tie(vp.view1, vp.record1) = apply_T(x1, config, derive_seed(seed, {1}));
  std::tie(vp.view2, vp.record2) = apply_T(x2, config, derive_seed(seed, {2}));
  vp.target1 = render_target(x1, vp.record1);
  return vp;
}

ViewPair replay_view_pair(const Image& x1, const Image& x2, const json& aug_record) {
  ViewPair vp;
  try {
    vp.record1 = aug_record_from_json(aug_record.at("view1"));
    vp.record2 = aug_record_from_json(aug_record.at("view2"));
  } catch (const json::exception& e) {
    throw ParameterError(std::string("malformed view-pair record: ") + e.what());
  }
  vp.view1 = replay(x1, vp.record1);
  vp.view2 = replay(x2, vp.record2);
  vp.target1 = render_target(x1, vp.record1);
  return vp;
}

}  // namespace dira::aug
