#include "dira/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

#include "dira/errors.hpp"
#include "dira/rng.hpp"

namespace dira::data {
namespace {

constexpr std::uint64_t kTemplateSeed = 0x7e3a1f0d5c2b9a41ULL;

// Smooth value noise on a lattice with `spacing` pixels between nodes.
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, double extent, double spacing) : spacing_(spacing) {
    n_ = static_cast<std::size_t>(std::ceil(extent / spacing)) + 4;
    Rng rng(seed);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    grid_.resize(n_ * n_);
    for (auto& g : grid_) g = u(rng);
  }

  // (x, y) in pixel units; the lattice is offset so small negative coordinates stay inside.
  double operator()(double x, double y) const {
    const double gx = std::clamp(x / spacing_ + 1.5, 0.0, static_cast<double>(n_ - 2) - 1e-9);
    const double gy = std::clamp(y / spacing_ + 1.5, 0.0, static_cast<double>(n_ - 2) - 1e-9);
    const auto ix = static_cast<std::size_t>(gx);
    const auto iy = static_cast<std::size_t>(gy);
    const double tx = smooth(gx - static_cast<double>(ix));
    const double ty = smooth(gy - static_cast<double>(iy));
    const double a = grid_[iy * n_ + ix] * (1 - tx) + grid_[iy * n_ + ix + 1] * tx;
    const double b = grid_[(iy + 1) * n_ + ix] * (1 - tx) + grid_[(iy + 1) * n_ + ix + 1] * tx;
    return a * (1 - ty) + b * ty;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  double spacing_;
  std::size_t n_ = 0;
  std::vector<double> grid_;
};

struct Ellipse {
  double cx, cy, rx, ry;
  // Normalized squared radius of (u, v).
  double r2(double u, double v) const {
    const double a = (u - cx) / rx, b = (v - cy) / ry;
    return a * a + b * b;
  }
};

// Soft inside-indicator with an edge width of a few pixels.
double soft_inside(double r2, double edge) { return 1.0 / (1.0 + std::exp((std::sqrt(r2) - 1.0) / edge)); }

struct AnatomyTemplate {
  Ellipse body, left_lung, right_lung;
  double body_level, lung_level, spine_level, spine_half_width;
  double rib_frequency, rib_phase, rib_amplitude, rib_tilt;
  std::vector<ValueNoise> texture;

  AnatomyTemplate(std::size_t k, double size) {
    Rng rng(derive_seed(kTemplateSeed, {k}));
    auto u = [&](double lo, double hi) { return uniform(rng, lo, hi); };
    body = {0.5 + u(-0.03, 0.03), 0.52 + u(-0.02, 0.02), u(0.38, 0.46), u(0.40, 0.47)};
    const double dx = u(0.15, 0.21), cy = u(0.44, 0.52);
    const double rx = u(0.10, 0.15), ry = u(0.18, 0.27);
    left_lung = {0.5 - dx, cy + u(-0.03, 0.03), rx, ry * u(0.9, 1.1)};
    right_lung = {0.5 + dx, cy + u(-0.03, 0.03), rx * u(0.85, 1.15), ry};
    body_level = u(0.50, 0.62);
    lung_level = u(0.22, 0.34);
    spine_level = u(0.66, 0.78);
    spine_half_width = u(0.025, 0.05);
    rib_frequency = u(4.0, 8.0);
    rib_phase = u(0.0, 2 * std::numbers::pi);
    rib_amplitude = u(0.04, 0.09);
    rib_tilt = u(-0.3, 0.3);
    const double spacings[] = {2.0, 4.0, 9.0};
    for (std::size_t s = 0; s < 3; ++s) texture.emplace_back(derive_seed(kTemplateSeed, {k, 100 + s}), size, spacings[s]);
  }

  // Intensity at template coordinates (u, v) in [0, 1]^2; (px, py) are the same point in pixels.
  double eval(double u, double v, double px, double py, double size, double texture_amplitude) const {
    const double edge = 1.5 / size;
    double value = 0.08;
    const double in_body = soft_inside(body.r2(u, v), edge / body.rx);
    value += (body_level - 0.08) * in_body;
    const double spine = 1.0 / (1.0 + std::exp((std::abs(u - body.cx) - spine_half_width) / edge));
    value += (spine_level - body_level) * spine * in_body;
    const double lungs = std::max(soft_inside(left_lung.r2(u, v), edge / left_lung.rx),
                                  soft_inside(right_lung.r2(u, v), edge / right_lung.rx));
    value += (lung_level - body_level) * lungs;
    const double rib = std::max(0.0, std::sin(2 * std::numbers::pi * rib_frequency * (v + rib_tilt * (u - 0.5)) + rib_phase));
    value += rib_amplitude * rib * rib * lungs;
    const double tex = 0.5 * texture[0](px, py) + 0.3 * texture[1](px, py) + 0.2 * texture[2](px, py);
    value += texture_amplitude * tex * in_body;
    return value;
  }
};

std::string format_id(std::size_t i) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "img_%06zu", i);
  return buf;
}

nlohmann::json params_to_json(const PhantomParams& p) {
  return {{"size", p.size},
          {"k_templates", p.k_templates},
          {"lesion_probability", p.lesion_probability},
          {"n_lesion_classes", p.n_lesion_classes},
          {"jitter", p.jitter},
          {"noise_amplitude", p.noise_amplitude},
          {"texture_amplitude", p.texture_amplitude},
          {"lesion_contrast", p.lesion_contrast},
          {"generator_version", p.generator_version}};
}

PhantomParams params_from_json(const nlohmann::json& j) {
  PhantomParams p;
  p.size = j.at("size").get<std::size_t>();
  p.k_templates = j.at("k_templates").get<std::size_t>();
  p.lesion_probability = j.at("lesion_probability").get<double>();
  p.n_lesion_classes = j.at("n_lesion_classes").get<std::size_t>();
  p.jitter = j.at("jitter").get<double>();
  p.noise_amplitude = j.at("noise_amplitude").get<double>();
  p.texture_amplitude = j.at("texture_amplitude").get<double>();
  p.lesion_contrast = j.at("lesion_contrast").get<double>();
  p.generator_version = j.at("generator_version").get<std::string>();
  return p;
}

}  // namespace

void PhantomParams::validate() const {
  if (size < 16) throw ParameterError("size must be >= 16, got " + std::to_string(size));
  if (k_templates < 1) throw ParameterError("k_templates must be >= 1");
  if (!(lesion_probability >= 0.0 && lesion_probability <= 1.0)) {
    throw ParameterError("lesion_probability must be in [0, 1], got " + std::to_string(lesion_probability));
  }
  if (n_lesion_classes < 1) throw ParameterError("n_lesion_classes must be >= 1");
  if (jitter < 0.0 || noise_amplitude < 0.0 || texture_amplitude < 0.0 || lesion_contrast < 0.0) {
    throw ParameterError("jitter, noise_amplitude, texture_amplitude and lesion_contrast must be >= 0");
  }
}

SampleRecord generate_phantom(std::uint64_t seed, const PhantomParams& params) {
  params.validate();
  const std::size_t n = params.size;
  const double size = static_cast<double>(n);
  Rng rng(derive_seed(seed, {0}));
  SampleRecord rec;
  rec.pseudo_class = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, params.k_templates - 1)(rng));
  const AnatomyTemplate tmpl(static_cast<std::size_t>(rec.pseudo_class), size);

  std::normal_distribution<double> gauss(0.0, 1.0);
  const double shift_x = gauss(rng) * 1.5 * params.jitter / 64.0;
  const double shift_y = gauss(rng) * 1.5 * params.jitter / 64.0;
  const double zoom = 1.0 + gauss(rng) * 0.03 * params.jitter;

  const ValueNoise fine(derive_seed(seed, {1}), size, 1.0);
  const ValueNoise coarse(derive_seed(seed, {2}), size, 3.0);

  rec.image = Image(n, n, 1);
  for (std::size_t y = 0; y < n; ++y) {
    for (std::size_t x = 0; x < n; ++x) {
      const double u0 = (static_cast<double>(x) + 0.5) / size;
      const double v0 = (static_cast<double>(y) + 0.5) / size;
      const double u = (u0 - 0.5 - shift_x) / zoom + 0.5;
      const double v = (v0 - 0.5 - shift_y) / zoom + 0.5;
      double value = tmpl.eval(u, v, u * size, v * size, size, params.texture_amplitude);
      if (params.noise_amplitude > 0.0) {
        value += params.noise_amplitude * (0.6 * fine(static_cast<double>(x), static_cast<double>(y)) +
                                           0.4 * coarse(static_cast<double>(x), static_cast<double>(y)));
      }
      rec.image.at(y, x) = value;
    }
  }

  rec.lesion_present = bernoulli(rng, params.lesion_probability);
  if (rec.lesion_present) {
    const int cls = static_cast<int>(std::uniform_int_distribution<std::size_t>(0, params.n_lesion_classes - 1)(rng));
    rec.lesion_class = cls;
    const double scale = size / 64.0;
    const double r = uniform(rng, 2.5, 4.5) * scale;
    const double rx = cls == 1 ? 1.6 * r : r;
    const double ry = cls == 1 ? 0.8 * r : r;
    const double angle = uniform(rng, 0.0, std::numbers::pi);
    const double cx = uniform(rng, 0.22, 0.78) * size;
    const double cy = uniform(rng, 0.25, 0.75) * size;
    const double ca = std::cos(angle), sa = std::sin(angle);
    rec.mask.assign(n * n, 0);
    for (std::size_t y = 0; y < n; ++y) {
      for (std::size_t x = 0; x < n; ++x) {
        const double dx = static_cast<double>(x) + 0.5 - cx, dy = static_cast<double>(y) + 0.5 - cy;
        const double a = (ca * dx + sa * dy) / rx, b = (-sa * dx + ca * dy) / ry;
        const double d2 = a * a + b * b;
        if (d2 <= 1.0) {
          rec.mask[y * n + x] = 1;
          rec.image.at(y, x) += params.lesion_contrast * (0.6 + 0.4 * (1.0 - d2));
        }
      }
    }
    const auto comps = label_components(rec.mask, n, n);
    rec.boxes = component_boxes(comps, n, n);
  }

  for (auto& v : rec.image.pixels) v = std::round(std::clamp(v, 0.0, 1.0) * 255.0) / 255.0;
  return rec;
}

nlohmann::json to_json(const DatasetManifest& m) {
  nlohmann::json records = nlohmann::json::array();
  for (const auto& r : m.records) {
    nlohmann::json boxes = nlohmann::json::array();
    for (const auto& b : r.boxes) boxes.push_back({b.x_min, b.y_min, b.x_max, b.y_max});
    records.push_back({{"image_id", r.image_id},
                       {"image_file", r.image_file},
                       {"mask_file", r.mask_file ? nlohmann::json(*r.mask_file) : nlohmann::json(nullptr)},
                       {"lesion_present", r.lesion_present},
                       {"lesion_class", r.lesion_class ? nlohmann::json(*r.lesion_class) : nlohmann::json(nullptr)},
                       {"pseudo_class", r.pseudo_class},
                       {"boxes", boxes}});
  }
  return {{"seed", m.seed},
          {"n_samples", m.n_samples},
          {"K_templates", m.k_templates},
          {"lesion_probability", m.lesion_probability},
          {"generator_version", m.generator_version},
          {"params", params_to_json(m.params)},
          {"records", records}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  try {
    m.seed = j.at("seed").get<std::uint64_t>();
    m.n_samples = j.at("n_samples").get<std::size_t>();
    m.k_templates = j.at("K_templates").get<std::size_t>();
    m.lesion_probability = j.at("lesion_probability").get<double>();
    m.generator_version = j.at("generator_version").get<std::string>();
    m.params = params_from_json(j.at("params"));
    for (const auto& r : j.at("records")) {
      RecordMeta meta;
      meta.image_id = r.at("image_id").get<std::string>();
      meta.image_file = r.at("image_file").get<std::string>();
      if (!r.at("mask_file").is_null()) meta.mask_file = r.at("mask_file").get<std::string>();
      meta.lesion_present = r.at("lesion_present").get<bool>();
      if (!r.at("lesion_class").is_null()) meta.lesion_class = r.at("lesion_class").get<int>();
      if (r.contains("pseudo_class") && !r.at("pseudo_class").is_null()) {
        meta.pseudo_class = r.at("pseudo_class").get<int>();
      } else {
        meta.pseudo_class = -1;
      }
      for (const auto& b : r.at("boxes")) {
        meta.boxes.push_back({b.at(0).get<int>(), b.at(1).get<int>(), b.at(2).get<int>(), b.at(3).get<int>()});
      }
      m.records.push_back(std::move(meta));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("malformed dataset manifest: ") + e.what());
  }
  if (m.records.size() != m.n_samples) throw ConfigError("manifest record count does not match n_samples");
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dir) {
  const auto path = dir / "manifest.json";
  std::ifstream in(path);
  if (!in) throw StorageError("cannot read " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("malformed " + path.string() + ": " + e.what());
  }
  return manifest_from_json(j);
}

DatasetManifest build_dataset(std::uint64_t seed, std::size_t n, const PhantomParams& params,
                              const std::filesystem::path& out_dir) {
  params.validate();
  if (n < 1) throw ParameterError("n must be >= 1");
  std::error_code ec;
  std::filesystem::create_directories(out_dir / "images", ec);
  if (!ec) std::filesystem::create_directories(out_dir / "masks", ec);
  if (ec) throw StorageError("cannot create " + out_dir.string() + ": " + ec.message());

  DatasetManifest m;
  m.seed = seed;
  m.n_samples = n;
  m.k_templates = params.k_templates;
  m.lesion_probability = params.lesion_probability;
  m.generator_version = params.generator_version;
  m.params = params;
  for (std::size_t i = 0; i < n; ++i) {
    SampleRecord rec = generate_phantom(derive_seed(seed, {i}), params);
    RecordMeta meta;
    meta.image_id = format_id(i);
    meta.image_file = "images/" + meta.image_id + ".png";
    write_png_gray(out_dir / meta.image_file, rec.image);
    if (rec.lesion_present) {
      meta.mask_file = "masks/" + meta.image_id + ".png";
      write_png_mask(out_dir / *meta.mask_file, rec.mask, params.size, params.size);
    }
    meta.lesion_present = rec.lesion_present;
    meta.lesion_class = rec.lesion_class;
    meta.pseudo_class = rec.pseudo_class;
    meta.boxes = rec.boxes;
    m.records.push_back(std::move(meta));
  }
  std::ofstream out(out_dir / "manifest.json");
  out << to_json(m).dump(2) << '\n';
  if (!out) throw StorageError("cannot write " + (out_dir / "manifest.json").string());
  return m;
}

Dataset load_dataset(const std::filesystem::path& dir) {
  Dataset ds;
  ds.manifest = read_manifest(dir);
  ds.samples.reserve(ds.manifest.records.size());
  for (const auto& meta : ds.manifest.records) {
    LoadedSample s;
    s.meta = meta;
    s.image = read_png_gray(dir / meta.image_file);
    if (meta.mask_file) {
      std::size_t h = 0, w = 0;
      s.mask = read_png_mask(dir / *meta.mask_file, h, w);
      if (h != s.image.height || w != s.image.width) throw StorageError("mask shape mismatch for " + meta.image_id);
    } else {
      s.mask.assign(s.image.height * s.image.width, 0);
    }
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

std::vector<std::string> split_label_fraction(std::span<const RecordMeta> records, const SplitSpec& spec) {
  if (records.empty()) throw PreconditionError("cannot split an empty manifest");
  if (!(spec.fraction > 0.0 && spec.fraction <= 1.0)) {
    throw ParameterError("fraction must be in (0, 1], got " + std::to_string(spec.fraction));
  }
  const std::size_t n = records.size();
  std::vector<std::string> out;
  if (spec.fraction == 1.0) {
    for (const auto& r : records) out.push_back(r.image_id);
    return out;
  }
  const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n))));
  std::vector<std::uint8_t> chosen(n, 0);
  Rng rng(derive_seed(spec.seed, {0x5b1172}));
  auto pick = [&](std::vector<std::size_t> pool, std::size_t count) {
    std::shuffle(pool.begin(), pool.end(), rng);
    for (std::size_t i = 0; i < count && i < pool.size(); ++i) chosen[pool[i]] = 1;
  };
  if (spec.stratify_on == Stratify::lesion_present) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < n; ++i) (records[i].lesion_present ? pos : neg).push_back(i);
    auto k_pos = static_cast<std::size_t>(
        std::llround(static_cast<double>(k) * static_cast<double>(pos.size()) / static_cast<double>(n)));
    k_pos = std::min(k_pos, pos.size());
    std::size_t k_neg = k - k_pos;
    if (k_neg > neg.size()) {
      k_neg = neg.size();
      k_pos = k - k_neg;
    }
    pick(pos, k_pos);
    pick(neg, k_neg);
  } else {
    std::vector<std::size_t> all(n);
    for (std::size_t i = 0; i < n; ++i) all[i] = i;
    pick(all, k);
  }
  for (std::size_t i = 0; i < n; ++i) {
    if (chosen[i]) out.push_back(records[i].image_id);
  }
  return out;
}

}  // namespace dira::data
