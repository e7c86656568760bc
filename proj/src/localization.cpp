#include "dira/localization.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstdio>

#include "dira/errors.hpp"

namespace dira::loc {

namespace fs = std::filesystem;
using xfer::Real;

Heatmap cam_from_activations(const nn::Tensor<double>& activations, const nn::Tensor<double>& gradients,
                             std::size_t out_h, std::size_t out_w) {
  if (activations.shape() != gradients.shape() || activations.shape().size() != 3) {
    throw ShapeError("Grad-CAM expects matching [C, s, s] activations and gradients");
  }
  const std::size_t c = activations.dim(0), h = activations.dim(1), w = activations.dim(2), hw = h * w;
  Image cam(h, w);
  for (std::size_t k = 0; k < c; ++k) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < hw; ++i) alpha += gradients[k * hw + i];
    alpha /= static_cast<double>(hw);
    for (std::size_t i = 0; i < hw; ++i) cam.pixels[i] += alpha * activations[k * hw + i];
  }
  for (double& v : cam.pixels) v = std::max(0.0, v);
  const Image up = resize_bilinear(cam, out_h, out_w);
  return {out_h, out_w, up.pixels};
}

std::vector<Heatmap> grad_cam(const xfer::TaskModel& model, std::span<const Image> images, int target_class) {
  if (model.kind != xfer::TaskKind::classification) {
    throw ParameterError("Grad-CAM needs a classification model");
  }
  if (target_class != 0 && target_class != 1) throw ParameterError("target class must be 0 or 1");
  if (images.empty()) return {};
  const nn::Tensor<Real> batch = to_batch<Real>(images);
  const auto e = model.encoder(nn::Var<Real>(batch));
  auto scores = nn::reshape(model.classifier(e.y), {images.size()});
  if (target_class == 0) scores = nn::scale(scores, Real(-1));
  // Images do not interact (no batch norm in the encoder), so the gradient of
  // the summed score holds every per-image gradient at once.
  const auto total = nn::sum(scores);
  total.backward();
  if (!e.final_map.has_grad()) {
    throw InstrumentationError("no gradient reached the last encoder stage");
  }
  const auto& a = e.final_map.value();
  const auto& g = e.final_map.grad();
  const std::size_t per = a.size() / images.size();
  const nn::Shape one{a.dim(1), a.dim(2), a.dim(3)};
  std::vector<Heatmap> out;
  for (std::size_t b = 0; b < images.size(); ++b) {
    nn::Tensor<double> ab(one), gb(one);
    for (std::size_t i = 0; i < per; ++i) {
      ab[i] = a[b * per + i];
      gb[i] = g[b * per + i];
    }
    out.push_back(cam_from_activations(ab, gb, images[b].height, images[b].width));
  }
  for (const auto& p : model.params()) const_cast<nn::Var<Real>&>(p.var).zero_grad();
  return out;
}

std::vector<std::uint8_t> normalize_heatmap(const Heatmap& h) {
  if (h.values.empty()) throw PreconditionError("empty heatmap");
  const auto [lo, hi] = std::minmax_element(h.values.begin(), h.values.end());
  std::vector<std::uint8_t> out(h.values.size(), 0);
  const double range = *hi - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double v = std::floor(255.0 * (h.values[i] - *lo) / range + 0.5);
    out[i] = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
  }
  return out;
}

std::string to_string(BoxRule r) {
  switch (r) {
    case BoxRule::two_threshold: return "two_threshold";
    case BoxRule::low_only: return "low_only";
    case BoxRule::high_only: return "high_only";
  }
  return "?";
}

BoxRule box_rule_from_string(const std::string& name) {
  for (BoxRule r : {BoxRule::two_threshold, BoxRule::low_only, BoxRule::high_only})
    if (to_string(r) == name) return r;
  throw ConfigError("unknown box rule '" + name + "' (expected two_threshold, low_only or high_only)");
}

std::vector<BBox> heatmap_to_boxes(std::span<const std::uint8_t> h255, std::size_t height, std::size_t width, int low,
                                   int high, BoxRule rule) {
  if (h255.size() != height * width) throw ShapeError("heatmap size does not match height x width");
  if (!(0 <= low && low <= high && high <= 255)) throw ParameterError("thresholds must satisfy 0 <= low <= high <= 255");
  const int region = rule == BoxRule::high_only ? high : low;
  std::vector<std::uint8_t> on(h255.size());
  for (std::size_t i = 0; i < on.size(); ++i) on[i] = h255[i] >= region;
  const Components comps = label_components(on, height, width);
  const std::vector<BBox> boxes = component_boxes(comps, height, width);
  if (rule != BoxRule::two_threshold) return boxes;
  std::vector<int> peak(static_cast<std::size_t>(comps.count), 0);
  for (std::size_t i = 0; i < h255.size(); ++i) {
    const int l = comps.labels[i];
    if (l) peak[static_cast<std::size_t>(l - 1)] = std::max<int>(peak[static_cast<std::size_t>(l - 1)], h255[i]);
  }
  std::vector<BBox> out;
  for (std::size_t k = 0; k < boxes.size(); ++k)
    if (peak[k] >= high) out.push_back(boxes[k]);
  return out;
}

LocalizationScore score_localization(const std::vector<std::vector<BBox>>& predicted,
                                     const std::vector<std::vector<BBox>>& ground_truth, double delta) {
  if (!(delta > 0.0 && delta < 1.0)) throw ParameterError("delta must be in (0, 1)");
  if (predicted.size() != ground_truth.size()) throw ShapeError("prediction and ground-truth lists differ in length");
  LocalizationScore s;
  s.delta = delta;
  for (std::size_t i = 0; i < predicted.size(); ++i) {
    if (ground_truth[i].empty()) continue;
    ++s.total;
    bool hit = false;
    for (const auto& p : predicted[i])
      for (const auto& g : ground_truth[i]) hit = hit || box_iou(p, g) >= delta;
    s.correct += hit;
  }
  return s;
}

std::vector<double> parse_deltas(const std::string& spec) {
  auto number = [&](std::string_view s) {
    double v = 0.0;
    const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || ptr != s.data() + s.size()) throw ParameterError("bad delta sweep '" + spec + "'");
    return v;
  };
  const auto c1 = spec.find(':');
  const auto c2 = c1 == std::string::npos ? std::string::npos : spec.find(':', c1 + 1);
  if (c2 == std::string::npos) return {number(spec)};
  const std::string_view sv(spec);
  const double start = number(sv.substr(0, c1)), stop = number(sv.substr(c1 + 1, c2 - c1 - 1)),
               step = number(sv.substr(c2 + 1));
  if (!(step > 0.0) || stop < start) throw ParameterError("bad delta sweep '" + spec + "'");
  std::vector<double> out;
  const auto n = static_cast<std::size_t>(std::floor((stop - start) / step + 1e-9));
  // Rounded to 1e-9 so 0.1 + 2 * 0.1 prints and compares as 0.3.
  for (std::size_t i = 0; i <= n; ++i) out.push_back(std::round((start + static_cast<double>(i) * step) * 1e9) / 1e9);
  return out;
}

namespace {

BBox rescale(const BBox& b, double sx, double sy, int w, int h) {
  BBox r{static_cast<int>(std::floor(b.x_min * sx)), static_cast<int>(std::floor(b.y_min * sy)),
         static_cast<int>(std::ceil(b.x_max * sx)), static_cast<int>(std::ceil(b.y_max * sy))};
  r.x_min = std::clamp(r.x_min, 0, w - 1);
  r.y_min = std::clamp(r.y_min, 0, h - 1);
  r.x_max = std::clamp(r.x_max, r.x_min + 1, w);
  r.y_max = std::clamp(r.y_max, r.y_min + 1, h);
  return r;
}

void draw_box(std::vector<std::uint8_t>& rgb, std::size_t w, const BBox& b, std::uint8_t r, std::uint8_t g,
              std::uint8_t bl) {
  auto put = [&](int x, int y) {
    const std::size_t i = (static_cast<std::size_t>(y) * w + static_cast<std::size_t>(x)) * 3;
    rgb[i] = r;
    rgb[i + 1] = g;
    rgb[i + 2] = bl;
  };
  for (int x = b.x_min; x < b.x_max; ++x) {
    put(x, b.y_min);
    put(x, b.y_max - 1);
  }
  for (int y = b.y_min; y < b.y_max; ++y) {
    put(b.x_min, y);
    put(b.x_max - 1, y);
  }
}

// Gray image with the heatmap in the red channel; GT boxes blue, predictions green.
void write_overlay(const fs::path& path, const Image& img, const std::vector<std::uint8_t>& h255,
                   const std::vector<BBox>& gt, const std::vector<BBox>& pred) {
  const std::size_t n = img.height * img.width;
  std::vector<std::uint8_t> rgb(n * 3);
  for (std::size_t i = 0; i < n; ++i) {
    const auto v = static_cast<std::uint8_t>(std::lround(std::clamp(img.pixels[i], 0.0, 1.0) * 255.0));
    rgb[3 * i] = static_cast<std::uint8_t>((v + h255[i]) / 2);
    rgb[3 * i + 1] = v / 2;
    rgb[3 * i + 2] = v / 2;
  }
  for (const auto& b : gt) draw_box(rgb, img.width, b, 0, 0, 255);
  for (const auto& b : pred) draw_box(rgb, img.width, b, 0, 255, 0);
  write_png_rgb(path, rgb, img.height, img.width);
}

}  // namespace

LocalizationRun localize_dataset(const xfer::TaskModel& model, const data::Dataset& ds, const fs::path& overlay_dir,
                                 std::size_t max_overlays) {
  const std::size_t size = model.input_size;
  std::vector<Image> images;
  LocalizationRun run;
  std::vector<std::string> ids;
  for (const auto& s : ds.samples) {
    if (!s.meta.lesion_present || s.meta.boxes.empty()) continue;
    images.push_back(s.image.height == size && s.image.width == size ? s.image : resize_bilinear(s.image, size, size));
    const double sx = static_cast<double>(size) / static_cast<double>(s.image.width);
    const double sy = static_cast<double>(size) / static_cast<double>(s.image.height);
    std::vector<BBox> gt;
    for (const auto& b : s.meta.boxes) gt.push_back(rescale(b, sx, sy, static_cast<int>(size), static_cast<int>(size)));
    run.ground_truth.push_back(std::move(gt));
    ids.push_back(s.meta.image_id);
  }
  if (images.empty()) throw PreconditionError("dataset has no lesion-positive images to localize");
  for (BoxRule r : {BoxRule::two_threshold, BoxRule::low_only, BoxRule::high_only}) run.predictions.push_back({r, {}});
  if (max_overlays > 0) fs::create_directories(overlay_dir);

  constexpr std::size_t chunk = 64;
  for (std::size_t start = 0; start < images.size(); start += chunk) {
    const auto part = std::span<const Image>(images).subspan(start, std::min(chunk, images.size() - start));
    const auto maps = grad_cam(model, part, 1);
    for (std::size_t k = 0; k < maps.size(); ++k) {
      const auto h255 = normalize_heatmap(maps[k]);
      for (auto& [rule, preds] : run.predictions) preds.push_back(heatmap_to_boxes(h255, size, size, 60, 180, rule));
      const std::size_t i = start + k;
      if (i < max_overlays) {
        write_overlay(overlay_dir / (ids[i] + ".png"), images[i], h255, run.ground_truth[i],
                      run.predictions.front().second[i]);
      }
    }
  }
  return run;
}

std::string localization_csv_header() { return "method,delta,correct,total,accuracy"; }

std::string localization_csv_row(const std::string& method, const LocalizationScore& s) {
  char buf[160];
  std::snprintf(buf, sizeof buf, ",%.6g,%zu,%zu,%.9g", s.delta, s.correct, s.total, s.accuracy());
  return method + buf;
}

}  // namespace dira::loc
