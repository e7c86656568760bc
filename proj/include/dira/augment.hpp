#pragma once

#include <cstdint>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "dira/geometry.hpp"
#include "dira/image.hpp"

namespace dira::aug {

// Pipeline order is fixed: crop, flip, jitter, blur, cutout, shuffle.
// crop and flip are geometric and also shape the restoration target; the rest
// only distort the view.
enum class Op { crop, flip, jitter, blur, cutout, shuffle };

std::string to_string(Op op);
Op op_from_string(const std::string& name);

struct CutoutSpec {
  std::size_t count = 1;
  double size_fraction = 0.25;  // side of each square relative to the output side
};

struct AugmentationConfig {
  std::size_t output_size = 64;
  std::pair<double, double> crop_scale_range{0.6, 1.0};  // area fraction of the source
  double flip_probability = 0.5;
  double jitter_strength = 0.3;
  std::pair<double, double> blur_sigma_range{0.1, 1.0};
  CutoutSpec cutout;
  std::size_t shuffle_grid = 4;
  double cutout_fill = 0.5;
  std::set<Op> enabled_ops{Op::crop, Op::flip, Op::jitter, Op::blur, Op::cutout, Op::shuffle};

  bool enabled(Op op) const { return enabled_ops.count(op) != 0; }
  void validate() const;

  static AugmentationConfig none(std::size_t output_size);
};

nlohmann::json to_json(const AugmentationConfig& config);
// Strict: unknown keys raise ConfigError. Missing keys keep their defaults.
AugmentationConfig augmentation_config_from_json(const nlohmann::json& j);

// Every random decision behind one augmented view.
struct AugRecord {
  std::size_t output_size = 0;
  double crop_x0 = 0.0, crop_y0 = 0.0, crop_w = 0.0, crop_h = 0.0;
  bool flip = false;
  bool jitter = false;
  double contrast = 1.0, brightness = 0.0;
  bool blur = false;
  double blur_sigma = 0.0;
  std::vector<BBox> cutouts;
  double cutout_fill = 0.5;
  std::size_t shuffle_grid = 0;          // 0 when shuffling is off
  std::vector<std::size_t> permutation;

  bool operator==(const AugRecord&) const = default;
};

nlohmann::json to_json(const AugRecord& record);
AugRecord aug_record_from_json(const nlohmann::json& j);

// Draws a record for an image of the given size. All randomness comes from `seed`.
AugRecord sample_record(std::size_t height, std::size_t width, const AugmentationConfig& config, std::uint64_t seed);

// Crop and flip only: the clean counterpart of a view.
Image render_target(const Image& image, const AugRecord& record);
// Full pipeline.
Image replay(const Image& image, const AugRecord& record);

std::pair<Image, AugRecord> apply_T(const Image& image, const AugmentationConfig& config, std::uint64_t seed);

Image flip_horizontal(const Image& image);
// v' = clamp((v - mean) * contrast + mean + brightness, 0, 1)
Image jitter(const Image& image, double contrast, double brightness);
Image gaussian_blur(const Image& image, double sigma);
Image apply_cutout(const Image& image, const std::vector<BBox>& boxes, double fill);
// Output cell i (raster order on the n x n grid) is input cell permutation[i].
Image shuffle_patches(const Image& image, std::size_t n, const std::vector<std::size_t>& permutation);

struct ViewPair {
  Image view1;
  Image view2;
  Image target1;
  AugRecord record1;
  AugRecord record2;

  nlohmann::json aug_record() const;
};

ViewPair make_view_pair(const Image& x1, const Image& x2, const AugmentationConfig& config, std::uint64_t seed);
ViewPair replay_view_pair(const Image& x1, const Image& x2, const nlohmann::json& aug_record);

}  // namespace dira::aug
