#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "dira/datasets.hpp"
#include "dira/geometry.hpp"
#include "dira/image.hpp"
#include "dira/transfer.hpp"

namespace dira::loc {

// Nonnegative [H, W] map at image resolution.
struct Heatmap {
  std::size_t height = 0;
  std::size_t width = 0;
  std::vector<double> values;
};

// ReLU(sum_k alpha_k A^k), alpha_k the spatial mean of G^k, upsampled bilinearly.
// A and G are [C, s, s].
Heatmap cam_from_activations(const nn::Tensor<double>& activations, const nn::Tensor<double>& gradients,
                             std::size_t out_h, std::size_t out_w);

// Grad-CAM on the last encoder stage of a classification model. The score is
// the lesion logit for target 1 and its negation for target 0.
std::vector<Heatmap> grad_cam(const xfer::TaskModel& model, std::span<const Image> images, int target_class = 1);

// floor(255 (v - min) / (max - min) + 0.5); a constant map gives zeros.
std::vector<std::uint8_t> normalize_heatmap(const Heatmap& h);

// How the {low, high} thresholds combine.
//   two_threshold: components of pixels >= low that reach a peak >= high
//   low_only / high_only: components of pixels >= that single threshold
enum class BoxRule { two_threshold, low_only, high_only };
std::string to_string(BoxRule r);
BoxRule box_rule_from_string(const std::string& name);

std::vector<BBox> heatmap_to_boxes(std::span<const std::uint8_t> h255, std::size_t height, std::size_t width,
                                   int low = 60, int high = 180, BoxRule rule = BoxRule::two_threshold);

struct LocalizationScore {
  double delta = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

// Any predicted box with IoU >= delta against any ground-truth box counts the
// image correct. Images without ground truth are left out of the total.
LocalizationScore score_localization(const std::vector<std::vector<BBox>>& predicted,
                                     const std::vector<std::vector<BBox>>& ground_truth, double delta);

// Inclusive sweep "start:stop:step", e.g. 0.1:0.6:0.1 gives six values.
std::vector<double> parse_deltas(const std::string& spec);

struct LocalizationRun {
  std::vector<std::vector<BBox>> ground_truth;                     // at model resolution
  std::vector<std::pair<BoxRule, std::vector<std::vector<BBox>>>> predictions;
};

// Heatmaps and boxes for every lesion-positive image of `ds`, all three rules.
// Ground-truth boxes are rescaled to the model input size.
LocalizationRun localize_dataset(const xfer::TaskModel& model, const data::Dataset& ds,
                                 const std::filesystem::path& overlay_dir = {}, std::size_t max_overlays = 0);

std::string localization_csv_header();
std::string localization_csv_row(const std::string& method, const LocalizationScore& s);

}  // namespace dira::loc
