#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

namespace dira {

// Axis-aligned pixel box, half-open: covers x in [x_min, x_max), y in [y_min, y_max).
struct BBox {
  int x_min = 0;
  int y_min = 0;
  int x_max = 0;
  int y_max = 0;

  long area() const { return static_cast<long>(x_max - x_min) * static_cast<long>(y_max - y_min); }
  bool valid() const { return x_min < x_max && y_min < y_max; }
  bool operator==(const BBox&) const = default;
};

double box_iou(const BBox& a, const BBox& b);

// 4-connected component labelling of the pixels where `on[i]` is nonzero.
// Labels are 1-based in raster order of each component's first pixel; 0 marks background.
struct Components {
  std::vector<int> labels;
  int count = 0;
};
Components label_components(const std::vector<std::uint8_t>& on, std::size_t height, std::size_t width);

// Tight box of every component, indexed by label - 1.
std::vector<BBox> component_boxes(const Components& comps, std::size_t height, std::size_t width);

}  // namespace dira
