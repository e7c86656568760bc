#include "dira/geometry.hpp"

#include <algorithm>
#include <utility>

namespace dira {

double box_iou(const BBox& a, const BBox& b) {
  const int ix = std::max(0, std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min));
  const int iy = std::max(0, std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min));
  const long inter = static_cast<long>(ix) * iy;
  const long uni = a.area() + b.area() - inter;
  return uni > 0 ? static_cast<double>(inter) / static_cast<double>(uni) : 0.0;
}

Components label_components(const std::vector<std::uint8_t>& on, std::size_t height, std::size_t width) {
  Components out;
  out.labels.assign(height * width, 0);
  std::vector<std::pair<std::size_t, std::size_t>> stack;
  for (std::size_t y0 = 0; y0 < height; ++y0) {
    for (std::size_t x0 = 0; x0 < width; ++x0) {
      if (!on[y0 * width + x0] || out.labels[y0 * width + x0]) continue;
      const int label = ++out.count;
      out.labels[y0 * width + x0] = label;
      stack.emplace_back(y0, x0);
      while (!stack.empty()) {
        const auto [y, x] = stack.back();
        stack.pop_back();
        auto visit = [&](std::size_t ny, std::size_t nx) {
          const std::size_t i = ny * width + nx;
          if (on[i] && !out.labels[i]) {
            out.labels[i] = label;
            stack.emplace_back(ny, nx);
          }
        };
        if (y > 0) visit(y - 1, x);
        if (y + 1 < height) visit(y + 1, x);
        if (x > 0) visit(y, x - 1);
        if (x + 1 < width) visit(y, x + 1);
      }
    }
  }
  return out;
}

std::vector<BBox> component_boxes(const Components& comps, std::size_t height, std::size_t width) {
  std::vector<BBox> boxes(static_cast<std::size_t>(comps.count),
                          BBox{static_cast<int>(width), static_cast<int>(height), 0, 0});
  for (std::size_t y = 0; y < height; ++y) {
    for (std::size_t x = 0; x < width; ++x) {
      const int l = comps.labels[y * width + x];
      if (!l) continue;
      auto& b = boxes[static_cast<std::size_t>(l - 1)];
      b.x_min = std::min(b.x_min, static_cast<int>(x));
      b.y_min = std::min(b.y_min, static_cast<int>(y));
      b.x_max = std::max(b.x_max, static_cast<int>(x) + 1);
      b.y_max = std::max(b.y_max, static_cast<int>(y) + 1);
    }
  }
  return boxes;
}

}  // namespace dira
