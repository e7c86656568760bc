#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <vector>

#include "dira/nn/tensor.hpp"

namespace dira {

// Real-valued image, row-major [height, width, channels], values in [0, 1].
struct Image {
  std::size_t height = 0;
  std::size_t width = 0;
  std::size_t channels = 1;
  std::vector<double> pixels;

  Image() = default;
  Image(std::size_t h, std::size_t w, std::size_t c = 1, double fill = 0.0)
      : height(h), width(w), channels(c), pixels(h * w * c, fill) {}

  double& at(std::size_t y, std::size_t x, std::size_t c = 0) { return pixels[(y * width + x) * channels + c]; }
  double at(std::size_t y, std::size_t x, std::size_t c = 0) const { return pixels[(y * width + x) * channels + c]; }
  bool same_shape(const Image& o) const { return height == o.height && width == o.width && channels == o.channels; }
  bool operator==(const Image& o) const = default;
};

// Throws PreconditionError unless every value is finite and inside [0, 1] and H, W >= 16.
void validate_image(const Image& image);

// Bilinear resample of the sub-window [x0, x0 + w) x [y0, y0 + h) (fractional
// coordinates allowed) onto an out_h x out_w grid; pixel centers are aligned.
Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w, double x0, double y0, double w,
                      double h);
inline Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w) {
  return resize_bilinear(image, out_h, out_w, 0.0, 0.0, static_cast<double>(image.width),
                         static_cast<double>(image.height));
}

// Stacks single-channel images into an NCHW tensor.
template <class T>
nn::Tensor<T> to_batch(std::span<const Image> images);
template <class T>
Image from_batch(const nn::Tensor<T>& batch, std::size_t index);

// 8-bit grayscale PNG I/O. Values are quantized with round(v * 255).
void write_png_gray(const std::filesystem::path& path, const Image& image);
Image read_png_gray(const std::filesystem::path& path);
void write_png_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width);
std::vector<std::uint8_t> read_png_mask(const std::filesystem::path& path, std::size_t& height, std::size_t& width);
// 8-bit RGB, row-major interleaved.
void write_png_rgb(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t height,
                   std::size_t width);

}  // namespace dira
