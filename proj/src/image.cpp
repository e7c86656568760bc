#include "dira/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>
#include <string>

namespace dira {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_file(const std::filesystem::path& path, const char* mode) {
  FilePtr f(std::fopen(path.string().c_str(), mode));
  if (!f) throw StorageError("cannot open " + path.string());
  return f;
}

void write_png(const std::filesystem::path& path, const std::uint8_t* data, std::size_t height, std::size_t width,
               int color_type, std::size_t bytes_per_pixel) {
  FilePtr f = open_file(path, "wb");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw StorageError("libpng initialization failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw StorageError("failed writing " + path.string());
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(width), static_cast<png_uint_32>(height), 8, color_type,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < height; ++y) {
    png_write_row(png, const_cast<png_bytep>(data + y * width * bytes_per_pixel));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  if (std::ferror(f.get())) throw StorageError("failed writing " + path.string());
}

std::vector<std::uint8_t> read_png8(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  FilePtr f = open_file(path, "rb");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw StorageError("libpng initialization failed for " + path.string());
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw StorageError("failed reading " + path.string());
  }
  png_init_io(png, f.get());
  png_read_info(png, info);
  const auto color = png_get_color_type(png, info);
  const auto depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_RGB || color == PNG_COLOR_TYPE_RGB_ALPHA || color == PNG_COLOR_TYPE_PALETTE) {
    png_set_rgb_to_gray_fixed(png, 1, -1, -1);
  }
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);
  width = png_get_image_width(png, info);
  height = png_get_image_height(png, info);
  std::vector<std::uint8_t> data(height * width);
  for (std::size_t y = 0; y < height; ++y) png_read_row(png, data.data() + y * width, nullptr);
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return data;
}

}  // namespace

void validate_image(const Image& image) {
  if (image.height < 16 || image.width < 16) {
    throw PreconditionError("image must be at least 16x16, got " + std::to_string(image.height) + "x" +
                            std::to_string(image.width));
  }
  if (image.pixels.size() != image.height * image.width * image.channels) {
    throw PreconditionError("image pixel buffer does not match its shape");
  }
  for (double v : image.pixels) {
    if (!std::isfinite(v) || v < 0.0 || v > 1.0) throw PreconditionError("image values must be finite and in [0, 1]");
  }
}

Image resize_bilinear(const Image& image, std::size_t out_h, std::size_t out_w, double x0, double y0, double w,
                      double h) {
  Image out(out_h, out_w, image.channels);
  const double sx = w / static_cast<double>(out_w);
  const double sy = h / static_cast<double>(out_h);
  const auto max_x = static_cast<double>(image.width - 1);
  const auto max_y = static_cast<double>(image.height - 1);
  for (std::size_t oy = 0; oy < out_h; ++oy) {
    const double fy = std::clamp(y0 + (static_cast<double>(oy) + 0.5) * sy - 0.5, 0.0, max_y);
    const auto iy = static_cast<std::size_t>(fy);
    const std::size_t iy1 = std::min(iy + 1, image.height - 1);
    const double ty = fy - static_cast<double>(iy);
    for (std::size_t ox = 0; ox < out_w; ++ox) {
      const double fx = std::clamp(x0 + (static_cast<double>(ox) + 0.5) * sx - 0.5, 0.0, max_x);
      const auto ix = static_cast<std::size_t>(fx);
      const std::size_t ix1 = std::min(ix + 1, image.width - 1);
      const double tx = fx - static_cast<double>(ix);
      for (std::size_t c = 0; c < image.channels; ++c) {
        const double top = image.at(iy, ix, c) * (1.0 - tx) + image.at(iy, ix1, c) * tx;
        const double bottom = image.at(iy1, ix, c) * (1.0 - tx) + image.at(iy1, ix1, c) * tx;
        out.at(oy, ox, c) = top * (1.0 - ty) + bottom * ty;
      }
    }
  }
  return out;
}

template <class T>
nn::Tensor<T> to_batch(std::span<const Image> images) {
  if (images.empty()) throw ShapeError("to_batch: empty image list");
  const auto& first = images.front();
  nn::Tensor<T> out({images.size(), first.channels, first.height, first.width});
  for (std::size_t n = 0; n < images.size(); ++n) {
    const auto& img = images[n];
    if (!img.same_shape(first)) throw ShapeError("to_batch: images differ in shape");
    for (std::size_t c = 0; c < img.channels; ++c)
      for (std::size_t y = 0; y < img.height; ++y)
        for (std::size_t x = 0; x < img.width; ++x) out.at(n, c, y, x) = static_cast<T>(img.at(y, x, c));
  }
  return out;
}

template <class T>
Image from_batch(const nn::Tensor<T>& batch, std::size_t index) {
  Image img(batch.dim(2), batch.dim(3), batch.dim(1));
  for (std::size_t c = 0; c < img.channels; ++c)
    for (std::size_t y = 0; y < img.height; ++y)
      for (std::size_t x = 0; x < img.width; ++x) img.at(y, x, c) = static_cast<double>(batch.at(index, c, y, x));
  return img;
}

template nn::Tensor<float> to_batch<float>(std::span<const Image>);
template nn::Tensor<double> to_batch<double>(std::span<const Image>);
template Image from_batch<float>(const nn::Tensor<float>&, std::size_t);
template Image from_batch<double>(const nn::Tensor<double>&, std::size_t);

void write_png_gray(const std::filesystem::path& path, const Image& image) {
  std::vector<std::uint8_t> bytes(image.height * image.width);
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.pixels[i * image.channels], 0.0, 1.0);
    bytes[i] = static_cast<std::uint8_t>(std::lround(v * 255.0));
  }
  write_png(path, bytes.data(), image.height, image.width, PNG_COLOR_TYPE_GRAY, 1);
}

Image read_png_gray(const std::filesystem::path& path) {
  std::size_t h = 0, w = 0;
  const auto bytes = read_png8(path, h, w);
  Image img(h, w, 1);
  for (std::size_t i = 0; i < bytes.size(); ++i) img.pixels[i] = static_cast<double>(bytes[i]) / 255.0;
  return img;
}

void write_png_mask(const std::filesystem::path& path, const std::vector<std::uint8_t>& mask, std::size_t height,
                    std::size_t width) {
  std::vector<std::uint8_t> bytes(mask.size());
  for (std::size_t i = 0; i < mask.size(); ++i) bytes[i] = mask[i] ? 255 : 0;
  write_png(path, bytes.data(), height, width, PNG_COLOR_TYPE_GRAY, 1);
}

std::vector<std::uint8_t> read_png_mask(const std::filesystem::path& path, std::size_t& height, std::size_t& width) {
  auto bytes = read_png8(path, height, width);
  for (auto& b : bytes) b = b >= 128 ? 1 : 0;
  return bytes;
}

void write_png_rgb(const std::filesystem::path& path, const std::vector<std::uint8_t>& rgb, std::size_t height,
                   std::size_t width) {
  if (rgb.size() != height * width * 3) throw ShapeError("write_png_rgb: buffer size mismatch");
  write_png(path, rgb.data(), height, width, PNG_COLOR_TYPE_RGB, 3);
}

}  // namespace dira
