// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "fpe/tensor.hpp"

namespace fpe {

/// 8-bit interleaved RGB image.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> rgb;

  Image() = default;
  Image(int w, int h, uint8_t fill = 0) : width(w), height(h), rgb(static_cast<size_t>(w) * h * 3, fill) {}
  uint8_t* pixel(int x, int y) { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
  const uint8_t* pixel(int x, int y) const { return rgb.data() + (static_cast<size_t>(y) * width + x) * 3; }
  bool operator==(const Image&) const = default;
};

// PNG or JPEG, detected from the leading bytes. Grayscale and alpha inputs
// are converted to RGB.
Image decode_image(std::span<const uint8_t> bytes);
Image read_image(const std::filesystem::path& path);
std::vector<uint8_t> encode_png(const Image& image);
void write_png(const std::filesystem::path& path, const Image& image);

// [3, H, W] in [-1, 1] <-> 8-bit RGB.
Tensor image_to_tensor(const Image& image);
Image tensor_to_image(const Tensor& t);

// Separable resampling with an antialiasing kernel when shrinking, in the
// style of PIL's Image.resize. Works on float planes [C, H, W].
enum class Filter { bilinear, bicubic };
Tensor resize(const Tensor& planes, int64_t out_h, int64_t out_w, Filter filter);
Image resize(const Image& image, int out_w, int out_h, Filter filter);
Image center_crop(const Image& image, int w, int h);

// Plain bilinear interpolation of a [H, W] grid with half-pixel centers and
// no antialiasing (the align_corners=False convention).
Tensor bilinear_resize_2d(const Tensor& grid, int64_t out_h, int64_t out_w);

// Grayscale heatmap in [0, 1] -> RGB image, optionally upscaled.
Image heatmap_image(const Tensor& grid, int scale = 1);
// Tiles equally sized images row-major with `pad` pixels of white border.
Image compose_grid(const std::vector<Image>& cells, int cols, int pad = 4);

}  // namespace fpe
