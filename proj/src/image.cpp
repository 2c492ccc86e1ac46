// SPDX-License-Identifier: Apache-2.0
#include "fpe/image.hpp"

#include <jpeglib.h>
#include <png.h>

#include <algorithm>
#include <cmath>
#include <csetjmp>
#include <cstring>

#include "fpe/io.hpp"

namespace fpe {

namespace {

Image decode_png(std::span<const uint8_t> bytes) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size())) {
    throw io::IoError(std::string("png decode failed: ") + img.message);
  }
  img.format = PNG_FORMAT_RGB;
  Image out(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, out.rgb.data(), 0, nullptr)) {
    png_image_free(&img);
    throw io::IoError(std::string("png decode failed: ") + img.message);
  }
  return out;
}

struct JpegErr {
  jpeg_error_mgr mgr;
  std::jmp_buf jump;
};

void jpeg_fail(j_common_ptr cinfo) {
  auto* err = reinterpret_cast<JpegErr*>(cinfo->err);
  std::longjmp(err->jump, 1);
}

Image decode_jpeg(std::span<const uint8_t> bytes) {
  jpeg_decompress_struct cinfo;
  JpegErr err;
  cinfo.err = jpeg_std_error(&err.mgr);
  err.mgr.error_exit = jpeg_fail;
  Image out;
  if (setjmp(err.jump)) {
    jpeg_destroy_decompress(&cinfo);
    throw io::IoError("jpeg decode failed");
  }
  jpeg_create_decompress(&cinfo);
  jpeg_mem_src(&cinfo, bytes.data(), static_cast<unsigned long>(bytes.size()));
  jpeg_read_header(&cinfo, TRUE);
  cinfo.out_color_space = JCS_RGB;
  jpeg_start_decompress(&cinfo);
  out = Image(static_cast<int>(cinfo.output_width), static_cast<int>(cinfo.output_height));
  while (cinfo.output_scanline < cinfo.output_height) {
    JSAMPROW row = out.rgb.data() + static_cast<size_t>(cinfo.output_scanline) * out.width * 3;
    jpeg_read_scanlines(&cinfo, &row, 1);
  }
  jpeg_finish_decompress(&cinfo);
  jpeg_destroy_decompress(&cinfo);
  return out;
}

double cubic(double x) {
  constexpr double a = -0.5;
  x = std::abs(x);
  if (x < 1.0) return ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0;
  if (x < 2.0) return (((x - 5.0) * x + 8.0) * x - 4.0) * a;
  return 0.0;
}

double triangle(double x) {
  x = std::abs(x);
  return x < 1.0 ? 1.0 - x : 0.0;
}

struct Taps {
  std::vector<int64_t> first;
  std::vector<std::vector<double>> weights;
};

// Per-output-sample contributions along one axis, following PIL's
// precompute_coeffs.
Taps make_taps(int64_t in, int64_t out, Filter f) {
  const double scale = static_cast<double>(in) / static_cast<double>(out);
  const double fscale = std::max(scale, 1.0);
  const double base_support = f == Filter::bicubic ? 2.0 : 1.0;
  const double support = base_support * fscale;
  Taps t;
  t.first.resize(static_cast<size_t>(out));
  t.weights.resize(static_cast<size_t>(out));
  for (int64_t i = 0; i < out; ++i) {
    const double center = (static_cast<double>(i) + 0.5) * scale;
    const int64_t lo = std::max<int64_t>(0, static_cast<int64_t>(center - support + 0.5));
    const int64_t hi = std::min<int64_t>(in, static_cast<int64_t>(center + support + 0.5));
    std::vector<double> w;
    double sum = 0.0;
    for (int64_t j = lo; j < hi; ++j) {
      const double x = (static_cast<double>(j) - center + 0.5) / fscale;
      const double v = f == Filter::bicubic ? cubic(x) : triangle(x);
      w.push_back(v);
      sum += v;
    }
    if (sum != 0.0) {
      for (auto& v : w) v /= sum;
    }
    t.first[static_cast<size_t>(i)] = lo;
    t.weights[static_cast<size_t>(i)] = std::move(w);
  }
  return t;
}

}  // namespace

Image decode_image(std::span<const uint8_t> bytes) {
  static const uint8_t kPng[] = {0x89, 'P', 'N', 'G'};
  if (bytes.size() >= 4 && std::memcmp(bytes.data(), kPng, 4) == 0) return decode_png(bytes);
  if (bytes.size() >= 3 && bytes[0] == 0xff && bytes[1] == 0xd8 && bytes[2] == 0xff) return decode_jpeg(bytes);
  throw ValidationError("unsupported image format (expected PNG or JPEG)");
}

Image read_image(const std::filesystem::path& path) {
  const auto bytes = io::read_file(path);
  try {
    return decode_image(bytes);
  } catch (const ValidationError& e) {
    throw ValidationError(path.string() + ": " + e.what());
  }
}

std::vector<uint8_t> encode_png(const Image& image) {
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.rgb.data(), 0, nullptr)) {
    throw io::IoError(std::string("png encode failed: ") + img.message);
  }
  std::vector<uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.rgb.data(), 0, nullptr)) {
    throw io::IoError(std::string("png encode failed: ") + img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const Image& image) {
  io::write_file_atomic(path, encode_png(image));
}

Tensor image_to_tensor(const Image& image) {
  const int64_t h = image.height, w = image.width;
  Tensor t({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      const uint8_t* p = image.pixel(static_cast<int>(x), static_cast<int>(y));
      for (int64_t c = 0; c < 3; ++c) t[(c * h + y) * w + x] = static_cast<float>(p[c]) / 127.5f - 1.0f;
    }
  }
  return t;
}

Image tensor_to_image(const Tensor& t) {
  if (t.rank() != 3 || t.dim(0) != 3) throw ShapeError("expected [3, H, W] image tensor, got " + shape_str(t.shape()));
  const int64_t h = t.dim(1), w = t.dim(2);
  Image img(static_cast<int>(w), static_cast<int>(h));
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      uint8_t* p = img.pixel(static_cast<int>(x), static_cast<int>(y));
      for (int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp((t[(c * h + y) * w + x] + 1.0f) * 0.5f, 0.0f, 1.0f);
        p[c] = static_cast<uint8_t>(std::lround(v * 255.0f));
      }
    }
  }
  return img;
}

Tensor resize(const Tensor& planes, int64_t out_h, int64_t out_w, Filter filter) {
  if (planes.rank() != 3) throw ShapeError("resize expects [C, H, W], got " + shape_str(planes.shape()));
  const int64_t c = planes.dim(0), h = planes.dim(1), w = planes.dim(2);
  const Taps tx = make_taps(w, out_w, filter), ty = make_taps(h, out_h, filter);
  Tensor horiz({c, h, out_w});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < h; ++y) {
      const float* row = planes.data() + (ch * h + y) * w;
      for (int64_t x = 0; x < out_w; ++x) {
        const auto& wts = tx.weights[static_cast<size_t>(x)];
        double acc = 0.0;
        for (size_t k = 0; k < wts.size(); ++k) acc += wts[k] * row[tx.first[static_cast<size_t>(x)] + static_cast<int64_t>(k)];
        horiz[(ch * h + y) * out_w + x] = static_cast<float>(acc);
      }
    }
  }
  Tensor out({c, out_h, out_w});
  for (int64_t ch = 0; ch < c; ++ch) {
    for (int64_t y = 0; y < out_h; ++y) {
      const auto& wts = ty.weights[static_cast<size_t>(y)];
      for (int64_t x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (size_t k = 0; k < wts.size(); ++k) {
          acc += wts[k] * horiz[(ch * h + ty.first[static_cast<size_t>(y)] + static_cast<int64_t>(k)) * out_w + x];
        }
        out[(ch * out_h + y) * out_w + x] = static_cast<float>(acc);
      }
    }
  }
  return out;
}

Image resize(const Image& image, int out_w, int out_h, Filter filter) {
  const int64_t h = image.height, w = image.width;
  Tensor planes({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      for (int64_t c = 0; c < 3; ++c) planes[(c * h + y) * w + x] = image.pixel(static_cast<int>(x), static_cast<int>(y))[c];
    }
  }
  const Tensor r = resize(planes, out_h, out_w, filter);
  Image out(out_w, out_h);
  for (int64_t y = 0; y < out_h; ++y) {
    for (int64_t x = 0; x < out_w; ++x) {
      for (int64_t c = 0; c < 3; ++c) {
        const float v = std::clamp(r[(c * out_h + y) * out_w + x], 0.0f, 255.0f);
        out.pixel(static_cast<int>(x), static_cast<int>(y))[c] = static_cast<uint8_t>(std::lround(v));
      }
    }
  }
  return out;
}

Image center_crop(const Image& image, int w, int h) {
  if (w > image.width || h > image.height) throw ValidationError("crop larger than image");
  const int left = static_cast<int>(std::lround((image.width - w) / 2.0 - 1e-9));
  const int top = static_cast<int>(std::lround((image.height - h) / 2.0 - 1e-9));
  Image out(w, h);
  for (int y = 0; y < h; ++y) std::memcpy(out.pixel(0, y), image.pixel(left, top + y), static_cast<size_t>(w) * 3);
  return out;
}

Tensor bilinear_resize_2d(const Tensor& grid, int64_t out_h, int64_t out_w) {
  if (grid.rank() != 2) throw ShapeError("bilinear_resize_2d expects [H, W], got " + shape_str(grid.shape()));
  const int64_t h = grid.dim(0), w = grid.dim(1);
  Tensor out({out_h, out_w});
  const double sy = static_cast<double>(h) / out_h, sx = static_cast<double>(w) / out_w;
  for (int64_t y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int64_t y0 = std::min<int64_t>(static_cast<int64_t>(fy), h - 1);
    const int64_t y1 = std::min<int64_t>(y0 + 1, h - 1);
    const double ly = fy - static_cast<double>(y0);
    for (int64_t x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int64_t x0 = std::min<int64_t>(static_cast<int64_t>(fx), w - 1);
      const int64_t x1 = std::min<int64_t>(x0 + 1, w - 1);
      const double lx = fx - static_cast<double>(x0);
      const double top = grid[y0 * w + x0] * (1.0 - lx) + grid[y0 * w + x1] * lx;
      const double bot = grid[y1 * w + x0] * (1.0 - lx) + grid[y1 * w + x1] * lx;
      out[y * out_w + x] = static_cast<float>(top * (1.0 - ly) + bot * ly);
    }
  }
  return out;
}

Image heatmap_image(const Tensor& grid, int scale) {
  if (grid.rank() != 2) throw ShapeError("heatmap expects [H, W], got " + shape_str(grid.shape()));
  const int h = static_cast<int>(grid.dim(0)), w = static_cast<int>(grid.dim(1));
  Image img(w * scale, h * scale);
  for (int y = 0; y < h * scale; ++y) {
    for (int x = 0; x < w * scale; ++x) {
      const float v = std::clamp(grid[(y / scale) * w + x / scale], 0.0f, 1.0f);
      const auto g = static_cast<uint8_t>(std::lround(v * 255.0f));
      uint8_t* p = img.pixel(x, y);
      p[0] = p[1] = p[2] = g;
    }
  }
  return img;
}

Image compose_grid(const std::vector<Image>& cells, int cols, int pad) {
  if (cells.empty()) return Image(1, 1, 255);
  const int cw = cells.front().width, ch = cells.front().height;
  for (const auto& c : cells) {
    if (c.width != cw || c.height != ch) throw ShapeError("grid cells must share one size");
  }
  cols = std::max(1, std::min(cols, static_cast<int>(cells.size())));
  const int rows = (static_cast<int>(cells.size()) + cols - 1) / cols;
  Image out(cols * cw + (cols + 1) * pad, rows * ch + (rows + 1) * pad, 255);
  for (size_t i = 0; i < cells.size(); ++i) {
    const int r = static_cast<int>(i) / cols, c = static_cast<int>(i) % cols;
    const int ox = pad + c * (cw + pad), oy = pad + r * (ch + pad);
    for (int y = 0; y < ch; ++y) std::memcpy(out.pixel(ox, oy + y), cells[i].pixel(0, y), static_cast<size_t>(cw) * 3);
  }
  return out;
}

}  // namespace fpe
