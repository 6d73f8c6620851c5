#include "fishpose/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

namespace fishpose {

Image::Image(int width, int height, Rgb fill) : width_(width), height_(height) {
  if (width < 1 || height < 1) throw std::invalid_argument("Image: extents must be >= 1");
  pixels_.resize(static_cast<std::size_t>(width) * height * 3);
  for (std::size_t i = 0; i < pixels_.size(); i += 3) {
    pixels_[i] = fill[0];
    pixels_[i + 1] = fill[1];
    pixels_[i + 2] = fill[2];
  }
}

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void png_error_handler(png_structp, png_const_charp msg) { throw ImageError(msg); }
void png_warning_handler(png_structp, png_const_charp) {}

}  // namespace

Image read_png(const std::filesystem::path& path) {
  FilePtr file(std::fopen(path.c_str(), "rb"));
  if (!file) throw ImageError("cannot open " + path.string());

  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler,
                                           png_warning_handler);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_read_struct(png, info, nullptr); }
  } guard{&png, &info};

  png_init_io(png, file.get());
  png_read_info(png, info);

  const png_uint_32 width = png_get_image_width(png, info);
  const png_uint_32 height = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);

  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  if (png_get_rowbytes(png, info) != width * 3) throw ImageError("unsupported PNG layout: " + path.string());

  Image image(static_cast<int>(width), static_cast<int>(height));
  std::vector<png_bytep> rows(height);
  for (png_uint_32 r = 0; r < height; ++r) rows[r] = image.data().data() + static_cast<std::size_t>(r) * width * 3;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  return image;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  if (image.empty()) throw ImageError("write_png: empty image");
  FilePtr file(std::fopen(path.c_str(), "wb"));
  if (!file) throw ImageError("cannot write " + path.string());

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, png_error_handler,
                                            png_warning_handler);
  png_infop info = png_create_info_struct(png);
  struct Guard {
    png_structp* png;
    png_infop* info;
    ~Guard() { png_destroy_write_struct(png, info); }
  } guard{&png, &info};

  png_init_io(png, file.get());
  png_set_IHDR(png, info, image.width(), image.height(), 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE,
               PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int r = 0; r < image.height(); ++r) {
    png_write_row(png, image.data().data() + static_cast<std::size_t>(r) * image.width() * 3);
  }
  png_write_end(png, nullptr);
}

Eigen::Vector3d sample_bilinear(const Image& image, double col, double row) {
  const double c = std::clamp(col, 0.0, static_cast<double>(image.width() - 1));
  const double r = std::clamp(row, 0.0, static_cast<double>(image.height() - 1));
  const int c0 = static_cast<int>(std::floor(c));
  const int r0 = static_cast<int>(std::floor(r));
  const int c1 = std::min(c0 + 1, image.width() - 1);
  const int r1 = std::min(r0 + 1, image.height() - 1);
  const double fc = c - c0;
  const double fr = r - r0;

  Eigen::Vector3d out;
  for (int ch = 0; ch < 3; ++ch) {
    const double top = (1.0 - fc) * image.at(c0, r0, ch) + fc * image.at(c1, r0, ch);
    const double bottom = (1.0 - fc) * image.at(c0, r1, ch) + fc * image.at(c1, r1, ch);
    out[ch] = (1.0 - fr) * top + fr * bottom;
  }
  return out;
}

Rgb to_rgb(const Eigen::Vector3d& v) {
  Rgb out;
  for (int ch = 0; ch < 3; ++ch) {
    out[ch] = static_cast<std::uint8_t>(std::clamp(std::lround(v[ch]), 0L, 255L));
  }
  return out;
}

Image resample_region(const Image& image, double x0, double y0, double w, double h,
                      int out_width, int out_height) {
  Image out(out_width, out_height);
  const double sx = w / out_width;
  const double sy = h / out_height;
  for (int row = 0; row < out_height; ++row) {
    const double src_row = y0 + (row + 0.5) * sy - 0.5;
    for (int col = 0; col < out_width; ++col) {
      const double src_col = x0 + (col + 0.5) * sx - 0.5;
      out.set_pixel(col, row, to_rgb(sample_bilinear(image, src_col, src_row)));
    }
  }
  return out;
}

}  // namespace fishpose
