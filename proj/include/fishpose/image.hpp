#pragma once

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <vector>

namespace fishpose {

using Rgb = std::array<std::uint8_t, 3>;

/// Interleaved 8-bit RGB raster, row-major, row 0 at the top.
class Image {
 public:
  Image() = default;
  Image(int width, int height, Rgb fill = {0, 0, 0});

  int width() const { return width_; }
  int height() const { return height_; }
  bool empty() const { return pixels_.empty(); }

  std::uint8_t& at(int col, int row, int channel) { return pixels_[index(col, row) + channel]; }
  std::uint8_t at(int col, int row, int channel) const { return pixels_[index(col, row) + channel]; }

  Rgb pixel(int col, int row) const {
    const std::size_t i = index(col, row);
    return {pixels_[i], pixels_[i + 1], pixels_[i + 2]};
  }
  void set_pixel(int col, int row, const Rgb& c) {
    const std::size_t i = index(col, row);
    pixels_[i] = c[0];
    pixels_[i + 1] = c[1];
    pixels_[i + 2] = c[2];
  }

  const std::vector<std::uint8_t>& data() const { return pixels_; }
  std::vector<std::uint8_t>& data() { return pixels_; }

  bool operator==(const Image&) const = default;

 private:
  std::size_t index(int col, int row) const {
    return (static_cast<std::size_t>(row) * width_ + col) * 3;
  }

  int width_ = 0;
  int height_ = 0;
  std::vector<std::uint8_t> pixels_;
};

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

Image read_png(const std::filesystem::path& path);
void write_png(const Image& image, const std::filesystem::path& path);

/// Bilinear sample at continuous pixel coordinates (integer values are pixel
/// centers). Coordinates outside the raster clamp to the border.
Eigen::Vector3d sample_bilinear(const Image& image, double col, double row);

Rgb to_rgb(const Eigen::Vector3d& v);

/// Crops [x0, x0 + w) x [y0, y0 + h) (continuous pixel-edge coordinates) and
/// resamples it bilinearly to out_width x out_height.
Image resample_region(const Image& image, double x0, double y0, double w, double h,
                      int out_width, int out_height);

}  // namespace fishpose
