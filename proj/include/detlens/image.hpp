#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace detlens {

/// Row-major dense 2D array; rows index y, columns index x.
template <typename Scalar>
using Grid = Eigen::Array<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Multi-plane image with float intensities in [0, 255].
struct Image {
  std::vector<Grid<float>> planes;

  Image() = default;
  Image(int width, int height, int channels, float fill = 0.0f);

  int width() const { return planes.empty() ? 0 : static_cast<int>(planes.front().cols()); }
  int height() const { return planes.empty() ? 0 : static_cast<int>(planes.front().rows()); }
  int channels() const { return static_cast<int>(planes.size()); }
  bool empty() const { return width() == 0 || height() == 0; }

  /// Per-pixel mean over channels.
  Grid<float> intensity() const;
};

struct ImageSize {
  int width{0};
  int height{0};
};

/// Reads only the header of a PNG or JPEG file.
ImageSize read_image_size(const std::filesystem::path& path);

/// Decodes PNG or JPEG (by signature, not extension).
Image read_image(const std::filesystem::path& path);

Image decode_image(const std::string& bytes);

/// Writes 8-bit PNG; values are rounded and clamped to [0, 255].
void write_png(const std::filesystem::path& path, const Image& image);

std::string encode_png(const Image& image);

std::string base64_encode(const std::string& bytes);
std::string base64_decode(const std::string& text);

}  // namespace detlens
