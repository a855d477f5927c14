#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "hat/tensor.h"

namespace hat {

// 8-bit samples, interleaved HWC.
struct ImageBuffer {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<std::uint8_t> data;

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c, std::uint8_t fill = 0);
  std::uint8_t& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  std::uint8_t at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
};

// Real-valued view in [0, 1], interleaved HWC.
struct ImageF {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  ImageF() = default;
  ImageF(int h, int w, int c, double fill = 0);
  double& at(int y, int x, int c) { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  double at(int y, int x, int c) const { return data[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
  bool same_extent(const ImageF& o) const { return height == o.height && width == o.width && channels == o.channels; }
};

ImageF to_real(const ImageBuffer& img);
// Clamps to [0,1] and rounds to the nearest 8-bit level.
ImageBuffer quantize(const ImageF& img);

ImageF crop(const ImageF& img, int top, int left, int h, int w);

// [1, C, H, W] tensors.
template <typename T> Tensor<T> image_to_tensor(const ImageF& img);
template <typename T> ImageF tensor_to_image(const Tensor<T>& t, std::int64_t index = 0);

// 8-bit (and 16-bit, reduced to 8) grayscale or RGB; alpha is dropped and
// palettes expanded. Throws DataError.
ImageBuffer read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const ImageBuffer& img);
// Single-channel 16-bit output of values in [0,1].
void write_png16_gray(const std::filesystem::path& path, const std::vector<double>& values, int h, int w);

}  // namespace hat
