#include "hat/image.h"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <memory>

#include "hat/errors.h"

namespace hat {

ImageBuffer::ImageBuffer(int h, int w, int c, std::uint8_t fill)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

ImageF::ImageF(int h, int w, int c, double fill)
    : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, fill) {}

ImageF to_real(const ImageBuffer& img) {
  ImageF out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) out.data[i] = img.data[i] / 255.0;
  return out;
}

ImageBuffer quantize(const ImageF& img) {
  ImageBuffer out(img.height, img.width, img.channels);
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    out.data[i] = static_cast<std::uint8_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  }
  return out;
}

ImageF crop(const ImageF& img, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || h < 0 || w < 0 || top + h > img.height || left + w > img.width) {
    throw ShapeError("crop outside image");
  }
  ImageF out(h, w, img.channels);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      for (int c = 0; c < img.channels; ++c) out.at(y, x, c) = img.at(top + y, left + x, c);
    }
  }
  return out;
}

template <typename T>
Tensor<T> image_to_tensor(const ImageF& img) {
  Tensor<T> t(Shape{1, img.channels, img.height, img.width});
  auto d = t.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(img.height) * img.width;
  for (int c = 0; c < img.channels; ++c) {
    for (std::size_t p = 0; p < plane; ++p) d[c * plane + p] = static_cast<T>(img.data[p * img.channels + c]);
  }
  return t;
}

template <typename T>
ImageF tensor_to_image(const Tensor<T>& t, std::int64_t index) {
  if (t.rank() != 4 || index < 0 || index >= t.dim(0)) throw ShapeError("tensor_to_image expects [N,C,H,W]");
  const int c = static_cast<int>(t.dim(1)), h = static_cast<int>(t.dim(2)), w = static_cast<int>(t.dim(3));
  ImageF img(h, w, c);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  const auto d = t.data().subspan(static_cast<std::size_t>(index) * c * plane);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t p = 0; p < plane; ++p) img.data[p * c + ch] = static_cast<double>(d[ch * plane + p]);
  }
  return img;
}

template Tensor<float> image_to_tensor(const ImageF&);
template Tensor<double> image_to_tensor(const ImageF&);
template ImageF tensor_to_image(const Tensor<float>&, std::int64_t);
template ImageF tensor_to_image(const Tensor<double>&, std::int64_t);

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const { std::fclose(f); }
};
using File = std::unique_ptr<std::FILE, FileCloser>;

File open_file(const std::filesystem::path& path, const char* mode) {
  File f(std::fopen(path.c_str(), mode));
  if (!f) throw DataError("cannot open " + path.string());
  return f;
}

[[noreturn]] void png_fail(png_structp png, png_const_charp msg) {
  // libpng requires the handler not to return; unwind via longjmp.
  auto* text = static_cast<std::string*>(png_get_error_ptr(png));
  if (text) *text = msg;
  png_longjmp(png, 1);
}

void png_warn(png_structp, png_const_charp) {}

void write_rows(const std::filesystem::path& path, int h, int w, int color, int depth,
                const std::vector<png_bytep>& rows) {
  File f = open_file(path, "wb");
  std::string error;
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) throw DataError("png write init failed");
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw DataError("png write failed for " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_IHDR(png, info, w, h, depth, color, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  png_write_image(png, const_cast<png_bytepp>(rows.data()));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace

ImageBuffer read_png(const std::filesystem::path& path) {
  File f = open_file(path, "rb");
  unsigned char sig[8];
  if (std::fread(sig, 1, 8, f.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw DataError("not a PNG file: " + path.string());
  }
  std::string error;
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, &error, png_fail, png_warn);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!info) throw DataError("png read init failed");
  ImageBuffer img;
  std::vector<png_bytep> rows;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw DataError("corrupt PNG " + path.string() + ": " + error);
  }
  png_init_io(png, f.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  if (png_get_bit_depth(png, info) == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && png_get_bit_depth(png, info) < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (png_get_valid(png, info, PNG_INFO_tRNS)) png_set_tRNS_to_alpha(png);
  png_set_strip_alpha(png);
  png_read_update_info(png, info);
  const int channels = png_get_channels(png, info);
  img = ImageBuffer(static_cast<int>(png_get_image_height(png, info)), static_cast<int>(png_get_image_width(png, info)),
                    channels);
  rows.resize(static_cast<std::size_t>(img.height));
  for (int y = 0; y < img.height; ++y) rows[y] = img.data.data() + static_cast<std::size_t>(y) * img.width * channels;
  png_read_image(png, rows.data());
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  if (img.channels != 1 && img.channels != 3) throw DataError("unsupported channel count in " + path.string());
  return img;
}

void write_png(const std::filesystem::path& path, const ImageBuffer& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("PNG output needs 1 or 3 channels");
  std::vector<png_bytep> rows(static_cast<std::size_t>(img.height));
  auto* base = const_cast<std::uint8_t*>(img.data.data());
  for (int y = 0; y < img.height; ++y) rows[y] = base + static_cast<std::size_t>(y) * img.width * img.channels;
  write_rows(path, img.height, img.width, img.channels == 1 ? PNG_COLOR_TYPE_GRAY : PNG_COLOR_TYPE_RGB, 8, rows);
}

void write_png16_gray(const std::filesystem::path& path, const std::vector<double>& values, int h, int w) {
  if (values.size() != static_cast<std::size_t>(h) * w) throw ShapeError("heatmap size does not match extent");
  // PNG stores 16-bit samples big-endian.
  std::vector<std::uint8_t> bytes(values.size() * 2);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto v = static_cast<std::uint16_t>(std::lround(std::clamp(values[i], 0.0, 1.0) * 65535.0));
    bytes[2 * i] = static_cast<std::uint8_t>(v >> 8);
    bytes[2 * i + 1] = static_cast<std::uint8_t>(v & 0xff);
  }
  std::vector<png_bytep> rows(static_cast<std::size_t>(h));
  for (int y = 0; y < h; ++y) rows[y] = bytes.data() + static_cast<std::size_t>(y) * w * 2;
  write_rows(path, h, w, PNG_COLOR_TYPE_GRAY, 16, rows);
}

}  // namespace hat
