#include "hat/metrics.h"

#include <cmath>
#include <limits>
#include <string>

#include "hat/errors.h"

namespace hat {
namespace {

void check_extents(const ImageF& a, const ImageF& b, int crop_border) {
  if (!a.same_extent(b)) throw ShapeError("metric inputs differ in extent");
  if (crop_border < 0 || 2 * crop_border >= a.height || 2 * crop_border >= a.width) {
    throw ShapeError("crop border " + std::to_string(crop_border) + " leaves no pixels");
  }
}

ImageF cropped_y(const ImageF& img, int border) {
  return crop(to_y(img), border, border, img.height - 2 * border, img.width - 2 * border);
}

}  // namespace

ImageF to_y(const ImageF& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw ShapeError("Y conversion needs 1 or 3 channels");
  ImageF y(img.height, img.width, 1);
  for (int i = 0; i < img.height; ++i) {
    for (int j = 0; j < img.width; ++j) {
      y.at(i, j, 0) = (16.0 + 65.481 * img.at(i, j, 0) + 128.553 * img.at(i, j, 1) + 24.966 * img.at(i, j, 2)) / 255.0;
    }
  }
  return y;
}

double psnr(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size() || a.empty()) throw ShapeError("psnr inputs differ in size");
  double se = 0;
  for (std::size_t i = 0; i < a.size(); ++i) se += (a[i] - b[i]) * (a[i] - b[i]);
  if (se == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / (se / static_cast<double>(a.size())));
}

double psnr_y(const ImageF& a, const ImageF& b, int crop_border) {
  check_extents(a, b, crop_border);
  return psnr(cropped_y(a, crop_border).data, cropped_y(b, crop_border).data);
}

double ssim_y(const ImageF& a, const ImageF& b, int crop_border) {
  check_extents(a, b, crop_border);
  const ImageF x = cropped_y(a, crop_border), y = cropped_y(b, crop_border);
  constexpr int kSide = 11, kR = 5;
  if (x.height < kSide || x.width < kSide) throw ShapeError("SSIM needs at least 11x11 pixels after cropping");
  double win[kSide][kSide];
  double total = 0;
  for (int i = 0; i < kSide; ++i) {
    for (int j = 0; j < kSide; ++j) {
      win[i][j] = std::exp(-((i - kR) * (i - kR) + (j - kR) * (j - kR)) / (2 * 1.5 * 1.5));
      total += win[i][j];
    }
  }
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  double acc = 0;
  const int oh = x.height - kSide + 1, ow = x.width - kSide + 1;
  for (int r = 0; r < oh; ++r) {
    for (int c = 0; c < ow; ++c) {
      double mx = 0, my = 0, sxx = 0, syy = 0, sxy = 0;
      for (int i = 0; i < kSide; ++i) {
        for (int j = 0; j < kSide; ++j) {
          const double w = win[i][j] / total, vx = x.at(r + i, c + j, 0), vy = y.at(r + i, c + j, 0);
          mx += w * vx;
          my += w * vy;
          sxx += w * vx * vx;
          syy += w * vy * vy;
          sxy += w * vx * vy;
        }
      }
      const double vx = sxx - mx * mx, vy = syy - my * my, cxy = sxy - mx * my;
      acc += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  }
  return acc / (static_cast<double>(oh) * ow);
}

}  // namespace hat
