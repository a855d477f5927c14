#pragma once

#include <vector>

#include "hat/image.h"

namespace hat {

// Luma on [0,1]: (16 + 65.481 R + 128.553 G + 24.966 B) / 255 for RGB;
// single-channel images are used as-is. Returned as a 1-channel image.
ImageF to_y(const ImageF& img);

// PSNR = 10 log10(1 / MSE) on Y after cropping `crop_border` pixels from
// every side. Identical inputs give +infinity.
double psnr_y(const ImageF& a, const ImageF& b, int crop_border);

// Mean SSIM on Y with an 11x11 Gaussian window (sigma 1.5), valid
// positions only, C1 = 0.01^2 and C2 = 0.03^2 on the [0,1] range.
double ssim_y(const ImageF& a, const ImageF& b, int crop_border);

// PSNR of two equally sized sample arrays on the [0,1] range.
double psnr(const std::vector<double>& a, const std::vector<double>& b);

}  // namespace hat
