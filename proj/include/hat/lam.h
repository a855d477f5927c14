#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <vector>

#include "hat/tensor.h"

namespace hat {

enum class DetectorKind {
  // Summed forward-difference gradient magnitude over the patch.
  GradientMagnitude,
  // Plain sum of the patch values; linear, used to check exactness.
  PatchSum,
};

struct LamConfig {
  double sigma = 1.5;
  int steps = 100;
  // Target window in output coordinates: columns [x, x+l), rows [y, y+l).
  int x = 0;
  int y = 0;
  int l = 16;
  DetectorKind detector = DetectorKind::GradientMagnitude;
  // Evaluate path points concurrently. Only safe when the model's own
  // parameters do not require gradients.
  bool parallel = false;

  void validate() const;
};

struct LamResult {
  // [H, W] of the input, channel-summed.
  std::vector<double> attribution;
  std::int64_t height = 0;
  std::int64_t width = 0;
  double completeness_residual = 0;
  // D(F(I)) and D(F(I')) for the input and the fully blurred baseline.
  double detector_input = 0;
  double detector_baseline = 0;
  double gini = 0;
  double di = 100;
  // Set when the attribution map is identically zero.
  bool zero_map = false;
};

template <typename T> using ModelFn = std::function<Tensor<T>(const Tensor<T>&)>;

// Normalized square Gaussian of side 2*ceil(3 sigma)+1 stored row-major;
// sigma below 1e-6 gives the 1x1 delta kernel.
std::vector<double> gaussian_kernel(double sigma);
int gaussian_kernel_side(double sigma);

// Reflect-padded Gaussian blur of every channel plane of img [N, C, H, W].
template <typename T> Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma);

// Point theta of the progressive blur path: blur at sigma * (1 - theta).
template <typename T> Tensor<T> blur_path(const Tensor<T>& img, double sigma, double theta);

// hr [N, C, H, W]; differentiable scalar.
template <typename T>
Tensor<T> gradient_detector(const Tensor<T>& hr, int x, int y, int l);
template <typename T>
Tensor<T> patch_sum_detector(const Tensor<T>& hr, int x, int y, int l);
template <typename T>
Tensor<T> apply_detector(DetectorKind kind, const Tensor<T>& hr, int x, int y, int l);

// img [1, C, H, W]; the model maps it to [1, C', H', W'] with the patch inside.
template <typename T>
LamResult lam(const ModelFn<T>& model, const Tensor<T>& img, const LamConfig& cfg);

struct GiniResult {
  double gini = 0;
  bool all_zero = false;
};

// Values must be nonnegative.
GiniResult gini(std::vector<double> values);
// 100 * (1 - gini); exact for the closed forms of uniform and one-hot maps.
double diffusion_index(const std::vector<double>& values);

// Raw map: u32 height, u32 width, then little-endian f32 values row-major.
void write_raw_map(const std::filesystem::path& path, const std::vector<double>& map, std::int64_t h,
                   std::int64_t w);
std::vector<float> read_raw_map(const std::filesystem::path& path, std::int64_t& h, std::int64_t& w);

}  // namespace hat
