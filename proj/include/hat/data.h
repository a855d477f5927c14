#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "hat/image.h"

namespace hat {

// Cubic convolution kernel with a = -0.5.
double cubic_kernel(double x);

// Downsample by s in {2,3,4} with the width-scaled (anti-aliased) cubic
// kernel and half-sample symmetric boundary. Extents must divide by s.
ImageF bicubic_downsample(const ImageF& img, int s);
ImageBuffer bicubic_resize(const ImageBuffer& img, int s);
// Crops bottom/right so both extents divide by s.
ImageF mod_crop(const ImageF& img, int s);

// Zero-mean normal samples with standard deviation sigma/255.
std::vector<double> gaussian_noise(std::size_t n, double sigma, std::uint64_t seed);
ImageF add_gaussian_noise(const ImageF& img, double sigma, std::uint64_t seed);
ImageBuffer add_gaussian_noise(const ImageBuffer& img, double sigma, std::uint64_t seed);

struct PairRecord {
  std::filesystem::path lq;
  std::filesystem::path hq;
  int scale = 1;
};

struct PairManifest {
  // Free-form descriptor such as "bicubic x4" or "noise 25".
  std::string degradation;
  std::vector<PairRecord> records;
};

// Lines `lq<TAB>hq<TAB>scale`; `# degradation=<text>` sets the descriptor.
// Relative paths resolve against the manifest's directory.
PairManifest read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const PairManifest& m);

struct ImagePair {
  ImageF lq;
  ImageF hq;
  int scale = 1;
};

// Loads both images and checks hq extent == scale * lq extent.
ImagePair load_pair(const PairRecord& rec);
void check_pair(const ImagePair& pair);

// Aligned crops at lq offset (top, left) and hq offset scale * (top, left).
ImagePair crop_pair(const ImagePair& pair, int top, int left, int patch_lq);
ImagePair sample_patch(const ImagePair& pair, int patch_lq, std::mt19937_64& rng);

// Dihedral transform: bit 2 transposes first, then bit 0 flips
// horizontally and bit 1 vertically. Code 6 is a 90 degree
// counter-clockwise rotation.
ImageF augment(const ImageF& img, int code);
ImagePair augment(const ImagePair& pair, int code);
int inverse_augment_code(int code);

}  // namespace hat
