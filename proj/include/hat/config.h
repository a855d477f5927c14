#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "hat/errors.h"

namespace hat {

enum class HeadKind { PixelShuffle, SameResolution };

/// Hyperparameters of one network. Defaults are the standard HAT model
/// for x4 super-resolution.
struct ModelConfig {
  std::string name = "hat";
  int in_channels = 3;
  int out_channels = 3;
  int channels = 180;
  int rhag_count = 6;
  int hab_per_rhag = 6;
  int heads = 6;
  int window = 16;
  double alpha = 0.01;     // CAB fusion weight
  int beta = 3;            // CAB squeeze factor
  double gamma = 0.5;      // OCA overlap ratio
  int ca_reduction = 16;   // channel-attention squeeze
  double mlp_ratio = 2.0;
  int scale = 4;
  HeadKind head = HeadKind::PixelShuffle;
  int head_features = 64;  // width of the reconstruction convolutions
  bool use_cab = true;
  bool use_ocab = true;

  void validate() const;

  int squeezed_channels() const { return channels / beta; }
  int ca_channels() const;
  int mlp_hidden() const { return static_cast<int>(channels * mlp_ratio); }
  int overlapped_window() const;
  // Pixel-shuffle factors applied in order (x4 = two x2 stages).
  std::vector<int> upsample_factors() const;

  // Canonical `key=value` lines in fixed key order.
  std::string to_text() const;
  static ModelConfig from_text(std::string_view text);
  // Applies one `key=value` setting; throws ConfigError on unknown keys.
  void set(std::string_view key, std::string_view value);

  static ModelConfig preset(std::string_view name);
  static std::vector<std::string> preset_names();

  bool operator==(const ModelConfig&) const = default;
};

// Shortest text that parses back to the same double.
std::string format_real(double v);
double parse_real(std::string_view text, std::string_view what);
int parse_int(std::string_view text, std::string_view what);

}  // namespace hat
