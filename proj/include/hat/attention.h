#pragma once

#include <cstdint>
#include <vector>

#include "hat/ops.h"
#include "hat/tensor.h"

namespace hat {

/// Window geometry for one attention layer. Self-attention uses
/// overlap_ratio 0; overlapping cross-attention reads keys and values from
/// an (1 + overlap_ratio) * window patch centred on each query window.
struct WindowSpec {
  int window = 1;
  int shift = 0;
  double overlap_ratio = 0.0;

  static WindowSpec self_attention(int window, int shift = 0) { return {window, shift, 0.0}; }
  static WindowSpec overlapping(int window, double ratio) { return {window, 0, ratio}; }

  // Throws ConfigError on a non-integral overlapped extent or a bad shift.
  int overlapped() const;
  // Zero padding on each side of the overlapped patch.
  int overlap_pad() const { return (overlapped() - window) / 2; }
  void validate() const;
};

/// Learned weights of one attention layer.
template <typename T>
struct AttentionParams {
  int heads = 1;
  int dim = 0;
  Tensor<T> qkv_weight;  // [3C, C]
  Tensor<T> qkv_bias;    // [3C]
  Tensor<T> proj_weight; // [C, C]
  Tensor<T> proj_bias;   // [C]
  Tensor<T> bias_table;  // [(M + Mo - 1)^2, heads]
};

// Raster order over windows, then pixels inside a window.
// x is [H,W,C] or [N,H,W,C]; the result is [N*HW/M^2, M^2, C].
template <typename T> Tensor<T> window_partition(const Tensor<T>& x, int window);
// Inverse of window_partition; returns [N,H,W,C] ([H,W,C] when batch == 0).
template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, int window, std::int64_t h, std::int64_t w,
                         std::int64_t batch = 0);
// [N*HW/M^2, Mo^2, C]: the Mo x Mo patch centred on each M x M window,
// zero outside the image.
template <typename T>
Tensor<T> overlapping_partition(const Tensor<T>& x, int window, double overlap_ratio);

// Additive mask [HW/M^2, M^2, M^2] for attention after a cyclic shift by
// -shift: 0 within a pre-shift region, kShiftMaskValue across regions.
template <typename T> Tensor<T> shift_mask(std::int64_t h, std::int64_t w, int window, int shift);
inline constexpr double kShiftMaskValue = -1e9;

// Table row for every (query, key) pair, row-major over [M^2, Mo^2].
// Displacement is query minus key position, with the key lattice offset by
// the overlap padding; rows index a (M + Mo - 1)^2 lattice.
std::vector<std::int64_t> relative_position_index(int window, int overlapped);
// Bias [heads, M^2, Mo^2] gathered from table [(M + Mo - 1)^2, heads].
template <typename T>
Tensor<T> relative_bias_lookup(int window, int overlapped, const Tensor<T>& table);

// x: [N,H,W,C] (or [H,W,C]). Shifted when spec.shift > 0.
template <typename T>
Tensor<T> wmsa(const Tensor<T>& x, const AttentionParams<T>& p, const WindowSpec& spec);
// Overlapping cross-attention; never shifted.
template <typename T>
Tensor<T> oca(const Tensor<T>& x, const AttentionParams<T>& p, const WindowSpec& spec);

}  // namespace hat
