#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "hat/tensor.h"

// Differentiable tensor operations. Every op records a backward entry on the
// active tape when at least one input is tracked.
namespace hat {

// Flat source index per output element; -1 reads as zero.
using IndexMap = std::shared_ptr<const std::vector<std::int64_t>>;

// Elementwise with numpy-style broadcasting.
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);

template <typename T> Tensor<T> scale(const Tensor<T>& x, T factor);
template <typename T> Tensor<T> add_scalar(const Tensor<T>& x, T value);

template <typename T> Tensor<T> operator+(const Tensor<T>& a, const Tensor<T>& b) { return add(a, b); }
template <typename T> Tensor<T> operator-(const Tensor<T>& a, const Tensor<T>& b) { return sub(a, b); }
template <typename T> Tensor<T> operator*(const Tensor<T>& a, const Tensor<T>& b) { return mul(a, b); }

// [..., m, k] x [..., k, n] -> [..., m, n], batch extents broadcast.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);

// x[..., in] * weight[out, in]^T + bias[out]. bias may be undefined.
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

// Cross-correlation. x[N,C,H,W], weight[O,C,kh,kw], bias[O] or undefined.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias,
                 int stride = 1, int pad = 0);

// Normalizes over the last axis.
template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                    T eps = T(1e-5));

template <typename T> Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis = -1);

template <typename T> Tensor<T> gelu(const Tensor<T>& x);
template <typename T> Tensor<T> sigmoid(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);
template <typename T> Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.01));
// Gradient is taken as 0 where x == 0.
template <typename T> Tensor<T> sqrt(const Tensor<T>& x);
// Subgradient 0 at x == 0.
template <typename T> Tensor<T> abs(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);
// Mean absolute error.
template <typename T> Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target);

template <typename T> Tensor<T> reshape(const Tensor<T>& x, Shape shape);
template <typename T> Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes);
// Swaps the last two axes.
template <typename T> Tensor<T> transpose(const Tensor<T>& x);

// out[i] = x[index[i]] (0 where index[i] < 0); backward scatters with +=.
template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, IndexMap index);

// [N, C*s*s, H, W] <-> [N, C, s*H, s*W].
template <typename T> Tensor<T> pixel_shuffle(const Tensor<T>& x, int s);
template <typename T> Tensor<T> pixel_unshuffle(const Tensor<T>& x, int s);

enum class PadMode { Zero, Reflect };

// Pads the last two axes. Reflect folds repeatedly, so any amount is valid.
template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int top, int bottom, int left, int right,
                PadMode mode = PadMode::Zero);
// Crops the last two axes to rows [top, top+h) and columns [left, left+w).
template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int top, int left, int h, int w);
// Cyclic shift of the last two axes: out[y][x] = in[y - dy][x - dx].
template <typename T> Tensor<T> roll2d(const Tensor<T>& x, int dy, int dx);

// [N,C,H,W] -> [N,C].
template <typename T> Tensor<T> global_avg_pool(const Tensor<T>& x);

// Reflect index for any offset into [0, n).
std::int64_t reflect_index(std::int64_t i, std::int64_t n);

}  // namespace hat
