#include "hat/attention.h"

#include <cmath>
#include <string>

namespace hat {

int WindowSpec::overlapped() const {
  if (window < 1) throw ConfigError("window size must be >= 1, got " + std::to_string(window));
  if (overlap_ratio < 0.0 || overlap_ratio >= 1.0) {
    throw ConfigError("overlap ratio must lie in [0, 1), got " + std::to_string(overlap_ratio));
  }
  const double extent = (1.0 + overlap_ratio) * window;
  const double rounded = std::round(extent);
  if (std::abs(extent - rounded) > 1e-9) {
    throw ConfigError("overlapped window (1 + " + std::to_string(overlap_ratio) + ") * " + std::to_string(window) +
                      " is not an integer");
  }
  const int mo = static_cast<int>(rounded);
  if ((mo - window) % 2 != 0) {
    throw ConfigError("overlapped window " + std::to_string(mo) + " needs an even margin around window " +
                      std::to_string(window));
  }
  return mo;
}

void WindowSpec::validate() const {
  overlapped();
  if (shift != 0 && shift != window / 2) {
    throw ConfigError("shift must be 0 or " + std::to_string(window / 2) + ", got " + std::to_string(shift));
  }
}

namespace {

struct Grid {
  std::int64_t n, h, w, c;
  int window;
  std::int64_t nwx() const { return w / window; }
  std::int64_t windows() const { return (h / window) * (w / window); }
};

Grid grid_of(const Shape& shape, int window) {
  if (shape.size() != 3 && shape.size() != 4) {
    throw ShapeError("window op expects [H,W,C] or [N,H,W,C], got " + to_string(shape));
  }
  const std::size_t off = shape.size() - 3;
  Grid g{off ? shape[0] : 1, shape[off], shape[off + 1], shape[off + 2], window};
  if (window < 1 || g.h % window != 0 || g.w % window != 0) {
    throw ShapeError("extents " + std::to_string(g.h) + "x" + std::to_string(g.w) + " not divisible by window " +
                     std::to_string(window));
  }
  return g;
}

// Source pixel (row-major over H*W) for slot `slot` of a side x side patch
// anchored at window `win`, offset by -pad and read from a frame cyclically
// shifted by -shift. -1 outside the image.
std::int64_t patch_source(const Grid& g, std::int64_t win, std::int64_t slot, int side, int pad, int shift) {
  const std::int64_t wy = win / g.nwx(), wx = win % g.nwx();
  const std::int64_t ys = wy * g.window - pad + slot / side;
  const std::int64_t xs = wx * g.window - pad + slot % side;
  if (ys < 0 || ys >= g.h || xs < 0 || xs >= g.w) return -1;
  return ((ys + shift) % g.h) * g.w + (xs + shift) % g.w;
}

// [N*nW, side^2, C] windows from [.., H, W, C].
IndexMap patch_map(const Grid& g, int side, int pad, int shift) {
  const std::int64_t slots = static_cast<std::int64_t>(side) * side;
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(g.n * g.windows() * slots * g.c));
  std::size_t o = 0;
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t win = 0; win < g.windows(); ++win)
      for (std::int64_t s = 0; s < slots; ++s) {
        const std::int64_t pix = patch_source(g, win, s, side, pad, shift);
        for (std::int64_t c = 0; c < g.c; ++c) (*map)[o++] = pix < 0 ? -1 : (b * g.h * g.w + pix) * g.c + c;
      }
  return map;
}

// Per-head view of one third of a fused qkv tensor [N,H,W,3C]. Produces
// [N*nW, heads, slots, d], or [N*nW, heads, d, slots] when transposed.
IndexMap head_map(const Grid& g, int heads, int part, int side, int pad, int shift, bool transposed) {
  const std::int64_t d = g.c / heads, slots = static_cast<std::int64_t>(side) * side, c3 = 3 * g.c;
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(g.n * g.windows() * heads * slots * d));
  std::size_t o = 0;
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t win = 0; win < g.windows(); ++win)
      for (std::int64_t hh = 0; hh < heads; ++hh) {
        const std::int64_t channel0 = part * g.c + hh * d;
        if (!transposed) {
          for (std::int64_t s = 0; s < slots; ++s) {
            const std::int64_t pix = patch_source(g, win, s, side, pad, shift);
            for (std::int64_t j = 0; j < d; ++j) (*map)[o++] = pix < 0 ? -1 : (b * g.h * g.w + pix) * c3 + channel0 + j;
          }
        } else {
          for (std::int64_t j = 0; j < d; ++j)
            for (std::int64_t s = 0; s < slots; ++s) {
              const std::int64_t pix = patch_source(g, win, s, side, pad, shift);
              (*map)[o++] = pix < 0 ? -1 : (b * g.h * g.w + pix) * c3 + channel0 + j;
            }
        }
      }
  return map;
}

// [N*nW, heads, M^2, d] back to [N,H,W,C], undoing the cyclic shift.
IndexMap merge_map(const Grid& g, int heads, int shift) {
  const std::int64_t d = g.c / heads, slots = static_cast<std::int64_t>(g.window) * g.window;
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(g.n * g.h * g.w * g.c));
  std::size_t o = 0;
  for (std::int64_t b = 0; b < g.n; ++b)
    for (std::int64_t y = 0; y < g.h; ++y)
      for (std::int64_t x = 0; x < g.w; ++x) {
        const std::int64_t ys = (y - shift + g.h) % g.h, xs = (x - shift + g.w) % g.w;
        const std::int64_t win = (ys / g.window) * g.nwx() + xs / g.window;
        const std::int64_t slot = (ys % g.window) * g.window + xs % g.window;
        for (std::int64_t c = 0; c < g.c; ++c) {
          const std::int64_t hh = c / d, j = c % d;
          (*map)[o++] = (((b * g.windows() + win) * heads + hh) * slots + slot) * d + j;
        }
      }
  return map;
}

// Shared implementation of W-MSA, SW-MSA and OCA.
template <typename T>
Tensor<T> window_attention(const Tensor<T>& x, const AttentionParams<T>& p, int window, int shift, int overlapped) {
  const bool batched = x.rank() == 4;
  const Tensor<T> x4 = batched ? x : reshape(x, Shape{1, x.dim(0), x.dim(1), x.dim(2)});
  const Grid g = grid_of(x4.shape(), window);
  if (g.c != p.dim || p.heads < 1 || g.c % p.heads != 0) {
    throw ShapeError("attention: input channels " + std::to_string(g.c) + " vs dim " + std::to_string(p.dim) +
                     " with " + std::to_string(p.heads) + " heads");
  }
  const int pad = (overlapped - window) / 2;
  const std::int64_t d = g.c / p.heads, nb = g.n * g.windows();
  const std::int64_t lq = static_cast<std::int64_t>(window) * window;
  const std::int64_t lk = static_cast<std::int64_t>(overlapped) * overlapped;

  const Tensor<T> qkv = linear(x4, p.qkv_weight, p.qkv_bias);
  const Tensor<T> q = gather(qkv, Shape{nb, p.heads, lq, d}, head_map(g, p.heads, 0, window, 0, shift, false));
  const Tensor<T> kt = gather(qkv, Shape{nb, p.heads, d, lk}, head_map(g, p.heads, 1, overlapped, pad, shift, true));
  const Tensor<T> v = gather(qkv, Shape{nb, p.heads, lk, d}, head_map(g, p.heads, 2, overlapped, pad, shift, false));

  Tensor<T> logits = scale(matmul(q, kt), T(1) / std::sqrt(T(d)));
  logits = add(logits, relative_bias_lookup(window, overlapped, p.bias_table));
  if (shift > 0) {
    const Tensor<T> mask = reshape(shift_mask<T>(g.h, g.w, window, shift), Shape{g.windows(), 1, lq, lq});
    logits = reshape(add(reshape(logits, Shape{g.n, g.windows(), p.heads, lq, lk}), mask), Shape{nb, p.heads, lq, lk});
  }
  const Tensor<T> attn = softmax(logits, -1);
  const Tensor<T> heads_out = matmul(attn, v);
  const Tensor<T> merged = gather(heads_out, Shape{g.n, g.h, g.w, g.c}, merge_map(g, p.heads, shift));
  Tensor<T> out = linear(merged, p.proj_weight, p.proj_bias);
  return batched ? out : reshape(out, x.shape());
}

}  // namespace

template <typename T>
Tensor<T> window_partition(const Tensor<T>& x, int window) {
  const Grid g = grid_of(x.shape(), window);
  const std::int64_t slots = static_cast<std::int64_t>(window) * window;
  return gather(x, Shape{g.n * g.windows(), slots, g.c}, patch_map(g, window, 0, 0));
}

template <typename T>
Tensor<T> window_reverse(const Tensor<T>& windows, int window, std::int64_t h, std::int64_t w, std::int64_t batch) {
  if (windows.rank() != 3) throw ShapeError("window_reverse expects [B,M*M,C], got " + to_string(windows.shape()));
  const std::int64_t n = batch == 0 ? 1 : batch;
  const std::int64_t c = windows.dim(2);
  const Grid g = grid_of(Shape{n, h, w, c}, window);
  if (windows.dim(0) != n * g.windows() || windows.dim(1) != static_cast<std::int64_t>(window) * window) {
    throw ShapeError("window_reverse: " + to_string(windows.shape()) + " does not tile " + std::to_string(h) + "x" +
                     std::to_string(w));
  }
  // Inverse of the partition map: every pixel appears in exactly one slot.
  const auto forward = patch_map(g, window, 0, 0);
  auto inverse = std::make_shared<std::vector<std::int64_t>>(forward->size());
  for (std::size_t i = 0; i < forward->size(); ++i) (*inverse)[static_cast<std::size_t>((*forward)[i])] = static_cast<std::int64_t>(i);
  Shape out = batch == 0 ? Shape{h, w, c} : Shape{n, h, w, c};
  return gather(windows, out, inverse);
}

template <typename T>
Tensor<T> overlapping_partition(const Tensor<T>& x, int window, double overlap_ratio) {
  const WindowSpec spec = WindowSpec::overlapping(window, overlap_ratio);
  const int mo = spec.overlapped();
  const Grid g = grid_of(x.shape(), window);
  const std::int64_t slots = static_cast<std::int64_t>(mo) * mo;
  return gather(x, Shape{g.n * g.windows(), slots, g.c}, patch_map(g, mo, spec.overlap_pad(), 0));
}

template <typename T>
Tensor<T> shift_mask(std::int64_t h, std::int64_t w, int window, int shift) {
  const Grid g = grid_of(Shape{h, w, 1}, window);
  const std::int64_t slots = static_cast<std::int64_t>(window) * window;
  Tensor<T> mask = Tensor<T>::zeros(Shape{g.windows(), slots, slots});
  if (shift == 0) return mask;
  // Bands of the shifted frame: untouched interior, the last window row/column
  // before the wrap point, and the wrapped-in strip.
  auto band = [&](std::int64_t v, std::int64_t extent) { return v < extent - window ? 0 : (v < extent - shift ? 1 : 2); };
  auto data = mask.mutable_data();
  std::vector<int> label(static_cast<std::size_t>(slots));
  for (std::int64_t win = 0; win < g.windows(); ++win) {
    const std::int64_t wy = win / g.nwx(), wx = win % g.nwx();
    for (std::int64_t s = 0; s < slots; ++s) {
      label[s] = band(wy * window + s / window, h) * 3 + band(wx * window + s % window, w);
    }
    for (std::int64_t i = 0; i < slots; ++i)
      for (std::int64_t j = 0; j < slots; ++j)
        data[(win * slots + i) * slots + j] = label[i] == label[j] ? T(0) : T(kShiftMaskValue);
  }
  return mask;
}

std::vector<std::int64_t> relative_position_index(int window, int overlapped) {
  const int pad = (overlapped - window) / 2;
  const int span = window + overlapped - 1;
  const int offset = overlapped - 1 - pad;
  const std::int64_t lq = static_cast<std::int64_t>(window) * window;
  const std::int64_t lk = static_cast<std::int64_t>(overlapped) * overlapped;
  std::vector<std::int64_t> index(static_cast<std::size_t>(lq * lk));
  for (std::int64_t i = 0; i < lq; ++i) {
    const int qy = static_cast<int>(i / window), qx = static_cast<int>(i % window);
    for (std::int64_t j = 0; j < lk; ++j) {
      const int ky = static_cast<int>(j / overlapped) - pad, kx = static_cast<int>(j % overlapped) - pad;
      index[i * lk + j] = static_cast<std::int64_t>(qy - ky + offset) * span + (qx - kx + offset);
    }
  }
  return index;
}

template <typename T>
Tensor<T> relative_bias_lookup(int window, int overlapped, const Tensor<T>& table) {
  const std::int64_t span = window + overlapped - 1;
  if (table.rank() != 2 || table.dim(0) != span * span) {
    throw ShapeError("relative bias table " + to_string(table.shape()) + " does not cover displacement span " +
                     std::to_string(span) + "x" + std::to_string(span));
  }
  const std::int64_t heads = table.dim(1);
  const auto rel = relative_position_index(window, overlapped);
  const std::int64_t pairs = static_cast<std::int64_t>(rel.size());
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(heads * pairs));
  for (std::int64_t hh = 0; hh < heads; ++hh)
    for (std::int64_t k = 0; k < pairs; ++k) (*map)[hh * pairs + k] = rel[k] * heads + hh;
  const std::int64_t lq = static_cast<std::int64_t>(window) * window;
  return gather(table, Shape{heads, lq, pairs / lq}, std::move(map));
}

template <typename T>
Tensor<T> wmsa(const Tensor<T>& x, const AttentionParams<T>& p, const WindowSpec& spec) {
  spec.validate();
  if (spec.overlapped() != spec.window) throw ConfigError("wmsa requires overlap ratio 0");
  return window_attention(x, p, spec.window, spec.shift, spec.window);
}

template <typename T>
Tensor<T> oca(const Tensor<T>& x, const AttentionParams<T>& p, const WindowSpec& spec) {
  spec.validate();
  if (spec.shift != 0) throw ConfigError("overlapping cross-attention is never shifted");
  return window_attention(x, p, spec.window, 0, spec.overlapped());
}

#define HAT_INSTANTIATE_ATTENTION(T)                                                                \
  template Tensor<T> window_partition(const Tensor<T>&, int);                                       \
  template Tensor<T> window_reverse(const Tensor<T>&, int, std::int64_t, std::int64_t, std::int64_t); \
  template Tensor<T> overlapping_partition(const Tensor<T>&, int, double);                          \
  template Tensor<T> shift_mask<T>(std::int64_t, std::int64_t, int, int);                           \
  template Tensor<T> relative_bias_lookup(int, int, const Tensor<T>&);                              \
  template Tensor<T> wmsa(const Tensor<T>&, const AttentionParams<T>&, const WindowSpec&);          \
  template Tensor<T> oca(const Tensor<T>&, const AttentionParams<T>&, const WindowSpec&);

HAT_INSTANTIATE_ATTENTION(float)
HAT_INSTANTIATE_ATTENTION(double)

}  // namespace hat
