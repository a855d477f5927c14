#include "hat/ops.h"

#include <Eigen/Core>

#include <algorithm>
#include <array>
#include <cmath>
#include <numeric>

namespace hat {
namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>>;

template <typename T>
using ImplPtr = std::shared_ptr<TensorImpl<T>>;

// Tape to record into, or nullptr when no input is tracked.
template <typename T>
GradTape<T>* recording(std::initializer_list<const Tensor<T>*> inputs) {
  auto* tape = active_tape<T>();
  if (tape == nullptr) return nullptr;
  for (const auto* t : inputs) {
    if (t->defined() && t->impl()->tracked) return tape;
  }
  return nullptr;
}

template <typename T>
std::vector<T>& grad_of(TensorImpl<T>& impl) {
  if (impl.grad.empty()) impl.grad.assign(impl.data.size(), T(0));
  return impl.grad;
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<std::int64_t> stride_a, stride_b;
};

std::vector<std::int64_t> strides_for(const Shape& shape) {
  std::vector<std::int64_t> s(shape.size(), 1);
  for (int i = static_cast<int>(shape.size()) - 2; i >= 0; --i) s[i] = s[i + 1] * shape[i + 1];
  return s;
}

Broadcast make_broadcast(const Shape& a, const Shape& b) {
  const std::size_t r = std::max(a.size(), b.size());
  Broadcast bc;
  bc.out.assign(r, 1);
  bc.stride_a.assign(r, 0);
  bc.stride_b.assign(r, 0);
  const auto sa = strides_for(a);
  const auto sb = strides_for(b);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ia = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - a.size());
    const std::int64_t ib = static_cast<std::int64_t>(i) - static_cast<std::int64_t>(r - b.size());
    const std::int64_t ea = ia >= 0 ? a[ia] : 1;
    const std::int64_t eb = ib >= 0 ? b[ib] : 1;
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError("cannot broadcast " + to_string(a) + " with " + to_string(b));
    }
    bc.out[i] = std::max(ea, eb);
    if (ea != 1) bc.stride_a[i] = sa[ia];
    if (eb != 1) bc.stride_b[i] = sb[ib];
  }
  return bc;
}

// Calls fn(out_index, a_index, b_index) in row-major output order.
template <typename Fn>
void for_each_broadcast(const Broadcast& bc, Fn fn) {
  const auto n = numel(bc.out);
  const std::size_t r = bc.out.size();
  std::vector<std::int64_t> counter(r, 0);
  std::int64_t ia = 0, ib = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (int d = static_cast<int>(r) - 1; d >= 0; --d) {
      if (++counter[d] < bc.out[d]) {
        ia += bc.stride_a[d];
        ib += bc.stride_b[d];
        break;
      }
      ia -= bc.stride_a[d] * (bc.out[d] - 1);
      ib -= bc.stride_b[d] * (bc.out[d] - 1);
      counter[d] = 0;
    }
  }
}

// f(a, b) forward; da/db are partial derivatives given (a, b).
template <typename T, typename F, typename DA, typename DB>
Tensor<T> binary(const Tensor<T>& a, const Tensor<T>& b, F f, DA da, DB db) {
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  if (a.shape() == b.shape()) {
    std::vector<T> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i], bv[i]);
    Tensor<T> result(a.shape(), std::move(out));
    if (auto* tape = recording<T>({&a, &b})) {
      result.impl()->tracked = true;
      tape->record([ai = a.impl(), bi = b.impl(), oi = result.impl(), da, db] {
        if (oi->grad.empty()) return;
        const auto& g = oi->grad;
        if (ai->tracked) {
          auto& ga = grad_of(*ai);
          for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * da(ai->data[i], bi->data[i]);
        }
        if (bi->tracked) {
          auto& gb = grad_of(*bi);
          for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * db(ai->data[i], bi->data[i]);
        }
      });
    }
    return result;
  }
  auto bc = make_broadcast(a.shape(), b.shape());
  std::vector<T> out(static_cast<std::size_t>(numel(bc.out)));
  for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { out[i] = f(av[ia], bv[ib]); });
  Tensor<T> result(bc.out, std::move(out));
  if (auto* tape = recording<T>({&a, &b})) {
    result.impl()->tracked = true;
    tape->record([ai = a.impl(), bi = b.impl(), oi = result.impl(), bc = std::move(bc), da, db] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      const auto& x = ai->data;
      const auto& y = bi->data;
      if (ai->tracked) {
        auto& ga = grad_of(*ai);
        for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { ga[ia] += g[i] * da(x[ia], y[ib]); });
      }
      if (bi->tracked) {
        auto& gb = grad_of(*bi);
        for_each_broadcast(bc, [&](std::int64_t i, std::int64_t ia, std::int64_t ib) { gb[ib] += g[i] * db(x[ia], y[ib]); });
      }
    });
  }
  return result;
}

// f(x) forward; df(x, y) is the derivative given input and output.
template <typename T, typename F, typename DF>
Tensor<T> unary(const Tensor<T>& x, F f, DF df) {
  const auto& xv = x.impl()->data;
  std::vector<T> out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = f(xv[i]);
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl(), df] {
      if (oi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * df(xi->data[i], oi->data[i]);
    });
  }
  return result;
}

// Index map over the last two axes; src(oy, ox) returns (y, x) or y < 0 for zero.
template <typename Src>
IndexMap plane_map(const Shape& in, std::int64_t out_h, std::int64_t out_w, Src src) {
  if (in.size() < 2) throw ShapeError("2-D op needs rank >= 2, got " + to_string(in));
  const std::int64_t h = in[in.size() - 2], w = in[in.size() - 1];
  const std::int64_t planes = numel(in) / std::max<std::int64_t>(h * w, 1);
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(planes * out_h * out_w));
  std::vector<std::int64_t> plane(static_cast<std::size_t>(out_h * out_w));
  for (std::int64_t oy = 0; oy < out_h; ++oy) {
    for (std::int64_t ox = 0; ox < out_w; ++ox) {
      auto [y, x] = src(oy, ox);
      plane[oy * out_w + ox] = (y < 0 || x < 0) ? -1 : y * w + x;
    }
  }
  for (std::int64_t p = 0; p < planes; ++p) {
    for (std::size_t i = 0; i < plane.size(); ++i) {
      (*map)[p * plane.size() + i] = plane[i] < 0 ? -1 : p * h * w + plane[i];
    }
  }
  return map;
}

Shape with_plane(Shape s, std::int64_t h, std::int64_t w) {
  s[s.size() - 2] = h;
  s[s.size() - 1] = w;
  return s;
}

}  // namespace

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x + y; }, [](T, T) { return T(1); }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x - y; }, [](T, T) { return T(1); }, [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary(a, b, [](T x, T y) { return x * y; }, [](T, T y) { return y; }, [](T x, T) { return x; });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& x, T factor) {
  return unary(x, [factor](T v) { return v * factor; }, [factor](T, T) { return factor; });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& x, T value) {
  return unary(x, [value](T v) { return v + value; }, [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw ShapeError("matmul needs rank >= 2, got " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  const std::int64_t m = a.dim(-2), k = a.dim(-1), k2 = b.dim(-2), n = b.dim(-1);
  if (k != k2) {
    throw ShapeError("matmul inner extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  Shape ba(a.shape().begin(), a.shape().end() - 2);
  Shape bb(b.shape().begin(), b.shape().end() - 2);
  Broadcast bc;
  try {
    bc = make_broadcast(ba, bb);
  } catch (const ShapeError&) {
    throw ShapeError("matmul batch extents differ: " + to_string(a.shape()) + " x " + to_string(b.shape()));
  }
  // Batch pairing: output batch i uses a batch ia and b batch ib.
  std::vector<std::array<std::int64_t, 2>> pairs;
  pairs.reserve(static_cast<std::size_t>(numel(bc.out)));
  for_each_broadcast(bc, [&](std::int64_t, std::int64_t ia, std::int64_t ib) { pairs.push_back({ia, ib}); });

  Shape out_shape = bc.out;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  for (std::size_t i = 0; i < pairs.size(); ++i) {
    ConstMap<T> am(ap + pairs[i][0] * m * k, m, k);
    ConstMap<T> bm(bp + pairs[i][1] * k * n, k, n);
    MutMap<T> om(out.data() + i * m * n, m, n);
    om.noalias() = am * bm;
  }
  Tensor<T> result(out_shape, std::move(out));
  if (auto* tape = recording<T>({&a, &b})) {
    result.impl()->tracked = true;
    tape->record([ai = a.impl(), bi = b.impl(), oi = result.impl(), pairs = std::move(pairs), m, k, n] {
      if (oi->grad.empty()) return;
      for (std::size_t i = 0; i < pairs.size(); ++i) {
        ConstMap<T> gm(oi->grad.data() + i * m * n, m, n);
        if (ai->tracked) {
          MutMap<T> ga(grad_of(*ai).data() + pairs[i][0] * m * k, m, k);
          ConstMap<T> bm(bi->data.data() + pairs[i][1] * k * n, k, n);
          ga.noalias() += gm * bm.transpose();
        }
        if (bi->tracked) {
          MutMap<T> gb(grad_of(*bi).data() + pairs[i][1] * k * n, k, n);
          ConstMap<T> am(ai->data.data() + pairs[i][0] * m * k, m, k);
          gb.noalias() += am.transpose() * gm;
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  if (weight.rank() != 2 || x.rank() < 1 || x.dim(-1) != weight.dim(1)) {
    throw ShapeError("linear: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::int64_t in = weight.dim(1), outf = weight.dim(0);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != outf)) {
    throw ShapeError("linear: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(in, 1);
  Shape out_shape = x.shape();
  out_shape.back() = outf;
  std::vector<T> out(static_cast<std::size_t>(rows * outf));
  {
    ConstMap<T> xm(x.ptr(), rows, in);
    ConstMap<T> wm(weight.ptr(), outf, in);
    MutMap<T> om(out.data(), rows, outf);
    om.noalias() = xm * wm.transpose();
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> bv(bias.ptr(), outf);
      om.rowwise() += bv;
    }
  }
  Tensor<T> result(out_shape, std::move(out));
  if (auto* tape = recording<T>({&x, &weight, &bias})) {
    result.impl()->tracked = true;
    auto bi = bias.defined() ? bias.impl() : nullptr;
    tape->record([xi = x.impl(), wi = weight.impl(), bi, oi = result.impl(), rows, in, outf] {
      if (oi->grad.empty()) return;
      ConstMap<T> gm(oi->grad.data(), rows, outf);
      if (xi->tracked) {
        MutMap<T> gx(grad_of(*xi).data(), rows, in);
        ConstMap<T> wm(wi->data.data(), outf, in);
        gx.noalias() += gm * wm;
      }
      if (wi->tracked) {
        MutMap<T> gw(grad_of(*wi).data(), outf, in);
        ConstMap<T> xm(xi->data.data(), rows, in);
        gw.noalias() += gm.transpose() * xm;
      }
      if (bi && bi->tracked) {
        Eigen::Map<Eigen::Matrix<T, 1, Eigen::Dynamic>> gb(grad_of(*bi).data(), outf);
        gb += gm.colwise().sum();
      }
    });
  }
  return result;
}

namespace {

struct ConvGeom {
  std::int64_t n, c, h, w, o, kh, kw, oh, ow;
  int stride, pad;
};

// Output columns [lo, hi) read inside the input row for kernel column j.
inline void valid_columns(const ConvGeom& g, std::int64_t j, std::int64_t& lo, std::int64_t& hi) {
  lo = 0;
  while (lo < g.ow && lo * g.stride - g.pad + j < 0) ++lo;
  hi = g.ow;
  while (hi > lo && (hi - 1) * g.stride - g.pad + j >= g.w) --hi;
}

template <typename T>
void im2col(const T* x, const ConvGeom& g, T* cols) {
  const std::int64_t p = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * p;
        std::int64_t lo, hi;
        valid_columns(g, j, lo, hi);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          T* out = row + oy * g.ow;
          if (y < 0 || y >= g.h) {
            std::fill(out, out + g.ow, T(0));
            continue;
          }
          const T* in = x + (c * g.h + y) * g.w - g.pad + j;
          std::fill(out, out + lo, T(0));
          for (std::int64_t ox = lo; ox < hi; ++ox) out[ox] = in[ox * g.stride];
          std::fill(out + hi, out + g.ow, T(0));
        }
      }
    }
  }
}

template <typename T>
void col2im(const T* cols, const ConvGeom& g, T* x) {
  const std::int64_t p = g.oh * g.ow;
  for (std::int64_t c = 0; c < g.c; ++c) {
    for (std::int64_t i = 0; i < g.kh; ++i) {
      for (std::int64_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * p;
        std::int64_t lo, hi;
        valid_columns(g, j, lo, hi);
        for (std::int64_t oy = 0; oy < g.oh; ++oy) {
          const std::int64_t y = oy * g.stride - g.pad + i;
          if (y < 0 || y >= g.h) continue;
          T* out = x + (c * g.h + y) * g.w - g.pad + j;
          const T* in = row + oy * g.ow;
          for (std::int64_t ox = lo; ox < hi; ++ox) out[ox * g.stride] += in[ox];
        }
      }
    }
  }
}

}  // namespace

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int pad) {
  if (x.rank() != 4 || weight.rank() != 4 || x.dim(1) != weight.dim(1)) {
    throw ShapeError("conv2d: input " + to_string(x.shape()) + " vs weight " + to_string(weight.shape()));
  }
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: stride must be >= 1 and pad >= 0");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), weight.dim(0), weight.dim(2), weight.dim(3), 0, 0, stride, pad};
  const std::int64_t span_h = g.h + 2 * pad - g.kh, span_w = g.w + 2 * pad - g.kw;
  if (span_h < 0 || span_w < 0 || span_h % stride != 0 || span_w % stride != 0) {
    throw ShapeError("conv2d: non-integral output extent for input " + to_string(x.shape()) + ", kernel " +
                     to_string(weight.shape()) + ", stride " + std::to_string(stride) + ", pad " + std::to_string(pad));
  }
  g.oh = span_h / stride + 1;
  g.ow = span_w / stride + 1;
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != g.o)) {
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " vs weight " + to_string(weight.shape()));
  }
  const std::int64_t ckk = g.c * g.kh * g.kw, p = g.oh * g.ow;
  std::vector<T> out(static_cast<std::size_t>(g.n * g.o * p));
  std::vector<T> cols(static_cast<std::size_t>(ckk * p));
  ConstMap<T> wm(weight.ptr(), g.o, ckk);
  for (std::int64_t s = 0; s < g.n; ++s) {
    im2col(x.ptr() + s * g.c * g.h * g.w, g, cols.data());
    MutMap<T> om(out.data() + s * g.o * p, g.o, p);
    om.noalias() = wm * ConstMap<T>(cols.data(), ckk, p);
    if (bias.defined()) {
      Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> bv(bias.ptr(), g.o);
      om.colwise() += bv;
    }
  }
  Tensor<T> result(Shape{g.n, g.o, g.oh, g.ow}, std::move(out));
  if (auto* tape = recording<T>({&x, &weight, &bias})) {
    result.impl()->tracked = true;
    auto bi = bias.defined() ? bias.impl() : nullptr;
    tape->record([xi = x.impl(), wi = weight.impl(), bi, oi = result.impl(), g, ckk, p] {
      if (oi->grad.empty()) return;
      std::vector<T> cols(static_cast<std::size_t>(ckk * p));
      ConstMap<T> wm(wi->data.data(), g.o, ckk);
      for (std::int64_t s = 0; s < g.n; ++s) {
        ConstMap<T> gm(oi->grad.data() + s * g.o * p, g.o, p);
        if (wi->tracked) {
          im2col(xi->data.data() + s * g.c * g.h * g.w, g, cols.data());
          MutMap<T> gw(grad_of(*wi).data(), g.o, ckk);
          gw.noalias() += gm * ConstMap<T>(cols.data(), ckk, p).transpose();
        }
        if (xi->tracked) {
          MutMap<T> cm(cols.data(), ckk, p);
          cm.noalias() = wm.transpose() * gm;
          col2im(cols.data(), g, grad_of(*xi).data() + s * g.c * g.h * g.w);
        }
        if (bi && bi->tracked) {
          Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> gb(grad_of(*bi).data(), g.o);
          gb += gm.rowwise().sum();
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> layernorm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  const std::int64_t c = x.dim(-1);
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("layernorm: input " + to_string(x.shape()) + " vs gamma " + to_string(gamma.shape()) +
                     " / beta " + to_string(beta.shape()));
  }
  const std::int64_t rows = x.numel() / std::max<std::int64_t>(c, 1);
  const auto& xv = x.impl()->data;
  const auto& gv = gamma.impl()->data;
  const auto& bv = beta.impl()->data;
  std::vector<T> out(xv.size()), xhat(xv.size()), rstd(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    const T* row = xv.data() + r * c;
    T mu = 0;
    for (std::int64_t j = 0; j < c; ++j) mu += row[j];
    mu /= T(c);
    T var = 0;
    for (std::int64_t j = 0; j < c; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= T(c);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t j = 0; j < c; ++j) {
      const T h = (row[j] - mu) * rs;
      xhat[r * c + j] = h;
      out[r * c + j] = h * gv[j] + bv[j];
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording<T>({&x, &gamma, &beta})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl(), xhat = std::move(xhat),
                  rstd = std::move(rstd), rows, c] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      const auto& gv = gi->data;
      if (gi->tracked || bi->tracked) {
        auto* gg = gi->tracked ? grad_of(*gi).data() : nullptr;
        auto* gb = bi->tracked ? grad_of(*bi).data() : nullptr;
        for (std::int64_t r = 0; r < rows; ++r) {
          for (std::int64_t j = 0; j < c; ++j) {
            if (gg) gg[j] += g[r * c + j] * xhat[r * c + j];
            if (gb) gb[j] += g[r * c + j];
          }
        }
      }
      if (xi->tracked) {
        auto& gx = grad_of(*xi);
        for (std::int64_t r = 0; r < rows; ++r) {
          T mean_g = 0, mean_gx = 0;
          for (std::int64_t j = 0; j < c; ++j) {
            const T gy = g[r * c + j] * gv[j];
            mean_g += gy;
            mean_gx += gy * xhat[r * c + j];
          }
          mean_g /= T(c);
          mean_gx /= T(c);
          for (std::int64_t j = 0; j < c; ++j) {
            const T gy = g[r * c + j] * gv[j];
            gx[r * c + j] += rstd[r] * (gy - mean_g - xhat[r * c + j] * mean_gx);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, std::int64_t axis) {
  const auto r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of range for " + to_string(x.shape()));
  const std::int64_t n = x.shape()[axis];
  std::int64_t inner = 1;
  for (auto i = axis + 1; i < r; ++i) inner *= x.shape()[i];
  const std::int64_t outer = x.numel() / std::max<std::int64_t>(n * inner, 1);
  const auto& xv = x.impl()->data;
  std::vector<T> out(xv.size());
  for (std::int64_t o = 0; o < outer; ++o) {
    for (std::int64_t in = 0; in < inner; ++in) {
      const std::int64_t base = o * n * inner + in;
      T mx = xv[base];
      for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
      T total = 0;
      for (std::int64_t j = 0; j < n; ++j) {
        const T e = std::exp(xv[base + j * inner] - mx);
        out[base + j * inner] = e;
        total += e;
      }
      for (std::int64_t j = 0; j < n; ++j) out[base + j * inner] /= total;
    }
  }
  Tensor<T> result(x.shape(), std::move(out));
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl(), outer, n, inner] {
      if (oi->grad.empty()) return;
      const auto& g = oi->grad;
      const auto& y = oi->data;
      auto& gx = grad_of(*xi);
      for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t in = 0; in < inner; ++in) {
          const std::int64_t base = o * n * inner + in;
          T dot = 0;
          for (std::int64_t j = 0; j < n; ++j) dot += g[base + j * inner] * y[base + j * inner];
          for (std::int64_t j = 0; j < n; ++j) {
            const auto idx = base + j * inner;
            gx[idx] += y[idx] * (g[idx] - dot);
          }
        }
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  const T inv_sqrt2pi = T(0.39894228040143267794);
  return unary(
      x, [=](T v) { return T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2)); },
      [=](T v, T) { return T(0.5) * (T(1) + std::erf(v * inv_sqrt2)) + v * inv_sqrt2pi * std::exp(T(-0.5) * v * v); });
}

template <typename T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v >= 0) return T(1) / (T(1) + std::exp(-v));
        const T e = std::exp(v);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  return unary(x, [](T v) { return v > 0 ? v : T(0); }, [](T v, T) { return v > 0 ? T(1) : T(0); });
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope) {
  return unary(
      x, [slope](T v) { return v > 0 ? v : v * slope; }, [slope](T v, T) { return v > 0 ? T(1) : slope; });
}

template <typename T>
Tensor<T> sqrt(const Tensor<T>& x) {
  return unary(
      x,
      [](T v) {
        if (v < 0) throw NumericError("sqrt of negative value");
        return std::sqrt(v);
      },
      [](T, T y) { return y > 0 ? T(0.5) / y : T(0); });
}

template <typename T>
Tensor<T> abs(const Tensor<T>& x) {
  return unary(
      x, [](T v) { return std::abs(v); }, [](T v, T) { return v > 0 ? T(1) : (v < 0 ? T(-1) : T(0)); });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  const auto& xv = x.impl()->data;
  T total = 0;
  for (auto v : xv) total += v;
  Tensor<T> result = Tensor<T>::scalar(total);
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      const T g = oi->grad[0];
      for (auto& v : gx) v += g;
    });
  }
  return result;
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / T(std::max<std::int64_t>(x.numel(), 1)));
}

template <typename T>
Tensor<T> l1_loss(const Tensor<T>& pred, const Tensor<T>& target) {
  if (pred.shape() != target.shape()) {
    throw ShapeError("l1_loss: " + to_string(pred.shape()) + " vs " + to_string(target.shape()));
  }
  return mean(abs(sub(pred, target)));
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  std::int64_t known = 1;
  int infer = -1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<int>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0 && known > 0) shape[infer] = x.numel() / known;
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + to_string(x.shape()) + " to " + to_string(shape));
  }
  Tensor<T> result(shape, x.impl()->data);
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl()] {
      if (oi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return result;
}

template <typename T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, IndexMap index) {
  if (numel(out_shape) != static_cast<std::int64_t>(index->size())) {
    throw ShapeError("gather: index map size " + std::to_string(index->size()) + " vs output " + to_string(out_shape));
  }
  const auto& xv = x.impl()->data;
  const auto& idx = *index;
  std::vector<T> out(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) out[i] = idx[i] < 0 ? T(0) : xv[static_cast<std::size_t>(idx[i])];
  Tensor<T> result(std::move(out_shape), std::move(out));
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl(), index = std::move(index)] {
      if (oi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      const auto& idx = *index;
      for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= 0) gx[static_cast<std::size_t>(idx[i])] += oi->grad[i];
      }
    });
  }
  return result;
}

template <typename T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& axes) {
  const auto r = static_cast<std::size_t>(x.rank());
  if (axes.size() != r) throw ShapeError("permute: axis count vs shape " + to_string(x.shape()));
  std::vector<bool> seen(r, false);
  Shape out_shape(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (axes[i] < 0 || static_cast<std::size_t>(axes[i]) >= r || seen[axes[i]]) {
      throw ShapeError("permute: invalid axis order for shape " + to_string(x.shape()));
    }
    seen[axes[i]] = true;
    out_shape[i] = x.shape()[axes[i]];
  }
  const auto in_strides = strides_for(x.shape());
  Broadcast walk;  // reuse the odometer with a single operand
  walk.out = out_shape;
  walk.stride_a.resize(r);
  walk.stride_b.assign(r, 0);
  for (std::size_t i = 0; i < r; ++i) walk.stride_a[i] = in_strides[axes[i]];
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  for_each_broadcast(walk, [&](std::int64_t i, std::int64_t ia, std::int64_t) { (*map)[i] = ia; });
  return gather(x, std::move(out_shape), std::move(map));
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& x) {
  std::vector<int> axes(static_cast<std::size_t>(x.rank()));
  std::iota(axes.begin(), axes.end(), 0);
  if (axes.size() < 2) throw ShapeError("transpose needs rank >= 2");
  std::swap(axes[axes.size() - 1], axes[axes.size() - 2]);
  return permute(x, axes);
}

template <typename T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, int s) {
  if (x.rank() != 4 || s < 1 || x.dim(1) % (s * s) != 0) {
    throw ShapeError("pixel_shuffle: channels of " + to_string(x.shape()) + " not divisible by " + std::to_string(s * s));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1) / (s * s), h = x.dim(2), w = x.dim(3);
  Shape out_shape{n, c, h * s, w * s};
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t ch = 0; ch < c; ++ch)
      for (std::int64_t y = 0; y < h * s; ++y)
        for (std::int64_t xx = 0; xx < w * s; ++xx) {
          const std::int64_t src_c = ch * s * s + (y % s) * s + (xx % s);
          (*map)[o++] = ((b * c * s * s + src_c) * h + y / s) * w + xx / s;
        }
  return gather(x, std::move(out_shape), std::move(map));
}

template <typename T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, int s) {
  if (x.rank() != 4 || s < 1 || x.dim(2) % s != 0 || x.dim(3) % s != 0) {
    throw ShapeError("pixel_unshuffle: extents of " + to_string(x.shape()) + " not divisible by " + std::to_string(s));
  }
  const std::int64_t n = x.dim(0), c = x.dim(1), h = x.dim(2) / s, w = x.dim(3) / s;
  Shape out_shape{n, c * s * s, h, w};
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(x.numel()));
  std::int64_t o = 0;
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t oc = 0; oc < c * s * s; ++oc)
      for (std::int64_t y = 0; y < h; ++y)
        for (std::int64_t xx = 0; xx < w; ++xx) {
          const std::int64_t ch = oc / (s * s), i = (oc / s) % s, j = oc % s;
          (*map)[o++] = ((b * c + ch) * h * s + y * s + i) * w * s + xx * s + j;
        }
  return gather(x, std::move(out_shape), std::move(map));
}

template <typename T>
Tensor<T> pad2d(const Tensor<T>& x, int top, int bottom, int left, int right, PadMode mode) {
  if (top < 0 || bottom < 0 || left < 0 || right < 0) throw ShapeError("pad2d: negative pad amount");
  const std::int64_t h = x.dim(-2), w = x.dim(-1);
  const std::int64_t oh = h + top + bottom, ow = w + left + right;
  if (mode == PadMode::Reflect && (h == 0 || w == 0)) throw ShapeError("pad2d: reflect of empty extent");
  auto map = plane_map(x.shape(), oh, ow, [&](std::int64_t oy, std::int64_t ox) -> std::pair<std::int64_t, std::int64_t> {
    std::int64_t y = oy - top, xx = ox - left;
    if (mode == PadMode::Reflect) return {reflect_index(y, h), reflect_index(xx, w)};
    if (y < 0 || y >= h || xx < 0 || xx >= w) return {-1, -1};
    return {y, xx};
  });
  return gather(x, with_plane(x.shape(), oh, ow), std::move(map));
}

template <typename T>
Tensor<T> crop2d(const Tensor<T>& x, int top, int left, int h, int w) {
  if (top < 0 || left < 0 || h < 0 || w < 0 || top + h > x.dim(-2) || left + w > x.dim(-1)) {
    throw ShapeError("crop2d: window out of bounds for " + to_string(x.shape()));
  }
  auto map = plane_map(x.shape(), h, w, [&](std::int64_t oy, std::int64_t ox) {
    return std::pair<std::int64_t, std::int64_t>{oy + top, ox + left};
  });
  return gather(x, with_plane(x.shape(), h, w), std::move(map));
}

template <typename T>
Tensor<T> roll2d(const Tensor<T>& x, int dy, int dx) {
  const std::int64_t h = x.dim(-2), w = x.dim(-1);
  auto wrap = [](std::int64_t v, std::int64_t n) { return ((v % n) + n) % n; };
  auto map = plane_map(x.shape(), h, w, [&](std::int64_t oy, std::int64_t ox) {
    return std::pair<std::int64_t, std::int64_t>{wrap(oy - dy, h), wrap(ox - dx, w)};
  });
  return gather(x, x.shape(), std::move(map));
}

template <typename T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  if (x.rank() != 4) throw ShapeError("global_avg_pool: expected [N,C,H,W], got " + to_string(x.shape()));
  const std::int64_t planes = x.dim(0) * x.dim(1), area = x.dim(2) * x.dim(3);
  const auto& xv = x.impl()->data;
  std::vector<T> out(static_cast<std::size_t>(planes));
  for (std::int64_t p = 0; p < planes; ++p) {
    T total = 0;
    for (std::int64_t i = 0; i < area; ++i) total += xv[p * area + i];
    out[p] = total / T(area);
  }
  Tensor<T> result(Shape{x.dim(0), x.dim(1)}, std::move(out));
  if (auto* tape = recording<T>({&x})) {
    result.impl()->tracked = true;
    tape->record([xi = x.impl(), oi = result.impl(), planes, area] {
      if (oi->grad.empty()) return;
      auto& gx = grad_of(*xi);
      for (std::int64_t p = 0; p < planes; ++p) {
        const T g = oi->grad[p] / T(area);
        for (std::int64_t i = 0; i < area; ++i) gx[p * area + i] += g;
      }
    });
  }
  return result;
}

#define HAT_INSTANTIATE_OPS(T)                                                                       \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> add_scalar(const Tensor<T>&, T);                                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);                   \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);         \
  template Tensor<T> layernorm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, T);             \
  template Tensor<T> softmax(const Tensor<T>&, std::int64_t);                                        \
  template Tensor<T> gelu(const Tensor<T>&);                                                         \
  template Tensor<T> sigmoid(const Tensor<T>&);                                                      \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> leaky_relu(const Tensor<T>&, T);                                                \
  template Tensor<T> sqrt(const Tensor<T>&);                                                         \
  template Tensor<T> abs(const Tensor<T>&);                                                          \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);                                                         \
  template Tensor<T> l1_loss(const Tensor<T>&, const Tensor<T>&);                                    \
  template Tensor<T> reshape(const Tensor<T>&, Shape);                                               \
  template Tensor<T> permute(const Tensor<T>&, const std::vector<int>&);                             \
  template Tensor<T> transpose(const Tensor<T>&);                                                    \
  template Tensor<T> gather(const Tensor<T>&, Shape, IndexMap);                                      \
  template Tensor<T> pixel_shuffle(const Tensor<T>&, int);                                           \
  template Tensor<T> pixel_unshuffle(const Tensor<T>&, int);                                         \
  template Tensor<T> pad2d(const Tensor<T>&, int, int, int, int, PadMode);                           \
  template Tensor<T> crop2d(const Tensor<T>&, int, int, int, int);                                   \
  template Tensor<T> roll2d(const Tensor<T>&, int, int);                                             \
  template Tensor<T> global_avg_pool(const Tensor<T>&);

HAT_INSTANTIATE_OPS(float)
HAT_INSTANTIATE_OPS(double)

}  // namespace hat
