// Shared test helpers and reference implementations. Everything here is
// written directly from the definitions with plain loops so that it can
// serve as an independent check on the library's vectorized code paths.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <random>
#include <string>
#include <vector>

#include "hat/attention.h"
#include "hat/data.h"
#include "hat/model.h"
#include "hat/ops.h"
#include "hat/tensor.h"

namespace testing {

using hat::Shape;
using hat::Tensor;

inline std::mt19937_64 make_rng(std::uint64_t seed) { return std::mt19937_64(seed); }

inline double uniform(std::mt19937_64& rng, double lo = -1, double hi = 1) {
  return lo + (hi - lo) * (static_cast<double>(rng() >> 11) * 0x1.0p-53);
}

template <typename T>
Tensor<T> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.mutable_data()) v = static_cast<T>(uniform(rng, lo, hi));
  return t;
}

template <typename T>
void fill_uniform(Tensor<T> t, std::mt19937_64& rng, double lo, double hi) {
  for (auto& v : t.mutable_data()) v = static_cast<T>(uniform(rng, lo, hi));
}

// Replaces every parameter with uniform noise so that zero-initialized biases
// and unit norms do not hide mistakes.
template <typename T>
void randomize(hat::HatModel<T>& model, std::uint64_t seed, double amplitude = 0.3) {
  auto rng = make_rng(seed);
  for (const auto& [name, t] : model.parameters()) {
    const bool is_gain = name.find("norm") != std::string::npos && name.ends_with(".weight");
    fill_uniform(t, rng, is_gain ? 1 - amplitude : -amplitude, is_gain ? 1 + amplitude : amplitude);
  }
}

template <typename T>
std::vector<Tensor<T>> params_with_prefix(const hat::HatModel<T>& model, const std::string& prefix) {
  std::vector<Tensor<T>> out;
  for (const auto& [name, t] : model.parameters()) {
    if (name.rfind(prefix, 0) == 0) out.push_back(t);
  }
  return out;
}

template <typename T>
double max_abs_diff(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.shape() != b.shape()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.data().size(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a.data()[i]) - static_cast<double>(b.data()[i])));
  }
  return m;
}

inline double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  if (a.size() != b.size()) return std::numeric_limits<double>::infinity();
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

struct GradCheck {
  double max_rel = 0;
  std::size_t checked = 0;
  std::size_t refined = 0;  // coordinates re-measured with a smaller step
  std::string worst;
};

// Central finite differences of L = sum(R * f()) against the tape gradient
// for every listed input. At most `per_tensor` coordinates are sampled from
// each. Relative error is |a - n| / max(|a|, |n|, floor). When the two
// one-sided slopes disagree the step straddles a ReLU-type kink; that
// coordinate is re-measured with the step cut by ten, at most twice.
inline GradCheck check_gradients(const std::function<Tensor<double>()>& f, std::vector<Tensor<double>> inputs,
                                 std::uint64_t seed, int per_tensor = 12, double step = 1e-5,
                                 double floor = 1e-5) {
  auto rng = make_rng(seed);
  for (auto& t : inputs) {
    t.zero_grad();
    t.set_requires_grad(true);
  }
  hat::GradTape<double> tape;
  Tensor<double> out;
  Tensor<double> weights;
  {
    hat::TapeScope<double> scope(tape);
    out = f();
    weights = random_tensor<double>(out.shape(), rng);
    tape.backward(hat::sum(hat::mul(out, weights)));
  }
  auto loss = [&] {
    const Tensor<double> o = f();
    double s = 0;
    for (std::size_t i = 0; i < o.data().size(); ++i) s += o.data()[i] * weights.data()[i];
    return s;
  };
  GradCheck r;
  for (std::size_t ti = 0; ti < inputs.size(); ++ti) {
    auto& t = inputs[ti];
    const auto grad = t.grad();
    const auto n = static_cast<std::uint64_t>(t.numel());
    const int count = static_cast<int>(std::min<std::uint64_t>(n, static_cast<std::uint64_t>(per_tensor)));
    for (int k = 0; k < count; ++k) {
      const std::size_t idx = n <= static_cast<std::uint64_t>(per_tensor) ? static_cast<std::size_t>(k)
                                                                          : static_cast<std::size_t>(rng() % n);
      auto d = t.mutable_data();
      const double saved = d[idx];
      const double centre = loss();
      double numeric = 0;
      double h = step;
      for (int attempt = 0; attempt < 3; ++attempt, h /= 10) {
        d[idx] = saved + h;
        const double up = loss();
        d[idx] = saved - h;
        const double down = loss();
        d[idx] = saved;
        numeric = (up - down) / (2 * h);
        const double fwd = (up - centre) / h, bwd = (centre - down) / h;
        if (std::abs(fwd - bwd) <= 1e-2 * std::max({std::abs(fwd), std::abs(bwd), 1e-3})) break;
        if (attempt < 2) ++r.refined;
      }
      const double analytic = grad.data()[idx];
      const double rel = std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
      ++r.checked;
      if (rel > r.max_rel) {
        r.max_rel = rel;
        r.worst = "input " + std::to_string(ti) + " index " + std::to_string(idx) + " analytic " +
                  std::to_string(analytic) + " numeric " + std::to_string(numeric);
      }
    }
  }
  for (auto& t : inputs) t.set_requires_grad(false);
  return r;
}

// ---- reference implementations ------------------------------------------

inline std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
  std::vector<double> c(static_cast<std::size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j)
      for (int p = 0; p < k; ++p) c[i * n + j] += a[i * k + p] * b[p * n + j];
  return c;
}

// x [N,C,H,W], w [O,C,K,K], zero padding.
inline std::vector<double> naive_conv2d(const Tensor<double>& x, const Tensor<double>& w, const Tensor<double>& b,
                                        int stride, int pad) {
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), wd = x.dim(3), o = w.dim(0), k = w.dim(2);
  const auto oh = (h + 2 * pad - k) / stride + 1, ow = (wd + 2 * pad - k) / stride + 1;
  std::vector<double> out(static_cast<std::size_t>(n * o * oh * ow), 0.0);
  for (std::int64_t s = 0; s < n; ++s)
    for (std::int64_t oc = 0; oc < o; ++oc)
      for (std::int64_t y = 0; y < oh; ++y)
        for (std::int64_t xx = 0; xx < ow; ++xx) {
          double acc = b.defined() ? b.data()[oc] : 0.0;
          for (std::int64_t ic = 0; ic < c; ++ic)
            for (std::int64_t i = 0; i < k; ++i)
              for (std::int64_t j = 0; j < k; ++j) {
                const auto iy = y * stride - pad + i, ix = xx * stride - pad + j;
                if (iy < 0 || iy >= h || ix < 0 || ix >= wd) continue;
                acc += w.at({oc, ic, i, j}) * x.at({s, ic, iy, ix});
              }
          out[((s * o + oc) * oh + y) * ow + xx] = acc;
        }
  return out;
}

// Dense attention over the whole image with the allowed (query, key) pairs
// enumerated from first principles. x is [H,W,C].
//
// Self-attention with shift s > 0: two pixels interact when they fall in
// the same cell of the window grid displaced by s, where rows (and
// columns) before s form their own cell; this is what the cyclic shift plus
// mask computes. Relative displacement is taken in image coordinates.
//
// Overlapping attention (gamma > 0): each M x M query window reads the
// Mo x Mo patch around it; keys outside the image have zero key and value
// vectors but still enter the softmax. Displacement is query-local minus
// patch-local coordinates plus Mo - 1 on each axis.
inline std::vector<double> brute_force_attention(const Tensor<double>& x, const hat::AttentionParams<double>& p, int m,
                                                 int shift, double gamma) {
  const int h = static_cast<int>(x.dim(0)), w = static_cast<int>(x.dim(1)), c = static_cast<int>(x.dim(2));
  const int heads = p.heads, d = c / heads;
  const int mo = m + static_cast<int>(std::lround(gamma * m));
  const int pad = (mo - m) / 2;
  const int span = m + mo - 1;
  const int pixels = h * w;

  std::vector<double> qkv(static_cast<std::size_t>(pixels) * 3 * c);
  for (int px = 0; px < pixels; ++px)
    for (int r = 0; r < 3 * c; ++r) {
      double acc = p.qkv_bias.data()[r];
      for (int k = 0; k < c; ++k) acc += p.qkv_weight.data()[r * c + k] * x.data()[px * c + k];
      qkv[static_cast<std::size_t>(px) * 3 * c + r] = acc;
    }
  auto cell = [&](int v) { return v < shift ? -1 : (v - shift) / m; };

  std::vector<double> concat(static_cast<std::size_t>(pixels) * c, 0.0);
  for (int qy = 0; qy < h; ++qy)
    for (int qx = 0; qx < w; ++qx) {
      const int q = qy * w + qx;
      // Keys as (pixel index or -1 for padding, table row).
      std::vector<std::pair<int, int>> keys;
      if (mo == m && shift > 0) {
        for (int ky = 0; ky < h; ++ky)
          for (int kx = 0; kx < w; ++kx) {
            if (cell(ky) != cell(qy) || cell(kx) != cell(qx)) continue;
            const int row = (qy - ky + m - 1) * span + (qx - kx + m - 1);
            keys.emplace_back(ky * w + kx, row);
          }
      } else {
        const int wy = qy / m, wx = qx / m, ly = qy % m, lx = qx % m;
        for (int a = 0; a < mo; ++a)
          for (int b = 0; b < mo; ++b) {
            const int ky = wy * m - pad + a, kx = wx * m - pad + b;
            const bool inside = ky >= 0 && ky < h && kx >= 0 && kx < w;
            const int row = (ly - a + mo - 1) * span + (lx - b + mo - 1);
            keys.emplace_back(inside ? ky * w + kx : -1, row);
          }
      }
      for (int hh = 0; hh < heads; ++hh) {
        std::vector<double> logits(keys.size());
        double top = -std::numeric_limits<double>::infinity();
        for (std::size_t k = 0; k < keys.size(); ++k) {
          double dot = 0;
          if (keys[k].first >= 0) {
            for (int j = 0; j < d; ++j) {
              dot += qkv[static_cast<std::size_t>(q) * 3 * c + hh * d + j] *
                     qkv[static_cast<std::size_t>(keys[k].first) * 3 * c + c + hh * d + j];
            }
          }
          logits[k] = dot / std::sqrt(static_cast<double>(d)) + p.bias_table.data()[keys[k].second * heads + hh];
          top = std::max(top, logits[k]);
        }
        double z = 0;
        for (auto& l : logits) z += (l = std::exp(l - top));
        for (std::size_t k = 0; k < keys.size(); ++k) {
          if (keys[k].first < 0) continue;
          for (int j = 0; j < d; ++j) {
            concat[static_cast<std::size_t>(q) * c + hh * d + j] +=
                logits[k] / z * qkv[static_cast<std::size_t>(keys[k].first) * 3 * c + 2 * c + hh * d + j];
          }
        }
      }
    }
  std::vector<double> out(static_cast<std::size_t>(pixels) * c);
  for (int px = 0; px < pixels; ++px)
    for (int o = 0; o < c; ++o) {
      double acc = p.proj_bias.data()[o];
      for (int k = 0; k < c; ++k) acc += p.proj_weight.data()[o * c + k] * concat[static_cast<std::size_t>(px) * c + k];
      out[static_cast<std::size_t>(px) * c + o] = acc;
    }
  return out;
}

// Random attention weights for `c` channels, window m and overlap gamma.
inline hat::AttentionParams<double> random_attention(int c, int heads, int m, double gamma, std::mt19937_64& rng) {
  const int mo = m + static_cast<int>(std::lround(gamma * m));
  hat::AttentionParams<double> p;
  p.heads = heads;
  p.dim = c;
  p.qkv_weight = random_tensor<double>({3 * c, c}, rng, -0.5, 0.5);
  p.qkv_bias = random_tensor<double>({3 * c}, rng, -0.5, 0.5);
  p.proj_weight = random_tensor<double>({c, c}, rng, -0.5, 0.5);
  p.proj_bias = random_tensor<double>({c}, rng, -0.5, 0.5);
  p.bias_table = random_tensor<double>({(m + mo - 1) * (m + mo - 1), heads}, rng, -1, 1);
  return p;
}

inline std::vector<hat::Tensor<double>> attention_tensors(const hat::AttentionParams<double>& p) {
  return {p.qkv_weight, p.qkv_bias, p.proj_weight, p.proj_bias, p.bias_table};
}

// Gini from the pairwise definition sum_ij |g_i - g_j| / (2 n^2 mean).
// Every learned tensor of a block, for gradient checks.
inline std::vector<hat::Tensor<double>> cab_tensors(const hat::CabParams<double>& p) {
  return {p.conv1.weight, p.conv1.bias, p.conv2.weight, p.conv2.bias,
          p.ca_down.weight, p.ca_down.bias, p.ca_up.weight, p.ca_up.bias};
}

inline std::vector<hat::Tensor<double>> mlp_tensors(const hat::MlpParams<double>& p) {
  return {p.fc1.weight, p.fc1.bias, p.fc2.weight, p.fc2.bias};
}

inline void append(std::vector<hat::Tensor<double>>& out, const std::vector<hat::Tensor<double>>& more) {
  out.insert(out.end(), more.begin(), more.end());
}

inline std::vector<hat::Tensor<double>> hab_tensors(const hat::HabParams<double>& p) {
  std::vector<hat::Tensor<double>> out{p.norm1.gamma, p.norm1.beta, p.norm2.gamma, p.norm2.beta};
  append(out, attention_tensors(p.attn));
  append(out, mlp_tensors(p.mlp));
  if (p.has_cab) append(out, cab_tensors(p.cab));
  return out;
}

inline std::vector<hat::Tensor<double>> ocab_tensors(const hat::OcabParams<double>& p) {
  std::vector<hat::Tensor<double>> out{p.norm1.gamma, p.norm1.beta, p.norm2.gamma, p.norm2.beta};
  append(out, attention_tensors(p.attn));
  append(out, mlp_tensors(p.mlp));
  return out;
}

inline double gini_pairwise(const std::vector<double>& v) {
  const double n = static_cast<double>(v.size());
  double pair = 0, total = 0;
  for (double a : v) {
    total += a;
    for (double b : v) pair += std::abs(a - b);
  }
  return pair / (2 * n * n * (total / n));
}

// Four smooth 64x64 RGB targets with their x2 bicubic inputs; each 32x32
// input is one whole training patch.
inline std::vector<hat::ImagePair> overfit_fixture() {
  std::vector<hat::ImagePair> pairs;
  for (int k = 0; k < 4; ++k) {
    hat::ImageF hq(64, 64, 3);
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x)
        for (int c = 0; c < 3; ++c)
          hq.at(y, x, c) = 0.5 + 0.2 * std::sin(0.15 * (k + 1) * x + 0.7 * c) * std::cos(0.11 * (k + 2) * y - 0.3 * c);
    pairs.push_back({hat::bicubic_downsample(hq, 2), hq, 2});
  }
  return pairs;
}

// One Adam parameter updated by hand.
struct ScalarAdam {
  double m = 0, v = 0, p = 0;
  int t = 0;
  void step(double g, double lr, double b1 = 0.9, double b2 = 0.99, double eps = 1e-8) {
    ++t;
    m = b1 * m + (1 - b1) * g;
    v = b2 * v + (1 - b2) * g * g;
    const double mh = m / (1 - std::pow(b1, t)), vh = v / (1 - std::pow(b2, t));
    p -= lr * mh / (std::sqrt(vh) + eps);
  }
};

}  // namespace testing
