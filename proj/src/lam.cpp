#include "hat/lam.h"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <string>

#include "hat/errors.h"
#include "hat/ops.h"

namespace hat {

void LamConfig::validate() const {
  if (!(sigma > 0) || !std::isfinite(sigma)) throw ConfigError("lam sigma must be positive, got " + std::to_string(sigma));
  if (steps < 1) throw ConfigError("lam steps must be >= 1, got " + std::to_string(steps));
  if (l < 1 || x < 0 || y < 0) throw ConfigError("lam patch needs x, y >= 0 and l >= 1");
}

int gaussian_kernel_side(double sigma) {
  if (sigma < 1e-6) return 1;
  return 2 * static_cast<int>(std::ceil(3 * sigma)) + 1;
}

std::vector<double> gaussian_kernel(double sigma) {
  const int side = gaussian_kernel_side(sigma);
  if (side == 1) return {1.0};
  const int r = side / 2;
  std::vector<double> k(static_cast<std::size_t>(side) * side);
  double total = 0;
  for (int i = -r; i <= r; ++i) {
    for (int j = -r; j <= r; ++j) {
      const double v = std::exp(-(i * i + j * j) / (2 * sigma * sigma));
      k[static_cast<std::size_t>((i + r) * side + (j + r))] = v;
      total += v;
    }
  }
  for (auto& v : k) v /= total;
  return k;
}

template <typename T>
Tensor<T> gaussian_blur(const Tensor<T>& img, double sigma) {
  if (img.rank() != 4) throw ShapeError("gaussian_blur expects [N,C,H,W], got " + to_string(img.shape()));
  const auto kernel = gaussian_kernel(sigma);
  const int side = gaussian_kernel_side(sigma);
  if (side == 1) return img.clone();
  const int r = side / 2;
  const std::int64_t planes = img.dim(0) * img.dim(1), h = img.dim(2), w = img.dim(3);
  Tensor<T> out(img.shape());
  auto dst = out.mutable_data();
  const auto src = img.data();
  for (std::int64_t p = 0; p < planes; ++p) {
    const T* in = src.data() + p * h * w;
    for (std::int64_t y = 0; y < h; ++y) {
      for (std::int64_t x = 0; x < w; ++x) {
        // Weights sum to one, so offsets from the centre keep flat regions exact.
        const double centre = in[y * w + x];
        double acc = 0;
        for (int i = -r; i <= r; ++i) {
          const std::int64_t yy = reflect_index(y + i, h);
          for (int j = -r; j <= r; ++j) {
            acc += kernel[static_cast<std::size_t>((i + r) * side + (j + r))] * (in[yy * w + reflect_index(x + j, w)] - centre);
          }
        }
        dst[p * h * w + y * w + x] = static_cast<T>(centre + acc);
      }
    }
  }
  return out;
}

template <typename T>
Tensor<T> blur_path(const Tensor<T>& img, double sigma, double theta) {
  if (!(theta >= 0 && theta <= 1)) throw ConfigError("blur path theta must lie in [0,1], got " + std::to_string(theta));
  return gaussian_blur(img, sigma * (1 - theta));
}

namespace {

void check_patch(const Shape& s, int x, int y, int l) {
  if (s.size() != 4) throw ShapeError("detector expects [N,C,H,W], got " + to_string(s));
  if (l < 1 || x < 0 || y < 0 || x + l > s[3] || y + l > s[2]) {
    throw ShapeError("detector patch x=" + std::to_string(x) + " y=" + std::to_string(y) + " l=" + std::to_string(l) +
                     " outside " + std::to_string(s[2]) + "x" + std::to_string(s[3]) + " output");
  }
}

// Index map selecting the l x l patch, optionally displaced by (dy, dx) with
// clamping at the image border.
IndexMap patch_map(const Shape& s, int x, int y, int l, int dy, int dx) {
  const std::int64_t planes = s[0] * s[1], h = s[2], w = s[3];
  auto idx = std::make_shared<std::vector<std::int64_t>>();
  idx->reserve(static_cast<std::size_t>(planes * l * l));
  for (std::int64_t p = 0; p < planes; ++p) {
    for (int i = 0; i < l; ++i) {
      const std::int64_t yy = std::min<std::int64_t>(y + i + dy, h - 1);
      for (int j = 0; j < l; ++j) {
        const std::int64_t xx = std::min<std::int64_t>(x + j + dx, w - 1);
        idx->push_back(p * h * w + yy * w + xx);
      }
    }
  }
  return idx;
}

}  // namespace

template <typename T>
Tensor<T> gradient_detector(const Tensor<T>& hr, int x, int y, int l) {
  check_patch(hr.shape(), x, y, l);
  const Shape ps{hr.dim(0), hr.dim(1), l, l};
  auto patch = gather(hr, ps, patch_map(hr.shape(), x, y, l, 0, 0));
  auto dh = sub(gather(hr, ps, patch_map(hr.shape(), x, y, l, 0, 1)), patch);
  auto dv = sub(gather(hr, ps, patch_map(hr.shape(), x, y, l, 1, 0)), patch);
  return sum(hat::sqrt(add(mul(dh, dh), mul(dv, dv))));
}

template <typename T>
Tensor<T> patch_sum_detector(const Tensor<T>& hr, int x, int y, int l) {
  check_patch(hr.shape(), x, y, l);
  return sum(gather(hr, Shape{hr.dim(0), hr.dim(1), l, l}, patch_map(hr.shape(), x, y, l, 0, 0)));
}

template <typename T>
Tensor<T> apply_detector(DetectorKind kind, const Tensor<T>& hr, int x, int y, int l) {
  return kind == DetectorKind::PatchSum ? patch_sum_detector(hr, x, y, l) : gradient_detector(hr, x, y, l);
}

namespace {

// Numerator and denominator of the sorted Gini form
//   G = sum_i (2i - n - 1) g_(i) / (n sum g),  i = 1..n ascending.
std::pair<double, double> gini_terms(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  if (!v.empty() && v.front() < 0) throw ConfigError("gini needs nonnegative values");
  const auto n = static_cast<std::int64_t>(v.size());
  double num = 0, den = 0;
  // Runs of equal values share one integer coefficient sum, so ties cancel exactly.
  for (std::int64_t a = 0; a < n;) {
    std::int64_t b = a;
    while (b + 1 < n && v[static_cast<std::size_t>(b + 1)] == v[static_cast<std::size_t>(a)]) ++b;
    const std::int64_t len = b - a + 1;
    const std::int64_t coef = len * (a + b + 2) - len * (n + 1);
    const double g = v[static_cast<std::size_t>(a)];
    num += static_cast<double>(coef) * g;
    for (std::int64_t i = a; i <= b; ++i) den += g;
    a = b + 1;
  }
  return {num, static_cast<double>(n) * den};
}

}  // namespace

GiniResult gini(std::vector<double> values) {
  const auto [num, den] = gini_terms(std::move(values));
  if (den == 0) return {0.0, true};
  return {num / den, false};
}

double diffusion_index(const std::vector<double>& values) {
  const auto [num, den] = gini_terms(values);
  if (den == 0 || num == 0) return 100.0;
  return 100.0 * (den - num) / den;
}

template <typename T>
LamResult lam(const ModelFn<T>& model, const Tensor<T>& img, const LamConfig& cfg) {
  cfg.validate();
  if (img.rank() != 4 || img.dim(0) != 1) throw ShapeError("lam expects a single image [1,C,H,W], got " + to_string(img.shape()));
  const std::int64_t c = img.dim(1), h = img.dim(2), w = img.dim(3), n = img.numel();
  const int steps = cfg.steps;

  auto detect = [&](const Tensor<T>& input) {
    return static_cast<double>(apply_detector(cfg.detector, model(input), cfg.x, cfg.y, cfg.l).item());
  };

  std::vector<Tensor<T>> nodes(static_cast<std::size_t>(steps) + 1);
  for (int k = 0; k <= steps; ++k) nodes[static_cast<std::size_t>(k)] = blur_path(img, cfg.sigma, double(k) / steps);

  // Per-step contributions kept separate so the final sum has a fixed order.
  std::vector<std::vector<double>> contrib(static_cast<std::size_t>(steps));
  std::vector<std::string> failures(static_cast<std::size_t>(steps));
  auto eval_step = [&](int k) {
    Tensor<T> point = blur_path(img, cfg.sigma, (k + 0.5) / steps);
    point.set_requires_grad(true);
    GradTape<T> tape;
    {
      TapeScope<T> scope(tape);
      auto d = apply_detector(cfg.detector, model(point), cfg.x, cfg.y, cfg.l);
      tape.backward(d);
    }
    const auto g = point.grad_data();
    const auto hi = nodes[static_cast<std::size_t>(k) + 1].data();
    const auto lo = nodes[static_cast<std::size_t>(k)].data();
    auto& out = contrib[static_cast<std::size_t>(k)];
    out.assign(static_cast<std::size_t>(n), 0.0);
    if (g.empty()) return;
    for (std::int64_t i = 0; i < n; ++i) {
      const double gi = static_cast<double>(g[static_cast<std::size_t>(i)]);
      if (!std::isfinite(gi)) {
        failures[static_cast<std::size_t>(k)] = "non-finite gradient at path step " + std::to_string(k);
        return;
      }
      out[static_cast<std::size_t>(i)] =
          gi * (static_cast<double>(hi[static_cast<std::size_t>(i)]) - static_cast<double>(lo[static_cast<std::size_t>(i)]));
    }
  };

  if (cfg.parallel) {
#pragma omp parallel for schedule(dynamic)
    for (int k = 0; k < steps; ++k) eval_step(k);
  } else {
    for (int k = 0; k < steps; ++k) eval_step(k);
  }
  for (const auto& f : failures) {
    if (!f.empty()) throw NumericError(f);
  }

  LamResult r;
  r.height = h;
  r.width = w;
  r.attribution.assign(static_cast<std::size_t>(h * w), 0.0);
  double total = 0;
  for (const auto& step : contrib) {
    for (std::int64_t ch = 0; ch < c; ++ch) {
      for (std::int64_t p = 0; p < h * w; ++p) r.attribution[static_cast<std::size_t>(p)] += step[static_cast<std::size_t>(ch * h * w + p)];
    }
  }
  for (double v : r.attribution) total += v;

  r.detector_input = detect(nodes.back());
  r.detector_baseline = detect(nodes.front());
  if (!std::isfinite(r.detector_input) || !std::isfinite(r.detector_baseline)) {
    throw NumericError("non-finite detector output");
  }
  r.completeness_residual = std::abs(total - (r.detector_input - r.detector_baseline));

  std::vector<double> mag(r.attribution.size());
  for (std::size_t i = 0; i < mag.size(); ++i) mag[i] = std::abs(r.attribution[i]);
  const auto g = gini(mag);
  r.gini = g.gini;
  r.zero_map = g.all_zero;
  r.di = diffusion_index(mag);
  return r;
}

void write_raw_map(const std::filesystem::path& path, const std::vector<double>& map, std::int64_t h, std::int64_t w) {
  if (static_cast<std::int64_t>(map.size()) != h * w) throw ShapeError("raw map size does not match extent");
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw DataError("cannot write " + path.string());
  auto put32 = [&](std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    out.write(b, 4);
  };
  put32(static_cast<std::uint32_t>(h));
  put32(static_cast<std::uint32_t>(w));
  for (double v : map) put32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  if (!out) throw DataError("failed writing " + path.string());
}

std::vector<float> read_raw_map(const std::filesystem::path& path, std::int64_t& h, std::int64_t& w) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  auto get32 = [&]() {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw DataError("truncated raw map " + path.string());
    return std::uint32_t(b[0]) | std::uint32_t(b[1]) << 8 | std::uint32_t(b[2]) << 16 | std::uint32_t(b[3]) << 24;
  };
  h = get32();
  w = get32();
  std::vector<float> out(static_cast<std::size_t>(h * w));
  for (auto& v : out) v = std::bit_cast<float>(get32());
  return out;
}

#define HAT_INSTANTIATE_LAM(T)                                                         \
  template Tensor<T> gaussian_blur(const Tensor<T>&, double);                          \
  template Tensor<T> blur_path(const Tensor<T>&, double, double);                      \
  template Tensor<T> gradient_detector(const Tensor<T>&, int, int, int);               \
  template Tensor<T> patch_sum_detector(const Tensor<T>&, int, int, int);              \
  template Tensor<T> apply_detector(DetectorKind, const Tensor<T>&, int, int, int);    \
  template LamResult lam(const ModelFn<T>&, const Tensor<T>&, const LamConfig&);

HAT_INSTANTIATE_LAM(float)
HAT_INSTANTIATE_LAM(double)

}  // namespace hat
