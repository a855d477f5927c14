#include "hat/complexity.h"

#include <cstdio>

namespace hat {
namespace {

struct Counter {
  std::int64_t params = 0;
  std::int64_t macs = 0;

  void conv(std::int64_t pixels, std::int64_t in, std::int64_t out, std::int64_t k = 3) {
    params += out * in * k * k + out;
    macs += pixels * out * in * k * k;
  }
  void linear(std::int64_t rows, std::int64_t in, std::int64_t out) {
    params += out * in + out;
    macs += rows * in * out;
  }
  void norm(std::int64_t c) { params += 2 * c; }
};

// Window attention over `tokens` pixels: fused qkv, QK^T and AV products,
// output projection, plus the relative position table.
void attention(Counter& k, std::int64_t tokens, std::int64_t c, std::int64_t heads, std::int64_t window,
               std::int64_t overlapped) {
  const std::int64_t windows = tokens / (window * window);
  const std::int64_t lq = window * window, lk = overlapped * overlapped;
  const std::int64_t span = window + overlapped - 1;
  k.linear(tokens, c, 3 * c);
  k.params += span * span * heads;
  k.macs += 2 * windows * lq * lk * c;
  k.linear(tokens, c, c);
}

}  // namespace

ComplexityReport complexity(const ModelConfig& cfg, std::int64_t input_h, std::int64_t input_w) {
  cfg.validate();
  const std::int64_t m = cfg.window;
  const std::int64_t h = (input_h + m - 1) / m * m, w = (input_w + m - 1) / m * m;
  const std::int64_t tokens = h * w, c = cfg.channels;
  Counter k;

  k.conv(tokens, cfg.in_channels, c);
  for (int g = 0; g < cfg.rhag_count; ++g) {
    for (int b = 0; b < cfg.hab_per_rhag; ++b) {
      k.norm(c);
      attention(k, tokens, c, cfg.heads, m, m);
      if (cfg.use_cab) {
        k.conv(tokens, c, cfg.squeezed_channels());
        k.conv(tokens, cfg.squeezed_channels(), c);
        k.linear(1, c, cfg.ca_channels());
        k.linear(1, cfg.ca_channels(), c);
      }
      k.norm(c);
      k.linear(tokens, c, cfg.mlp_hidden());
      k.linear(tokens, cfg.mlp_hidden(), c);
    }
    if (cfg.use_ocab) {
      k.norm(c);
      attention(k, tokens, c, cfg.heads, m, cfg.overlapped_window());
      k.norm(c);
      k.linear(tokens, c, cfg.mlp_hidden());
      k.linear(tokens, cfg.mlp_hidden(), c);
    }
    k.conv(tokens, c, c);
  }
  k.conv(tokens, c, c);

  std::int64_t pixels = tokens;
  k.conv(pixels, c, cfg.head_features);
  for (int f : cfg.upsample_factors()) {
    k.conv(pixels, cfg.head_features, cfg.head_features * f * f);
    pixels *= f * f;
  }
  k.conv(pixels, cfg.head_features, cfg.out_channels);

  return {k.params, k.macs, input_h, input_w};
}

std::string format_report(const ComplexityReport& r) {
  char buf[256];
  std::snprintf(buf, sizeof buf, "input=%lldx%lld params=%lld (%.1fM) multi_adds=%lld (%.1fG)",
                static_cast<long long>(r.input_h), static_cast<long long>(r.input_w),
                static_cast<long long>(r.param_count), r.param_count / 1e6, static_cast<long long>(r.multi_adds),
                r.multi_adds / 1e9);
  return buf;
}

}  // namespace hat
