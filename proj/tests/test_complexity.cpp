#include <doctest.h>

#include <chrono>
#include <cmath>

#include "hat/complexity.h"
#include "hat/model.h"

using namespace hat;

namespace {

// Multiply-accumulates recovered from the instantiated weight shapes: every
// weight matrix or kernel runs once per spatial position it sees, plus the
// two attention products per window.
std::int64_t macs_from_weights(const HatModel<float>& model, std::int64_t h, std::int64_t w) {
  const auto& cfg = model.config();
  const std::int64_t m = cfg.window;
  h = (h + m - 1) / m * m;
  w = (w + m - 1) / m * m;
  std::int64_t pixels = h * w, total = 0;
  for (const auto& [name, t] : model.parameters()) {
    if (!name.ends_with(".weight") || name.find("norm") != std::string::npos) continue;
    std::int64_t per = 1;
    for (auto d : t.shape()) per *= d;
    const bool pooled = name.find("ca_down") != std::string::npos || name.find("ca_up") != std::string::npos;
    total += pooled ? per : per * pixels;
    if (name.starts_with("head.up.")) {
      const auto f = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(t.dim(0) / t.dim(1)))));
      pixels *= f * f;
    }
    if (name.ends_with(".qkv.weight")) {
      const std::int64_t mk = name.find("ocab") != std::string::npos ? cfg.overlapped_window() : m;
      total += 2 * (h * w / (m * m)) * (m * m) * (mk * mk) * cfg.channels;
    }
  }
  return total;
}

double ratio(double got, double want) { return std::abs(got / want - 1); }

}  // namespace

TEST_CASE("analytic parameter count equals the instantiated model") {
  for (const char* name : {"tiny", "hat-s", "hat", "baseline-w8", "baseline-w16"}) {
    auto cfg = ModelConfig::preset(name);
    HatModel<float> model(cfg, 0);
    CHECK_MESSAGE(complexity(cfg).param_count == model.parameter_count(), name);
  }
  auto cfg = ModelConfig::preset("tiny");
  for (int s : {1, 3, 4}) {
    cfg.scale = s;
    cfg.head = s == 1 ? HeadKind::SameResolution : HeadKind::PixelShuffle;
    CHECK(complexity(cfg).param_count == HatModel<float>(cfg, 0).parameter_count());
  }
}

TEST_CASE("analytic multiply-accumulates equal the weight-shape count") {
  for (const char* name : {"tiny", "hat-s", "hat", "baseline-w8"}) {
    auto cfg = ModelConfig::preset(name);
    HatModel<float> model(cfg, 0);
    CHECK_MESSAGE(complexity(cfg, 64, 64).multi_adds == macs_from_weights(model, 64, 64), name);
    CHECK_MESSAGE(complexity(cfg, 50, 70).multi_adds == macs_from_weights(model, 50, 70), name);
  }
}

TEST_CASE("published complexity figures are reproduced within 5 percent") {
  const auto t0 = std::chrono::steady_clock::now();
  const auto hat = complexity(ModelConfig::preset("hat"));
  const auto small = complexity(ModelConfig::preset("hat-s"));
  const auto w8 = complexity(ModelConfig::preset("baseline-w8"));
  const auto w16 = complexity(ModelConfig::preset("baseline-w16"));
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  CHECK(ratio(hat.param_count, 20.8e6) < 0.05);
  CHECK(ratio(hat.multi_adds, 103.7e9) < 0.05);
  CHECK(ratio(small.param_count, 9.6e6) < 0.05);
  CHECK(ratio(small.multi_adds, 54.9e9) < 0.05);
  CHECK(ratio(w8.param_count, 11.9e6) < 0.05);
  CHECK(ratio(w8.multi_adds, 53.6e9) < 0.05);
  CHECK(ratio(w16.param_count, 12.1e6) < 0.05);
  CHECK(ratio(w16.multi_adds, 63.8e9) < 0.05);
  CHECK(w16.multi_adds > w8.multi_adds);
  CHECK(w16.param_count > w8.param_count);
  CHECK(secs < 1.0);
}

TEST_CASE("complexity is deterministic and grows with the input") {
  const auto cfg = ModelConfig::preset("hat");
  CHECK(complexity(cfg).multi_adds == complexity(cfg).multi_adds);
  CHECK(complexity(cfg, 128, 128).multi_adds > complexity(cfg).multi_adds);
  CHECK(complexity(cfg, 128, 128).param_count == complexity(cfg).param_count);
  // Inputs are padded to window multiples first.
  CHECK(complexity(cfg, 60, 60).multi_adds == complexity(cfg, 64, 64).multi_adds);
  const auto r = format_report(complexity(cfg));
  CHECK(r.find("(20.8M)") != std::string::npos);
}
