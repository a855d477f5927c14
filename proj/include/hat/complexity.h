#pragma once

#include <cstdint>
#include <string>

#include "hat/config.h"

namespace hat {

struct ComplexityReport {
  std::int64_t param_count = 0;
  // One multiply-accumulate counts as one operation.
  std::int64_t multi_adds = 0;
  std::int64_t input_h = 0;
  std::int64_t input_w = 0;
};

// Analytic count for one forward pass of a single image. Convolutions,
// linear projections, attention products (query x overlapped-key extent for
// OCA) and channel attention contribute to multi_adds; normalizations,
// activations, softmax and additions do not. Inputs are padded to window
// multiples as in the forward pass.
ComplexityReport complexity(const ModelConfig& cfg, std::int64_t input_h = 64, std::int64_t input_w = 64);

std::string format_report(const ComplexityReport& r);

}  // namespace hat
