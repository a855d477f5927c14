#pragma once

#include <cstdint>
#include <vector>

#include "hat/tensor.h"

namespace hat {

struct Schedule {
  double initial_lr = 2e-4;
  std::vector<std::int64_t> milestones;
  double decay = 0.5;
  std::int64_t total_steps = 0;

  // Milestones strictly increasing and not beyond total_steps.
  void validate() const;
  // Milestones at 50%, 80%, 90% and 95% of the run.
  static Schedule proportional(double initial_lr, std::int64_t total_steps);
};

// initial_lr * decay^(number of milestones <= step).
double lr_at(const Schedule& s, std::int64_t step);

template <typename T>
struct AdamState {
  double beta1 = 0.9;
  double beta2 = 0.99;
  double eps = 1e-8;
  std::int64_t step = 0;
  double lr = 0;
  std::vector<std::vector<T>> m;
  std::vector<std::vector<T>> v;
};

// Bias-corrected Adam update. Empty gradient vectors count as zero.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state,
               double lr);

// Uses each parameter's accumulated gradient.
template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr);

}  // namespace hat
