#include "hat/optim.h"

#include <cmath>
#include <string>

#include "hat/errors.h"

namespace hat {

void Schedule::validate() const {
  if (!(initial_lr > 0)) throw ConfigError("learning rate must be positive");
  for (std::size_t i = 0; i < milestones.size(); ++i) {
    if (milestones[i] < 0 || (i > 0 && milestones[i] <= milestones[i - 1])) {
      throw ConfigError("milestones must be strictly increasing and nonnegative");
    }
    if (total_steps > 0 && milestones[i] > total_steps) {
      throw ConfigError("milestone " + std::to_string(milestones[i]) + " beyond total steps " + std::to_string(total_steps));
    }
  }
}

Schedule Schedule::proportional(double initial_lr, std::int64_t total_steps) {
  Schedule s;
  s.initial_lr = initial_lr;
  s.total_steps = total_steps;
  for (double f : {0.5, 0.8, 0.9, 0.95}) {
    const auto m = static_cast<std::int64_t>(f * static_cast<double>(total_steps));
    if (m > 0 && (s.milestones.empty() || m > s.milestones.back())) s.milestones.push_back(m);
  }
  return s;
}

double lr_at(const Schedule& s, std::int64_t step) {
  double lr = s.initial_lr;
  for (auto m : s.milestones) {
    if (m <= step) lr *= s.decay;
  }
  return lr;
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, const std::vector<std::vector<T>>& grads, AdamState<T>& state,
               double lr) {
  if (grads.size() != params.size()) throw ShapeError("adam: gradient count differs from parameter count");
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      state.v.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("adam: moment count differs from parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto n = static_cast<std::size_t>(params[i].numel());
    if (state.m[i].size() != n || state.v[i].size() != n || (!grads[i].empty() && grads[i].size() != n)) {
      throw ShapeError("adam: shape mismatch for parameter " + std::to_string(i));
    }
  }
  state.step += 1;
  state.lr = lr;
  const double b1 = state.beta1, b2 = state.beta2;
  const double c1 = 1 - std::pow(b1, static_cast<double>(state.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto p = params[i].mutable_data();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t j = 0; j < p.size(); ++j) {
      const double g = grads[i].empty() ? 0.0 : static_cast<double>(grads[i][j]);
      const double mj = b1 * m[j] + (1 - b1) * g;
      const double vj = b2 * v[j] + (1 - b2) * g * g;
      m[j] = static_cast<T>(mj);
      v[j] = static_cast<T>(vj);
      p[j] = static_cast<T>(p[j] - lr * (mj / c1) / (std::sqrt(vj / c2) + state.eps));
    }
  }
}

template <typename T>
void adam_step(std::vector<Tensor<T>>& params, AdamState<T>& state, double lr) {
  std::vector<std::vector<T>> grads;
  grads.reserve(params.size());
  for (const auto& p : params) grads.emplace_back(p.grad_data().begin(), p.grad_data().end());
  adam_step(params, grads, state, lr);
}

template struct AdamState<float>;
template struct AdamState<double>;
template void adam_step(std::vector<Tensor<float>>&, const std::vector<std::vector<float>>&, AdamState<float>&, double);
template void adam_step(std::vector<Tensor<double>>&, const std::vector<std::vector<double>>&, AdamState<double>&, double);
template void adam_step(std::vector<Tensor<float>>&, AdamState<float>&, double);
template void adam_step(std::vector<Tensor<double>>&, AdamState<double>&, double);

}  // namespace hat
