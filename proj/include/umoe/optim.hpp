// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <numbers>
#include <string>
#include <vector>

#include "umoe/tensor.hpp"

namespace umoe {

/// Multiplier on the base learning rate: 0.5·(1 + cos(π·step/horizon)),
/// held at 0 once step reaches the horizon. A zero horizon disables the
/// schedule.
inline double cosine_factor(std::size_t step, std::size_t horizon) {
  if (horizon == 0) return 1.0;
  if (step >= horizon) return 0.0;
  return 0.5 * (1.0 + std::cos(std::numbers::pi * static_cast<double>(step) / static_cast<double>(horizon)));
}

struct AdamWOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t horizon = 1;  // cosine schedule length in steps
};

/// Moments for one parameter tensor.
template <class T>
struct MomentSlot {
  Tensor<T> param;
  double lr = 0.0;
  std::vector<double> m;
  std::vector<double> v;
};

/// Optimizer state: per-parameter moments, step counter and schedule.
template <class T>
struct OptimizerState {
  std::vector<MomentSlot<T>> slots;
  std::size_t step = 0;
  AdamWOptions opt;
};

/// One decoupled-weight-decay Adam update of every slot from its current
/// gradient. Parameters without a gradient buffer are skipped.
template <class T>
void adamw_step(OptimizerState<T>& state) {
  const auto& o = state.opt;
  const double factor = cosine_factor(state.step, o.horizon);
  const double t = static_cast<double>(state.step + 1);
  const double bc1 = 1.0 - std::pow(o.beta1, t);
  const double bc2 = 1.0 - std::pow(o.beta2, t);
  for (auto& s : state.slots) {
    if (!s.param.has_grad()) continue;
    auto p = s.param.data();
    auto g = s.param.grad();
    if (s.m.size() != p.size() || s.v.size() != p.size())
      throw DimensionError("adamw_step: moment size does not match parameter " + shape_str(s.param.shape()));
    const double lr = s.lr * factor;
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double gi = static_cast<double>(g[i]);
      s.m[i] = o.beta1 * s.m[i] + (1.0 - o.beta1) * gi;
      s.v[i] = o.beta2 * s.v[i] + (1.0 - o.beta2) * gi * gi;
      const double mh = s.m[i] / bc1;
      const double vh = s.v[i] / bc2;
      const double pi = static_cast<double>(p[i]);
      p[i] = static_cast<T>(pi - lr * (mh / (std::sqrt(vh) + o.eps) + o.weight_decay * pi));
    }
  }
  ++state.step;
}

/// AdamW over parameter groups with individual base learning rates.
template <class T>
class AdamW {
 public:
  explicit AdamW(AdamWOptions opt = {}) { state_.opt = opt; }

  void add_group(const std::vector<Tensor<T>>& params, double lr) {
    for (const auto& p : params) state_.slots.push_back({p, lr, std::vector<double>(p.size(), 0.0),
                                                         std::vector<double>(p.size(), 0.0)});
  }

  void zero_grad() {
    for (auto& s : state_.slots) s.param.zero_grad();
  }

  void step() { adamw_step(state_); }

  /// Current schedule-scaled rate of the first group.
  double current_lr() const {
    return state_.slots.empty() ? 0.0 : state_.slots.front().lr * cosine_factor(state_.step, state_.opt.horizon);
  }

  std::size_t steps_taken() const { return state_.step; }
  OptimizerState<T>& state() { return state_; }

 private:
  OptimizerState<T> state_;
};

}  // namespace umoe
