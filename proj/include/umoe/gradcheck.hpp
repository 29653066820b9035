// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "umoe/tensor.hpp"

namespace umoe {

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t coords_checked = 0;
  std::size_t worst_param = 0;
  std::size_t worst_index = 0;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double eps = 1e-6;
  std::size_t max_coords = 100;  // sampled uniformly when the parameters hold more
  std::uint64_t seed = 0;
  // Denominator floor: rel = |a - n| / max(|a|, |n|, floor). Keeps
  // vanishing gradients from turning round-off into large ratios.
  double floor = 1e-4;
};

/// Compares analytic gradients of the scalar `loss_fn` against central
/// differences on sampled parameter coordinates.
template <class T>
GradCheckReport finite_diff_check(const std::function<Tensor<T>()>& loss_fn, std::vector<Tensor<T>> params,
                                  const GradCheckOptions& opt = {}) {
  for (auto& p : params) p.zero_grad();
  loss_fn().backward();
  std::vector<std::vector<T>> analytic;
  for (auto& p : params) analytic.emplace_back(p.grad().begin(), p.grad().end());

  std::vector<std::pair<std::size_t, std::size_t>> coords;
  for (std::size_t i = 0; i < params.size(); ++i)
    for (std::size_t j = 0; j < params[i].size(); ++j) coords.emplace_back(i, j);
  if (coords.size() > opt.max_coords) {
    Rng rng(opt.seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(opt.max_coords);
    std::sort(coords.begin(), coords.end());
  }

  GradCheckReport rep;
  NoGradGuard guard;
  for (auto [pi, j] : coords) {
    T& x = params[pi][j];
    const T orig = x;
    // divide by the step actually taken after rounding x ± eps
    const T hi = orig + static_cast<T>(opt.eps);
    const T lo = orig - static_cast<T>(opt.eps);
    x = hi;
    const double fp = static_cast<double>(loss_fn().item());
    x = lo;
    const double fm = static_cast<double>(loss_fn().item());
    x = orig;
    const double num = (fp - fm) / (static_cast<double>(hi) - static_cast<double>(lo));
    const double an = static_cast<double>(analytic[pi][j]);
    const double denom = std::max({std::abs(an), std::abs(num), opt.floor});
    const double rel = std::abs(an - num) / denom;
    ++rep.coords_checked;
    if (rel > rep.max_rel_error || rep.coords_checked == 1) {
      rep.max_rel_error = std::max(rep.max_rel_error, rel);
      rep.worst_param = pi;
      rep.worst_index = j;
      rep.worst_analytic = an;
      rep.worst_numeric = num;
    }
  }
  return rep;
}

}  // namespace umoe
