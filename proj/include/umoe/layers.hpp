// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "umoe/ops.hpp"

namespace umoe {

template <class T>
struct LayerNormParams {
  Tensor<T> gain;
  Tensor<T> bias;

  static LayerNormParams make(std::size_t d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
  }
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gain, bias); }
};

/// Projection weights of one multi-head attention; all stored [in×out].
template <class T>
struct AttentionParams {
  Tensor<T> wq, wk, wv, wo;

  static AttentionParams make(std::size_t d_model, std::size_t d_kv, double stddev, Rng& rng) {
    return {Tensor<T>::randn({d_model, d_model}, stddev, rng, true),
            Tensor<T>::randn({d_kv, d_model}, stddev, rng, true),
            Tensor<T>::randn({d_kv, d_model}, stddev, rng, true),
            Tensor<T>::randn({d_model, d_model}, stddev, rng, true)};
  }
};

/// Per-head softmax(q·kᵀ/√(d/heads))·v on already projected inputs,
/// heads concatenated along columns. q: [Tq×d], k, v: [Tk×d].
template <class T>
Tensor<T> scaled_dot_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                               bool causal) {
  const std::size_t d = q.cols();
  if (heads == 0 || d % heads != 0)
    throw ConfigError("attention: width " + std::to_string(d) + " is not divisible by " + std::to_string(heads) +
                      " heads");
  if (k.cols() != d || v.cols() != d || k.rows() != v.rows())
    throw DimensionError("attention: q/k/v shapes " + shape_str(q.shape()) + ", " + shape_str(k.shape()) + ", " +
                         shape_str(v.shape()) + " disagree");
  if (causal && q.rows() != k.rows()) throw DimensionError("attention: causal mask needs square scores");
  const std::size_t hd = d / heads;
  const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(hd));
  std::vector<Tensor<T>> outs;
  outs.reserve(heads);
  for (std::size_t h = 0; h < heads; ++h) {
    auto qh = ops::slice_cols(q, h * hd, (h + 1) * hd);
    auto kh = ops::slice_cols(k, h * hd, (h + 1) * hd);
    auto vh = ops::slice_cols(v, h * hd, (h + 1) * hd);
    auto scores = ops::scale(ops::matmul_nt(qh, kh), inv_sqrt);
    if (causal) scores = ops::causal_mask(scores);
    outs.push_back(ops::matmul(ops::softmax(scores), vh));
  }
  return heads == 1 ? outs[0] : ops::concat_cols(outs);
}

/// Full attention sublayer: projections, per-head attention, output
/// projection. `project` maps (input, weight, weight slot) to x·W and lets
/// callers route a weight through an adapter.
template <class T, class Project>
Tensor<T> multi_head_attention(const Tensor<T>& x_q, const Tensor<T>& x_kv, const AttentionParams<T>& p,
                               std::size_t heads, bool causal, Project&& project) {
  auto q = project(x_q, p.wq, 0);
  auto k = project(x_kv, p.wk, 1);
  auto v = project(x_kv, p.wv, 2);
  return project(scaled_dot_attention(q, k, v, heads, causal), p.wo, 3);
}

template <class T>
Tensor<T> multi_head_attention(const Tensor<T>& x_q, const Tensor<T>& x_kv, const AttentionParams<T>& p,
                               std::size_t heads, bool causal) {
  return multi_head_attention(x_q, x_kv, p, heads, causal,
                              [](const Tensor<T>& x, const Tensor<T>& w, int) { return ops::matmul(x, w); });
}

/// down(silu(x·W_gate) ⊙ (x·W_up)).
template <class T>
Tensor<T> gated_ffn(const Tensor<T>& x, const Tensor<T>& w_gate, const Tensor<T>& w_up, const Tensor<T>& w_down) {
  if (w_gate.shape() != w_up.shape() || w_down.rank() != 2 || w_down.dim(0) != w_gate.dim(1) ||
      w_down.dim(1) != w_gate.dim(0))
    throw DimensionError("gated_ffn: inconsistent weights " + shape_str(w_gate.shape()) + ", " +
                         shape_str(w_up.shape()) + ", " + shape_str(w_down.shape()));
  return ops::matmul(ops::mul(ops::silu(ops::matmul(x, w_gate)), ops::matmul(x, w_up)), w_down);
}

}  // namespace umoe
