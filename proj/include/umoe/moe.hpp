// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <vector>

#include "umoe/layers.hpp"
#include "umoe/lora.hpp"

namespace umoe {

enum class MoeLayout : std::uint8_t { FirstHalf, SecondHalf, Interval, All };

inline std::string_view layout_name(MoeLayout l) {
  switch (l) {
    case MoeLayout::FirstHalf: return "FirstHalf";
    case MoeLayout::SecondHalf: return "SecondHalf";
    case MoeLayout::Interval: return "Interval";
    case MoeLayout::All: return "All";
  }
  return "?";
}

inline MoeLayout parse_layout(std::string_view s) {
  for (auto l : {MoeLayout::FirstHalf, MoeLayout::SecondHalf, MoeLayout::Interval, MoeLayout::All})
    if (layout_name(l) == s) return l;
  throw ConfigError("unknown moe_layout '" + std::string(s) + "' (FirstHalf|SecondHalf|Interval|All)");
}

struct ModelConfig {
  std::size_t layers = 4;
  std::size_t d_model = 64;
  std::size_t ffn_dim = 172;
  std::size_t ffn_factor = 3;
  std::size_t heads = 4;
  std::size_t vocab = 256;
  std::size_t max_len = 64;
  std::size_t experts = 4;
  std::size_t topk = 2;
  MoeLayout moe_layout = MoeLayout::Interval;
  double aux_loss_coeff = 0.0;
  double init_std = 0.02;

  void validate() const {
    if (topk < 1 || topk > experts)
      throw ConfigError("topk must satisfy 1 <= topk <= experts (topk=" + std::to_string(topk) +
                        ", experts=" + std::to_string(experts) + ")");
    if (heads == 0 || d_model % heads != 0)
      throw ConfigError("width " + std::to_string(d_model) + " is not divisible by heads " + std::to_string(heads));
    if (aux_loss_coeff < 0) throw ConfigError("aux_loss_coeff must be >= 0");
    if (layers < 1) throw ConfigError("layers must be >= 1");
  }
};

using LayerLayout = std::vector<bool>;

/// Which blocks carry an MoE layer. Interval marks the odd (zero-based)
/// blocks, so a 32-block stack has 16 MoE layers.
inline LayerLayout build_layer_layout(std::size_t layers, MoeLayout layout) {
  if (layers < 2) throw ConfigError("layer layout needs at least 2 layers");
  LayerLayout out(layers, false);
  const std::size_t half = (layers + 1) / 2;
  for (std::size_t i = 0; i < layers; ++i) {
    switch (layout) {
      case MoeLayout::FirstHalf: out[i] = i < half; break;
      case MoeLayout::SecondHalf: out[i] = i >= layers - half; break;
      case MoeLayout::Interval: out[i] = i % 2 == 1; break;
      case MoeLayout::All: out[i] = true; break;
    }
  }
  return out;
}

inline LayerLayout build_layer_layout(const ModelConfig& cfg) { return build_layer_layout(cfg.layers, cfg.moe_layout); }

inline std::size_t count_moe_layers(const LayerLayout& l) {
  return static_cast<std::size_t>(std::count(l.begin(), l.end(), true));
}

template <class T>
struct RouterParams {
  Tensor<T> weight;  // [d × M]

  static RouterParams make(std::size_t d, std::size_t experts, double stddev, Rng& rng) {
    return {Tensor<T>::randn({d, experts}, stddev, rng, true)};
  }
  std::size_t experts() const { return weight.dim(1); }
};

/// Router output for one MoE layer.
template <class T>
struct RoutingDecision {
  Tensor<T> probs;                   // [tokens × M]
  std::vector<std::size_t> indices;  // [tokens × topk], descending probability
  Tensor<T> gates;                   // [tokens × topk], probs at indices (not renormalized)
  std::size_t topk = 0;

  std::size_t tokens() const { return probs.rows(); }
  std::size_t experts() const { return probs.cols(); }
  std::size_t expert(std::size_t t, std::size_t slot) const { return indices[t * topk + slot]; }
};

/// Indices of the k largest values of a row; ties go to the lower index.
template <class T>
std::vector<std::size_t> top_k_indices(std::span<const T> row, std::size_t k) {
  std::vector<std::size_t> idx(row.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::partial_sort(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(k), idx.end(),
                    [&](std::size_t a, std::size_t b) { return row[a] > row[b] || (row[a] == row[b] && a < b); });
  idx.resize(k);
  return idx;
}

/// Linear router + softmax over experts + top-k selection.
template <class T>
RoutingDecision<T> route(const Tensor<T>& tokens, const RouterParams<T>& router, std::size_t topk) {
  const std::size_t m = router.experts();
  if (topk < 1 || topk > m)
    throw ConfigError("route: topk " + std::to_string(topk) + " invalid for " + std::to_string(m) + " experts");
  RoutingDecision<T> d;
  d.topk = topk;
  d.probs = ops::softmax(ops::matmul(tokens, router.weight), 1);
  const std::size_t t = d.probs.rows();
  d.indices.reserve(t * topk);
  for (std::size_t i = 0; i < t; ++i) {
    auto sel = top_k_indices<T>(d.probs.data().subspan(i * m, m), topk);
    d.indices.insert(d.indices.end(), sel.begin(), sel.end());
  }
  d.gates = ops::take_along_rows(d.probs, d.indices, topk);
  return d;
}

/// Frozen base weights of one gated FFN expert; `id` prefixes weight ids.
template <class T>
struct ExpertFFN {
  Tensor<T> gate;  // [d × f]
  Tensor<T> up;    // [d × f]
  Tensor<T> down;  // [f × d]
  std::string id;

  static ExpertFFN make(std::string id, std::size_t d, std::size_t f, double stddev, Rng& rng) {
    return {Tensor<T>::randn({d, f}, stddev, rng, true), Tensor<T>::randn({d, f}, stddev, rng, true),
            Tensor<T>::randn({f, d}, stddev, rng, true), std::move(id)};
  }

  /// Deep copy of the weights under a new id.
  ExpertFFN copy_as(std::string new_id) const { return {gate.clone(), up.clone(), down.clone(), std::move(new_id)}; }

  std::string gate_id() const { return id + ".gate"; }
  std::string up_id() const { return id + ".up"; }
  std::string down_id() const { return id + ".down"; }
};

/// Gated FFN through whatever adapters are attached to the expert's weights.
template <class T>
Tensor<T> expert_forward(const Tensor<T>& x, const ExpertFFN<T>& e, const LoraSet<T>& lora) {
  auto g = project(x, e.gate, lora, e.gate_id());
  auto u = project(x, e.up, lora, e.up_id());
  return project(ops::mul(ops::silu(g), u), e.down, lora, e.down_id());
}

namespace detail {
template <class T>
void check_decision(const Tensor<T>& tokens, std::size_t num_experts, const RoutingDecision<T>& d) {
  if (d.tokens() != tokens.rows())
    throw DimensionError("moe: decision covers " + std::to_string(d.tokens()) + " tokens, input has " +
                         std::to_string(tokens.rows()));
  if (d.experts() != num_experts)
    throw DimensionError("moe: decision has " + std::to_string(d.experts()) + " experts, layer has " +
                         std::to_string(num_experts));
  for (auto i : d.indices)
    if (i >= num_experts) throw DimensionError("moe: expert index " + std::to_string(i) + " out of range");
}
}  // namespace detail

/// Rows of `tokens` assigned to each expert, in (token, slot) order.
struct ExpertAssignment {
  std::vector<std::size_t> token;  // source token per row
  std::vector<std::size_t> slot;   // flat (token*topk + slot) per row
};

template <class T>
std::vector<ExpertAssignment> assignments_by_expert(const RoutingDecision<T>& d) {
  std::vector<ExpertAssignment> out(d.experts());
  for (std::size_t t = 0; t < d.tokens(); ++t)
    for (std::size_t s = 0; s < d.topk; ++s) {
      auto& a = out[d.expert(t, s)];
      a.token.push_back(t);
      a.slot.push_back(t * d.topk + s);
    }
  return out;
}

/// Σ over selected experts of gate · expert(x), per token. Unselected
/// experts never see the token.
template <class T>
Tensor<T> moe_forward(const Tensor<T>& tokens, const std::vector<ExpertFFN<T>>& experts,
                      const RoutingDecision<T>& decision, const LoraSet<T>& lora = {}) {
  detail::check_decision(tokens, experts.size(), decision);
  const auto groups = assignments_by_expert(decision);
  std::vector<Tensor<T>> outs;
  std::vector<std::size_t> slot_row(decision.tokens() * decision.topk);
  std::size_t row = 0;
  for (std::size_t e = 0; e < experts.size(); ++e) {
    const auto& g = groups[e];
    if (g.token.empty()) continue;
    outs.push_back(expert_forward(ops::gather_rows(tokens, g.token), experts[e], lora));
    for (auto s : g.slot) slot_row[s] = row++;
  }
  return ops::combine_slots(outs.size() == 1 ? outs[0] : ops::concat_rows(outs), decision.gates, slot_row);
}

/// α·M·Σ_i f_i·P̄_i, with f_i the share of (token, slot) assignments sent
/// to expert i and P̄_i its mean router probability.
template <class T>
Tensor<T> aux_balance_loss(const RoutingDecision<T>& d, double alpha) {
  if (alpha < 0) throw ConfigError("aux loss coefficient must be >= 0");
  if (d.tokens() == 0) throw NumericError("aux loss: no tokens");
  const std::size_t m = d.experts();
  std::vector<T> frac(m, T(0));
  for (auto i : d.indices) frac[i] += T(1);
  const T denom = static_cast<T>(d.tokens() * d.topk);
  for (auto& f : frac) f /= denom;
  auto weighted = ops::sum(ops::mul(ops::mean_rows(d.probs), Tensor<T>::from({m}, std::move(frac))));
  return ops::scale(weighted, static_cast<T>(alpha * static_cast<double>(m)));
}

struct ParamCount {
  double activated = 0;
  double total = 0;
};

/// Activated/total parameters of an MoE upcycling of a dense base model:
/// every MoE layer adds (M−1) expert copies, of which (topk−1) run per token.
inline ParamCount count_parameters(const ModelConfig& cfg, double base_total) {
  const std::size_t moe_layers = cfg.experts == 1 ? 0 : count_moe_layers(build_layer_layout(cfg));
  const double extra = static_cast<double>(cfg.ffn_factor) * static_cast<double>(cfg.d_model) *
                       static_cast<double>(cfg.ffn_dim);
  return {base_total + static_cast<double>(moe_layers) * static_cast<double>(cfg.topk - 1) * extra,
          base_total + static_cast<double>(moe_layers) * static_cast<double>(cfg.experts - 1) * extra};
}

/// Billions rounded to one decimal, e.g. 13.2.
inline double round_billions(double params) { return std::round(params / 1e8) / 10.0; }

}  // namespace umoe
