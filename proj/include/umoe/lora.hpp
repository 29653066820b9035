// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <map>
#include <set>
#include <string>
#include <vector>

#include "umoe/ops.hpp"

namespace umoe {

/// Trainable low-rank delta for one frozen weight stored [in×out]:
///   y = x·W0 + (alpha/rank)·(x·Aᵀ)·Bᵀ,  A: [rank×in], B: [out×rank].
template <class T>
struct LoraAdapter {
  Tensor<T> a;
  Tensor<T> b;
  std::size_t rank = 0;
  double alpha = 0.0;
  std::string target;

  /// Fresh adapter: A Gaussian, B zero, so the delta starts at zero.
  static LoraAdapter make(std::string target, std::size_t in, std::size_t out, std::size_t rank, double alpha,
                          Rng& rng) {
    if (rank == 0) throw ConfigError("lora: rank must be >= 1 for " + target);
    if (!(alpha > 0)) throw ConfigError("lora: alpha must be > 0 for " + target);
    return {Tensor<T>::randn({rank, in}, 1.0 / std::sqrt(static_cast<double>(in)), rng, true),
            Tensor<T>::zeros({out, rank}, true), rank, alpha, std::move(target)};
  }

  T scaling() const { return static_cast<T>(alpha / static_cast<double>(rank)); }
};

/// Adapters keyed by the id of the weight they modify.
template <class T>
using LoraSet = std::map<std::string, LoraAdapter<T>>;

namespace detail {
template <class T>
void check_lora(const Tensor<T>& w0, const LoraAdapter<T>& ad) {
  if (ad.a.rank() != 2 || ad.b.rank() != 2 || ad.a.dim(0) != ad.rank || ad.b.dim(1) != ad.rank)
    throw DimensionError("lora: rank mismatch between A " + shape_str(ad.a.shape()) + " and B " +
                         shape_str(ad.b.shape()) + " for " + ad.target);
  if (ad.a.dim(1) != w0.dim(0) || ad.b.dim(0) != w0.dim(1))
    throw DimensionError("lora: adapter " + shape_str(ad.a.shape()) + "/" + shape_str(ad.b.shape()) +
                         " does not fit weight " + shape_str(w0.shape()) + " (" + ad.target + ")");
}
}  // namespace detail

template <class T>
Tensor<T> lora_forward(const Tensor<T>& x, const Tensor<T>& w0, const LoraAdapter<T>& ad) {
  detail::check_lora(w0, ad);
  auto delta = ops::matmul_nt(ops::matmul_nt(x, ad.a), ad.b);
  return ops::add(ops::matmul(x, w0), ops::scale(delta, ad.scaling()));
}

/// x·W, through the adapter registered for `id` when there is one.
template <class T>
Tensor<T> project(const Tensor<T>& x, const Tensor<T>& w, const LoraSet<T>& lora, const std::string& id) {
  auto it = lora.find(id);
  return it == lora.end() ? ops::matmul(x, w) : lora_forward(x, w, it->second);
}

/// W0 + (alpha/rank)·(B·A)ᵀ as a new leaf tensor with W0's grad flag.
/// Applying it twice adds the delta twice.
template <class T>
Tensor<T> merge_adapter(const Tensor<T>& w0, const LoraAdapter<T>& ad) {
  detail::check_lora(w0, ad);
  auto merged = w0.clone();
  const std::size_t in = w0.dim(0), out = w0.dim(1), r = ad.rank;
  const T s = ad.scaling();
  for (std::size_t i = 0; i < in; ++i)
    for (std::size_t o = 0; o < out; ++o) {
      T acc = 0;
      for (std::size_t k = 0; k < r; ++k) acc += ad.b[o * r + k] * ad.a[k * in + i];
      merged[i * out + o] += s * acc;
    }
  return merged;
}

/// A weight an adapter may be attached to.
template <class T>
struct LoraTarget {
  std::string id;
  Tensor<T> weight;
};

/// Adds one fresh adapter per target and freezes the targeted base weights.
template <class T>
std::vector<std::string> attach_adapters(LoraSet<T>& set, const std::vector<LoraTarget<T>>& targets,
                                         std::size_t rank, double alpha, Rng& rng) {
  if (targets.empty()) throw ConfigError("lora: empty target set");
  std::set<std::string> seen;
  for (const auto& t : targets)
    if (set.count(t.id) || !seen.insert(t.id).second)
      throw ConfigError("lora: adapter already attached to " + t.id);
  std::vector<std::string> ids;
  for (const auto& t : targets) {
    auto w = t.weight;
    w.set_requires_grad(false);
    set.emplace(t.id, LoraAdapter<T>::make(t.id, w.dim(0), w.dim(1), rank, alpha, rng));
    ids.push_back(t.id);
  }
  return ids;
}

}  // namespace umoe
