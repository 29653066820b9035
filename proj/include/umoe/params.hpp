// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <string_view>
#include <vector>

#include "umoe/tensor.hpp"

namespace umoe {

/// Coarse parameter families; training stages select what they update by
/// family.
enum class ParamGroup : std::uint8_t {
  Encoder,     // frozen stub encoders
  QFormer,     // audio/speech Q-Former bodies (queries, attention, MLP, norms)
  Projection,  // modality → LLM projection layers
  Embedding,   // token and position embeddings
  Attention,   // LLM self-attention projections
  Norm,        // LLM layer norms
  Ffn,         // expert / dense FFN base weights
  Router,
  Head,        // LM output projection
  Lora,
};

inline constexpr std::string_view group_name(ParamGroup g) {
  switch (g) {
    case ParamGroup::Encoder: return "encoder";
    case ParamGroup::QFormer: return "qformer";
    case ParamGroup::Projection: return "projection";
    case ParamGroup::Embedding: return "embedding";
    case ParamGroup::Attention: return "attention";
    case ParamGroup::Norm: return "norm";
    case ParamGroup::Ffn: return "ffn";
    case ParamGroup::Router: return "router";
    case ParamGroup::Head: return "head";
    case ParamGroup::Lora: return "lora";
  }
  return "?";
}

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
  ParamGroup group;
};

template <class T>
using ParamList = std::vector<NamedParam<T>>;

}  // namespace umoe
