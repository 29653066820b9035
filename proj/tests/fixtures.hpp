// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include "umoe/pipeline.hpp"

namespace umoe::testing {

// Small enough for dozens of training steps per test, with the real vocab.
inline ModelConfig tiny_cfg(std::size_t experts = 4, std::size_t topk = 2) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.ffn_dim = 24;
  c.heads = 2;
  c.vocab = 256;
  c.max_len = 32;
  c.experts = experts;
  c.topk = topk;
  c.moe_layout = MoeLayout::Interval;
  return c;
}

inline ConnectorConfig tiny_conn() {
  ConnectorConfig c;
  c.raw_dim = 16;
  c.enc_dim = 8;
  c.num_queries = 2;
  c.qformer_heads = 2;
  return c;
}

inline StageSpec quick(Stage s, std::size_t steps, const std::string& task = "") {
  auto sp = default_stage_spec(s);
  sp.steps = steps;
  sp.batch = 4;
  sp.lr = 3e-3;
  if (!task.empty()) sp.task = task;
  return sp;
}

inline std::vector<std::string> param_names(UniMoeModel<float>& m) {
  std::vector<std::string> out;
  m.visit([&](const std::string& n, Tensor<float>&, ParamGroup) { out.push_back(n); });
  return out;
}

}  // namespace umoe::testing
