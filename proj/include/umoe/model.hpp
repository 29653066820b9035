// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "umoe/checkpoint.hpp"
#include "umoe/connectors.hpp"
#include "umoe/moe.hpp"
#include "umoe/params.hpp"

namespace umoe {

/// One LLM block: pre-norm attention, pre-norm FFN (dense or MoE), and a
/// closing layer norm.
template <class T>
struct Block {
  std::string prefix;  // "llm.l<i>"
  LayerNormParams<T> ln_attn, ln_ffn, ln_out;
  AttentionParams<T> attn;
  std::vector<ExpertFFN<T>> experts;     // exactly one when dense
  std::optional<RouterParams<T>> router;  // set iff this block is MoE

  bool is_moe() const { return router.has_value(); }
  std::string attn_id(int slot) const {
    static constexpr const char* kNames[] = {"wq", "wk", "wv", "wo"};
    return prefix + ".attn." + kNames[slot];
  }
};

/// Executes the expert part of an MoE layer. The default runs everything
/// in-process; the parallel simulator swaps in sharded dispatch.
template <class T>
using MoeExecutor = std::function<Tensor<T>(const Tensor<T>&, const std::vector<ExpertFFN<T>>&,
                                            const RoutingDecision<T>&, const LoraSet<T>&)>;

template <class T>
struct BlockOutput {
  Tensor<T> x;
  std::optional<RoutingDecision<T>> decision;
};

template <class T>
BlockOutput<T> block_forward(const Tensor<T>& x, const Block<T>& b, const ModelConfig& cfg, const LoraSet<T>& lora,
                             const MoeExecutor<T>& exec = {}) {
  if (x.cols() != cfg.d_model)
    throw DimensionError("block: input width " + std::to_string(x.cols()) + " != " + std::to_string(cfg.d_model));
  auto n1 = b.ln_attn(x);
  auto proj = [&](const Tensor<T>& in, const Tensor<T>& w, int slot) { return project(in, w, lora, b.attn_id(slot)); };
  auto xs = ops::add(multi_head_attention(n1, n1, b.attn, cfg.heads, true, proj), x);
  auto n2 = b.ln_ffn(xs);
  BlockOutput<T> out;
  Tensor<T> y;
  if (b.is_moe()) {
    out.decision = route(n2, *b.router, cfg.topk);
    y = exec ? exec(n2, b.experts, *out.decision, lora) : moe_forward(n2, b.experts, *out.decision, lora);
  } else {
    y = expert_forward(n2, b.experts.front(), lora);
  }
  out.x = b.ln_out(ops::add(y, xs));
  return out;
}

template <class T>
struct LayerDecision {
  std::size_t layer;
  RoutingDecision<T> decision;
};

template <class T>
struct LmOutput {
  Tensor<T> logits;  // [tokens × vocab]
  std::vector<LayerDecision<T>> decisions;
  Tensor<T> aux_loss;  // scalar; exactly 0 when α = 0 or no MoE layer
};

template <class T>
struct LanguageModel {
  Tensor<T> tok_emb;  // [V × d]
  Tensor<T> pos_emb;  // [max_len × d]
  Tensor<T> head;     // [d × V]
  std::vector<Block<T>> blocks;
};

/// Connectors, LLM stack and attached adapters.
template <class T>
struct UniMoeModel {
  ModelConfig cfg;
  ConnectorConfig conn_cfg;
  Connectors<T> conn;
  LanguageModel<T> lm;
  LoraSet<T> lora;

  /// Dense model: every block has a single FFN and no router.
  static UniMoeModel make_dense(const ModelConfig& cfg, ConnectorConfig cc, std::uint64_t seed) {
    cfg.validate();
    cc.d_model = cfg.d_model;
    Rng rng(seed);
    UniMoeModel m;
    m.cfg = cfg;
    m.conn_cfg = cc;
    m.conn = Connectors<T>::make(cc, rng);
    const double sd = cfg.init_std;
    m.lm.tok_emb = Tensor<T>::randn({cfg.vocab, cfg.d_model}, sd, rng, true);
    m.lm.pos_emb = Tensor<T>::randn({cfg.max_len, cfg.d_model}, sd, rng, true);
    m.lm.head = Tensor<T>::randn({cfg.d_model, cfg.vocab}, sd, rng, true);
    for (std::size_t i = 0; i < cfg.layers; ++i) {
      Block<T> b;
      b.prefix = "llm.l" + std::to_string(i);
      b.ln_attn = LayerNormParams<T>::make(cfg.d_model);
      b.ln_ffn = LayerNormParams<T>::make(cfg.d_model);
      b.ln_out = LayerNormParams<T>::make(cfg.d_model);
      b.attn = AttentionParams<T>::make(cfg.d_model, cfg.d_model, sd, rng);
      b.experts.push_back(ExpertFFN<T>::make(b.prefix + ".ffn.e0", cfg.d_model, cfg.ffn_dim, sd, rng));
      m.lm.blocks.push_back(std::move(b));
    }
    return m;
  }

  /// Turns the blocks flagged by the layout into MoE blocks. `expert_init`
  /// supplies expert j of block i; routers are fresh Gaussian draws.
  void convert_to_moe(const std::function<ExpertFFN<T>(std::size_t block, std::size_t expert)>& expert_init,
                      std::uint64_t router_seed) {
    const auto layout = build_layer_layout(cfg);
    Rng rng(router_seed);
    for (std::size_t i = 0; i < lm.blocks.size(); ++i) {
      if (!layout[i]) continue;
      auto& b = lm.blocks[i];
      std::vector<ExpertFFN<T>> experts;
      for (std::size_t j = 0; j < cfg.experts; ++j) {
        auto e = expert_init(i, j);
        e.id = b.prefix + ".ffn.e" + std::to_string(j);
        if (e.gate.shape() != Shape{cfg.d_model, cfg.ffn_dim} || e.down.shape() != Shape{cfg.ffn_dim, cfg.d_model})
          throw DimensionError("expert init for " + e.id + " has wrong shape");
        experts.push_back(std::move(e));
      }
      b.experts = std::move(experts);
      b.router = RouterParams<T>::make(cfg.d_model, cfg.experts, cfg.init_std, rng);
    }
  }

  bool is_moe() const {
    for (const auto& b : lm.blocks)
      if (b.is_moe()) return true;
    return false;
  }

  /// Calls f(name, tensor&, group) for every parameter, adapters included.
  template <class F>
  void visit(F&& f) {
    conn.visit(f);
    f("llm.tok_emb", lm.tok_emb, ParamGroup::Embedding);
    f("llm.pos_emb", lm.pos_emb, ParamGroup::Embedding);
    for (auto& b : lm.blocks) {
      const auto& p = b.prefix;
      f(p + ".ln_attn.gain", b.ln_attn.gain, ParamGroup::Norm);
      f(p + ".ln_attn.bias", b.ln_attn.bias, ParamGroup::Norm);
      f(b.attn_id(0), b.attn.wq, ParamGroup::Attention);
      f(b.attn_id(1), b.attn.wk, ParamGroup::Attention);
      f(b.attn_id(2), b.attn.wv, ParamGroup::Attention);
      f(b.attn_id(3), b.attn.wo, ParamGroup::Attention);
      f(p + ".ln_ffn.gain", b.ln_ffn.gain, ParamGroup::Norm);
      f(p + ".ln_ffn.bias", b.ln_ffn.bias, ParamGroup::Norm);
      if (b.router) f(p + ".router.weight", b.router->weight, ParamGroup::Router);
      for (auto& e : b.experts) {
        f(e.gate_id(), e.gate, ParamGroup::Ffn);
        f(e.up_id(), e.up, ParamGroup::Ffn);
        f(e.down_id(), e.down, ParamGroup::Ffn);
      }
      f(p + ".ln_out.gain", b.ln_out.gain, ParamGroup::Norm);
      f(p + ".ln_out.bias", b.ln_out.bias, ParamGroup::Norm);
    }
    f("llm.head", lm.head, ParamGroup::Head);
    for (auto& [id, ad] : lora) {
      f(id + ".lora_A", ad.a, ParamGroup::Lora);
      f(id + ".lora_B", ad.b, ParamGroup::Lora);
    }
  }

  ParamList<T> params() {
    ParamList<T> out;
    visit([&](const std::string& n, Tensor<T>& t, ParamGroup g) { out.push_back({n, t, g}); });
    return out;
  }

  /// Deep copy: no tensor is shared with the original.
  UniMoeModel clone() const {
    UniMoeModel c = *this;
    c.visit([](const std::string&, Tensor<T>& t, ParamGroup) { t = t.clone(); });
    return c;
  }

  /// Sets requires_grad on exactly the parameters accepted by `trainable`.
  void set_trainable(const std::function<bool(const std::string&, ParamGroup)>& trainable) {
    visit([&](const std::string& n, Tensor<T>& t, ParamGroup g) { t.set_requires_grad(trainable(n, g)); });
  }

  void zero_grad() {
    visit([](const std::string&, Tensor<T>& t, ParamGroup) {
      if (t.has_grad()) t.zero_grad();
    });
  }

  std::vector<CheckpointEntry> to_checkpoint() const {
    std::vector<CheckpointEntry> out;
    const_cast<UniMoeModel*>(this)->visit([&](const std::string& n, Tensor<T>& t, ParamGroup) {
      out.push_back({n, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    });
    return out;
  }

  /// Copies checkpoint values into matching parameters. Every model
  /// parameter must be present with the same shape; adapters named in the
  /// checkpoint but missing from the model are created first.
  void load_checkpoint_entries(const std::vector<CheckpointEntry>& entries) {
    std::map<std::string, const CheckpointEntry*> by_name;
    for (const auto& e : entries) by_name[e.name] = &e;
    for (const auto& e : entries) {
      static const std::string kSuffix = ".lora_A";
      if (e.name.size() > kSuffix.size() && e.name.ends_with(kSuffix)) {
        const auto id = e.name.substr(0, e.name.size() - kSuffix.size());
        if (!lora.count(id)) {
          auto bit = by_name.find(id + ".lora_B");
          if (bit == by_name.end()) throw FormatError("checkpoint: " + e.name + " without matching lora_B");
          LoraAdapter<T> ad;
          ad.a = Tensor<T>::zeros(e.shape, true);
          ad.b = Tensor<T>::zeros(bit->second->shape, true);
          ad.rank = e.shape.at(0);
          ad.alpha = lora_alpha_hint;
          ad.target = id;
          lora.emplace(id, std::move(ad));
        }
      }
    }
    std::size_t used = 0;
    visit([&](const std::string& n, Tensor<T>& t, ParamGroup) {
      auto it = by_name.find(n);
      if (it == by_name.end()) throw FormatError("checkpoint: missing tensor " + n);
      if (it->second->shape != t.shape())
        throw FormatError("checkpoint: shape mismatch for " + n + ": file " + shape_str(it->second->shape) +
                          ", model " + shape_str(t.shape()));
      auto src = it->second->data;
      std::copy(src.begin(), src.end(), t.data().begin());
      ++used;
    });
    if (used != entries.size()) throw FormatError("checkpoint: contains tensors the model does not have");
  }

  /// Alpha given to adapters recreated from a checkpoint.
  double lora_alpha_hint = 16.0;
};

/// Full LLM pass over assembled input embeddings.
template <class T>
LmOutput<T> forward_lm(const Tensor<T>& x0, const UniMoeModel<T>& m, const MoeExecutor<T>& exec = {}) {
  const auto& cfg = m.cfg;
  if (x0.rows() > cfg.max_len)
    throw DimensionError("sequence length " + std::to_string(x0.rows()) + " exceeds max_len " +
                         std::to_string(cfg.max_len));
  auto x = ops::add(x0, ops::slice_rows(m.lm.pos_emb, 0, x0.rows()));
  LmOutput<T> out;
  std::vector<Tensor<T>> aux_terms;
  for (std::size_t i = 0; i < m.lm.blocks.size(); ++i) {
    auto r = block_forward(x, m.lm.blocks[i], cfg, m.lora, exec);
    x = r.x;
    if (r.decision) {
      if (cfg.aux_loss_coeff > 0) aux_terms.push_back(aux_balance_loss(*r.decision, cfg.aux_loss_coeff));
      out.decisions.push_back({i, std::move(*r.decision)});
    }
  }
  out.logits = ops::matmul(x, m.lm.head);
  if (aux_terms.empty()) {
    out.aux_loss = Tensor<T>::scalar(T(0));
  } else {
    auto s = aux_terms[0];
    for (std::size_t i = 1; i < aux_terms.size(); ++i) s = ops::add(s, aux_terms[i]);
    out.aux_loss = ops::scale(s, T(1) / static_cast<T>(aux_terms.size()));
  }
  return out;
}

/// LoRA targets: the three FFN matrices of every expert (dense FFNs count
/// as one expert).
template <class T>
std::vector<LoraTarget<T>> ffn_lora_targets(UniMoeModel<T>& m) {
  std::vector<LoraTarget<T>> out;
  for (auto& b : m.lm.blocks)
    for (auto& e : b.experts) {
      out.push_back({e.gate_id(), e.gate});
      out.push_back({e.up_id(), e.up});
      out.push_back({e.down_id(), e.down});
    }
  return out;
}

template <class T>
std::vector<LoraTarget<T>> attention_lora_targets(UniMoeModel<T>& m) {
  std::vector<LoraTarget<T>> out;
  for (auto& b : m.lm.blocks) {
    out.push_back({b.attn_id(0), b.attn.wq});
    out.push_back({b.attn_id(1), b.attn.wk});
    out.push_back({b.attn_id(2), b.attn.wv});
    out.push_back({b.attn_id(3), b.attn.wo});
  }
  return out;
}

}  // namespace umoe
