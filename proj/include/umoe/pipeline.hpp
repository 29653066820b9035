// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "umoe/optim.hpp"
#include "umoe/parallel.hpp"

namespace umoe {

struct StepRecord {
  int stage = 0;
  std::size_t step = 0;
  double loss = 0;
  double aux_loss = 0;
  double lr = 0;
};

struct StageResult {
  std::vector<StepRecord> log;
  double initial_loss = 0;  // eval-split CE before the first update
  double final_loss = 0;    // eval-split CE after the last update
  std::string frozen_before, frozen_after;
};

struct ParallelSettings {
  WorkerGroup group;
  bool expert_parallel = false;
};

/// Trains the parameters selected by the stage mask on the stage's task.
/// Everything else is frozen; the frozen set's fingerprint is taken before
/// and after.
template <class T>
StageResult train_stage(UniMoeModel<T>& m, const StageSpec& sp, const SyntheticTask& task, const DataSpace& ds,
                        std::uint64_t seed, const ParallelSettings& par = {},
                        const std::function<void(const StepRecord&)>& on_step = {}) {
  const auto mask = stage_mask(sp);
  m.set_trainable(mask);
  StageResult res;
  res.frozen_before = frozen_hash(m, mask);
  const auto eval = eval_split(task, ds);
  res.initial_loss = evaluate(m, eval, false).ce;

  AdamWOptions o;
  o.weight_decay = sp.weight_decay;
  o.horizon = sp.horizon ? sp.horizon : sp.steps;
  AdamW<T> opt(o);
  std::vector<Tensor<T>> trainable;
  for (auto& p : m.params())
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  opt.add_group(trainable, sp.lr);

  const bool multi = par.group.workers > 1 || par.expert_parallel;
  const MoeExecutor<T> exec = par.expert_parallel ? expert_parallel_executor<T>(par.group) : MoeExecutor<T>{};
  for (std::size_t step = 0; step < sp.steps; ++step) {
    auto batch = generate_synthetic_batch(task, ds, sp.batch, mix_seed(seed, step));
    opt.zero_grad();
    LossSums sums = multi ? data_parallel_step(m, batch, par.group, par.expert_parallel) : batch_gradients(m, batch, exec);
    StepRecord r{static_cast<int>(sp.stage), step, sums.mean_total(), sums.mean_aux(), opt.current_lr()};
    if (!std::isfinite(r.loss))
      throw NumericError("stage " + std::to_string(r.stage) + " step " + std::to_string(step) + ": non-finite loss");
    opt.step();
    res.log.push_back(r);
    if (on_step) on_step(r);
  }
  res.final_loss = evaluate(m, eval, false).ce;
  res.frozen_after = frozen_hash(m, mask);
  return res;
}

/// Prefix of the connector parameters serving a modality.
inline std::string connector_prefix(Modality m) {
  switch (m) {
    case Modality::Image:
    case Modality::Video: return "connector.vision.";
    case Modality::Audio: return "connector.audio.";
    case Modality::Speech: return "connector.speech.";
    case Modality::Text: return "";
  }
  return "";
}

/// Result of one stage-2 task: the dense FFN of every block with the task's
/// adapters merged in, plus that task's connector weights.
template <class T>
struct TaskExpert {
  std::string task;
  std::map<std::string, Tensor<T>> ffn;        // "llm.l<i>.ffn.e0.{gate,up,down}"
  std::map<std::string, Tensor<T>> connector;  // trained connector tensors of the task's modalities

  std::vector<CheckpointEntry> to_checkpoint() const {
    std::vector<CheckpointEntry> out;
    for (const auto* m : {&ffn, &connector})
      for (const auto& [n, t] : *m) out.push_back({n, t.shape(), std::vector<float>(t.data().begin(), t.data().end())});
    return out;
  }

  static TaskExpert from_checkpoint(std::string task, const std::vector<CheckpointEntry>& entries) {
    TaskExpert e;
    e.task = std::move(task);
    for (const auto& c : entries) {
      auto t = Tensor<T>::from(c.shape, std::vector<T>(c.data.begin(), c.data.end()));
      (c.name.starts_with("llm.") ? e.ffn : e.connector)[c.name] = t;
    }
    return e;
  }
};

/// Attaches stage-2 adapters to a copy of the dense model.
template <class T>
UniMoeModel<T> prepare_stage2(const UniMoeModel<T>& dense, const StageSpec& sp, std::uint64_t seed) {
  if (dense.is_moe()) throw ConfigError("stage 2 expects a dense model");
  auto m = dense.clone();
  m.lora.clear();
  Rng rng(mix_seed(seed, 2));
  attach_adapters(m.lora, ffn_lora_targets(m), sp.lora_rank, sp.lora_alpha, rng);
  return m;
}

/// Merges a stage-2 model's adapters into its dense FFNs.
template <class T>
TaskExpert<T> extract_task_expert(UniMoeModel<T>& m, const SyntheticTask& task) {
  TaskExpert<T> e;
  e.task = task.name;
  for (auto& b : m.lm.blocks) {
    auto& f = b.experts.front();
    for (auto [id, w] : {std::pair{f.gate_id(), f.gate}, {f.up_id(), f.up}, {f.down_id(), f.down}}) {
      auto it = m.lora.find(id);
      e.ffn[id] = it == m.lora.end() ? w.detach() : merge_adapter(w, it->second).detach();
    }
  }
  std::vector<std::string> prefixes;
  for (const auto& c : task.components)
    if (auto p = connector_prefix(c.modality); !p.empty()) prefixes.push_back(p);
  m.visit([&](const std::string& n, Tensor<T>& t, ParamGroup g) {
    if (g == ParamGroup::Encoder) return;
    for (const auto& p : prefixes)
      if (n.starts_with(p)) e.connector[n] = t.detach();
  });
  return e;
}

/// Where each expert of the stage-3 model comes from: "base", "random" or
/// "stage2:<task>".
struct ExpertProvenance {
  std::vector<std::string> sources;

  static ExpertProvenance pure(std::size_t experts) { return {std::vector<std::string>(experts, "base")}; }
};

inline ExpertProvenance resolve_provenance(const StageSpec& sp, std::size_t experts) {
  if (sp.expert_init == ExpertInit::Pure) return ExpertProvenance::pure(experts);
  if (sp.expert_sources.size() != experts)
    throw ConfigError("stage3 expert_sources lists " + std::to_string(sp.expert_sources.size()) +
                      " sources but the model has " + std::to_string(experts) + " experts");
  for (const auto& s : sp.expert_sources)
    if (s != "base" && s != "random" && !s.starts_with("stage2:"))
      throw ConfigError("unknown expert source '" + s + "' (base|random|stage2:<task>)");
  return {sp.expert_sources};
}

/// Builds the stage-3 model from the dense stage-1 model: MoE blocks per
/// the layout with experts filled from their sources, connectors updated
/// from the stage-2 tasks in source order, and fresh stage-3 adapters.
/// Blocks outside the layout keep the dense FFN.
template <class T>
UniMoeModel<T> init_stage3(const UniMoeModel<T>& dense, const StageSpec& sp, const ExpertProvenance& prov,
                           const std::map<std::string, TaskExpert<T>>& experts, std::uint64_t seed) {
  if (dense.is_moe()) throw ConfigError("stage 3 starts from the dense model");
  if (prov.sources.size() != dense.cfg.experts)
    throw ConfigError("expert count mismatch: " + std::to_string(prov.sources.size()) + " sources for " +
                      std::to_string(dense.cfg.experts) + " experts");
  auto m = dense.clone();
  m.lora.clear();
  auto find_task = [&](const std::string& tag) -> const TaskExpert<T>& {
    auto it = experts.find(tag.substr(7));
    if (it == experts.end()) throw ConfigError("missing stage-2 expert for source '" + tag + "'");
    return it->second;
  };
  std::vector<std::string> applied;
  for (const auto& tag : prov.sources) {
    if (!tag.starts_with("stage2:") || std::find(applied.begin(), applied.end(), tag) != applied.end()) continue;
    applied.push_back(tag);
    const auto& te = find_task(tag);
    m.visit([&](const std::string& n, Tensor<T>& t, ParamGroup) {
      auto it = te.connector.find(n);
      if (it == te.connector.end()) return;
      if (it->second.shape() != t.shape()) throw FormatError("connector shape mismatch for " + n);
      std::copy(it->second.data().begin(), it->second.data().end(), t.data().begin());
    });
  }
  m.convert_to_moe(
      [&](std::size_t b, std::size_t j) {
        const auto& tag = prov.sources[j];
        const auto& base = dense.lm.blocks[b].experts.front();
        if (tag == "base") return base.copy_as("");
        if (tag == "random") {
          Rng rng(mix_seed(seed, 1000 + b * 64 + j));
          return ExpertFFN<T>::make("", dense.cfg.d_model, dense.cfg.ffn_dim, dense.cfg.init_std, rng);
        }
        const auto& te = find_task(tag);
        auto get = [&](const std::string& id) {
          auto it = te.ffn.find(id);
          if (it == te.ffn.end()) throw FormatError("stage-2 expert '" + te.task + "' lacks " + id);
          return it->second.clone();
        };
        ExpertFFN<T> e{get(base.gate_id()), get(base.up_id()), get(base.down_id()), ""};
        for (auto* w : {&e.gate, &e.up, &e.down}) w->set_requires_grad(true);
        return e;
      },
      mix_seed(seed, 3));
  Rng rng(mix_seed(seed, 4));
  attach_adapters(m.lora, ffn_lora_targets(m), sp.lora_rank, sp.lora_alpha, rng);
  if (sp.lora_attention) attach_adapters(m.lora, attention_lora_targets(m), sp.lora_rank, sp.lora_alpha, rng);
  return m;
}

/// Rebuilds a model from a checkpoint: MoE blocks when router weights are
/// present, adapters as named in the file.
template <class T>
UniMoeModel<T> model_from_checkpoint(const ModelConfig& cfg, const ConnectorConfig& cc,
                                     const std::vector<CheckpointEntry>& entries, double lora_alpha) {
  auto m = UniMoeModel<T>::make_dense(cfg, cc, 0);
  const bool moe = std::any_of(entries.begin(), entries.end(),
                               [](const CheckpointEntry& e) { return e.name.ends_with(".router.weight"); });
  if (moe) {
    m.convert_to_moe([&](std::size_t b, std::size_t) { return m.lm.blocks[b].experts.front().copy_as(""); }, 0);
  }
  m.lora_alpha_hint = lora_alpha;
  m.load_checkpoint_entries(entries);
  return m;
}

}  // namespace umoe
