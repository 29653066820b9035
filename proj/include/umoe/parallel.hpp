// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <map>
#include <string>
#include <thread>
#include <vector>

#include "umoe/training.hpp"

namespace umoe {

enum class DataShard : std::uint8_t { ByModality, RoundRobin };

inline DataShard parse_data_shard(std::string_view s) {
  if (s == "by_modality") return DataShard::ByModality;
  if (s == "round_robin") return DataShard::RoundRobin;
  throw ConfigError("unknown data_shard '" + std::string(s) + "' (by_modality|round_robin)");
}

/// Logical workers: which worker owns each expert and how batches split.
struct WorkerGroup {
  std::size_t workers = 1;
  std::vector<std::size_t> expert_map;  // expert id -> worker id
  DataShard data_shard = DataShard::ByModality;
  bool threads = false;  // run logical workers on real threads

  static WorkerGroup round_robin(std::size_t workers, std::size_t experts, DataShard shard = DataShard::ByModality) {
    if (workers == 0) throw ConfigError("workers must be >= 1");
    WorkerGroup g;
    g.workers = workers;
    g.data_shard = shard;
    for (std::size_t e = 0; e < experts; ++e) g.expert_map.push_back(e % workers);
    return g;
  }

  void validate(std::size_t experts) const {
    if (workers == 0) throw ConfigError("workers must be >= 1");
    if (expert_map.size() != experts)
      throw ConfigError("expert_map covers " + std::to_string(expert_map.size()) + " experts, model has " +
                        std::to_string(experts));
    for (std::size_t e = 0; e < expert_map.size(); ++e)
      if (expert_map[e] >= workers)
        throw ConfigError("expert " + std::to_string(e) + " mapped to worker " + std::to_string(expert_map[e]) +
                          " but only " + std::to_string(workers) + " workers exist");
  }
};

/// Experts held by one worker, with their global ids.
template <class T>
struct ExpertStore {
  std::vector<std::size_t> ids;
  std::vector<ExpertFFN<T>> experts;

  const ExpertFFN<T>* find(std::size_t id) const {
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (ids[i] == id) return &experts[i];
    return nullptr;
  }
};

/// Partitions experts by the group's map; stores alias the original
/// tensors, so each expert lives on exactly one worker.
template <class T>
std::vector<ExpertStore<T>> shard_experts(const std::vector<ExpertFFN<T>>& experts, const WorkerGroup& g) {
  g.validate(experts.size());
  std::vector<ExpertStore<T>> stores(g.workers);
  for (std::size_t e = 0; e < experts.size(); ++e) {
    stores[g.expert_map[e]].ids.push_back(e);
    stores[g.expert_map[e]].experts.push_back(experts[e]);
  }
  return stores;
}

/// Route of one (token, slot) assignment.
struct DispatchEntry {
  std::size_t token;
  std::size_t slot;  // flat token*topk + s
  std::size_t expert;
  std::size_t worker;
};

/// All-to-all plan for one MoE layer. Entries are ordered by (worker,
/// expert, token, slot); `slot_row[s]` gives the returned row holding slot
/// s, restoring token order on combine.
struct DispatchPlan {
  std::vector<DispatchEntry> entries;
  std::vector<std::size_t> slot_row;
  std::vector<std::size_t> load;  // rows processed per worker

  bool restores_order() const {
    std::vector<bool> seen(slot_row.size(), false);
    for (std::size_t s = 0; s < slot_row.size(); ++s) {
      if (slot_row[s] >= entries.size() || entries[slot_row[s]].slot != s || seen[slot_row[s]]) return false;
      seen[slot_row[s]] = true;
    }
    return true;
  }
};

template <class T>
DispatchPlan make_dispatch_plan(const RoutingDecision<T>& d, const WorkerGroup& g) {
  g.validate(d.experts());
  DispatchPlan p;
  p.load.assign(g.workers, 0);
  const auto groups = assignments_by_expert(d);
  for (std::size_t w = 0; w < g.workers; ++w)
    for (std::size_t e = 0; e < d.experts(); ++e) {
      if (g.expert_map[e] != w) continue;
      for (std::size_t i = 0; i < groups[e].token.size(); ++i)
        p.entries.push_back({groups[e].token[i], groups[e].slot[i], e, w});
      p.load[w] += groups[e].token.size();
    }
  p.slot_row.assign(d.tokens() * d.topk, 0);
  for (std::size_t r = 0; r < p.entries.size(); ++r) p.slot_row[p.entries[r].slot] = r;
  return p;
}

/// Per-worker inbox for one layer: token rows grouped by local expert.
struct WorkerMessage {
  std::vector<std::size_t> expert;  // expert of each run
  std::vector<std::vector<std::size_t>> tokens;
};

namespace detail {
inline std::vector<WorkerMessage> build_inboxes(const DispatchPlan& p, std::size_t workers) {
  std::vector<WorkerMessage> inbox(workers);
  for (const auto& e : p.entries) {
    auto& m = inbox[e.worker];
    if (m.expert.empty() || m.expert.back() != e.expert) {
      m.expert.push_back(e.expert);
      m.tokens.emplace_back();
    }
    m.tokens.back().push_back(e.token);
  }
  return inbox;
}

template <class F>
void run_workers(std::size_t n, bool threads, F&& body) {
  if (!threads || n == 1) {
    for (std::size_t w = 0; w < n; ++w) body(w);
    return;
  }
  const bool no_grad = detail::grad_disabled();
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < n; ++w)
    pool.emplace_back([&, w] {
      try {
        detail::grad_disabled() = no_grad;
        body(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  pool.clear();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}
}  // namespace detail

/// Sends each (token, slot) to the worker owning its expert, runs the
/// experts there and combines the returned rows per token in slot order.
/// Equals moe_forward on a single worker.
template <class T>
Tensor<T> dispatch_and_combine(const Tensor<T>& tokens, const std::vector<ExpertFFN<T>>& experts,
                               const RoutingDecision<T>& decision, const LoraSet<T>& lora, const WorkerGroup& g,
                               DispatchPlan* plan_out = nullptr) {
  detail::check_decision(tokens, experts.size(), decision);
  auto plan = make_dispatch_plan(decision, g);
  if (!plan.restores_order()) throw Error("dispatch plan does not restore token order");
  const auto stores = shard_experts(experts, g);
  const auto inbox = detail::build_inboxes(plan, g.workers);
  std::vector<std::vector<Tensor<T>>> replies(g.workers);
  detail::run_workers(g.workers, g.threads, [&](std::size_t w) {
    const auto& msg = inbox[w];
    for (std::size_t r = 0; r < msg.expert.size(); ++r) {
      const auto* e = stores[w].find(msg.expert[r]);
      if (!e) throw Error("worker " + std::to_string(w) + " received tokens for a foreign expert");
      replies[w].push_back(expert_forward(ops::gather_rows(tokens, msg.tokens[r]), *e, lora));
    }
  });
  std::vector<Tensor<T>> rows;
  for (auto& r : replies)
    for (auto& t : r) rows.push_back(t);
  if (plan_out) *plan_out = plan;
  return ops::combine_slots(rows.size() == 1 ? rows[0] : ops::concat_rows(rows), decision.gates, plan.slot_row);
}

template <class T>
MoeExecutor<T> expert_parallel_executor(const WorkerGroup& g) {
  return [g](const Tensor<T>& x, const std::vector<ExpertFFN<T>>& experts, const RoutingDecision<T>& d,
             const LoraSet<T>& lora) { return dispatch_and_combine(x, experts, d, lora, g); };
}

/// Sample indices per worker. by-modality: workers are dealt to the
/// modalities present (in canonical order) round-robin and each modality's
/// samples are dealt across its workers, so shards stay single-modality
/// whenever there are at least as many workers as modalities.
inline std::vector<std::vector<std::size_t>> shard_batch(const std::vector<Sample>& batch, const WorkerGroup& g) {
  std::vector<std::vector<std::size_t>> shards(g.workers);
  if (g.data_shard == DataShard::RoundRobin) {
    for (std::size_t i = 0; i < batch.size(); ++i) shards[i % g.workers].push_back(i);
    return shards;
  }
  std::vector<Modality> present;
  for (auto m : kAllModalities)
    if (std::any_of(batch.begin(), batch.end(), [m](const Sample& s) { return s.modality == m; })) present.push_back(m);
  if (present.empty()) return shards;
  std::map<Modality, std::vector<std::size_t>> owners;
  for (std::size_t w = 0; w < std::max(g.workers, present.size()); ++w)
    owners[present[w % present.size()]].push_back(w % g.workers);
  for (auto& [m, ws] : owners) {
    std::sort(ws.begin(), ws.end());
    ws.erase(std::unique(ws.begin(), ws.end()), ws.end());
  }
  std::map<Modality, std::size_t> next;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const auto& ws = owners[batch[i].modality];
    shards[ws[next[batch[i].modality]++ % ws.size()]].push_back(i);
  }
  return shards;
}

namespace detail {
template <class T>
void copy_values(UniMoeModel<T>& dst, UniMoeModel<T>& src) {
  auto a = dst.params();
  auto b = src.params();
  if (a.size() != b.size()) throw Error("replica parameter layout differs from master");
  for (std::size_t i = 0; i < a.size(); ++i) std::copy(b[i].tensor.data().begin(), b[i].tensor.data().end(), a[i].tensor.data().begin());
}
}  // namespace detail

/// Gradients of the batch-mean loss, computed on per-worker replicas over
/// their shards and reduced into `master` in ascending worker order, then
/// scaled by 1/B. Expert-sharded dispatch is used inside each replica when
/// `expert_parallel` is set.
template <class T>
LossSums data_parallel_step(UniMoeModel<T>& master, const std::vector<Sample>& batch, const WorkerGroup& g,
                            bool expert_parallel = false) {
  const auto shards = shard_batch(batch, g);
  std::vector<UniMoeModel<T>> replicas;
  replicas.reserve(g.workers);
  for (std::size_t w = 0; w < g.workers; ++w) replicas.push_back(master.clone());
  std::vector<LossSums> sums(g.workers);
  WorkerGroup inner = g;
  inner.threads = false;
  const MoeExecutor<T> exec = expert_parallel ? expert_parallel_executor<T>(inner) : MoeExecutor<T>{};
  detail::run_workers(g.workers, g.threads, [&](std::size_t w) {
    replicas[w].zero_grad();
    sums[w] = accumulate_gradients(replicas[w], batch, shards[w], exec);
  });
  master.zero_grad();
  auto mp = master.params();
  for (std::size_t w = 0; w < g.workers; ++w) {
    auto rp = replicas[w].params();
    for (std::size_t i = 0; i < mp.size(); ++i) {
      if (!rp[i].tensor.has_grad() || !mp[i].tensor.requires_grad()) continue;
      auto dst = mp[i].tensor.grad();
      auto src = rp[i].tensor.grad();
      for (std::size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
    }
  }
  scale_gradients(master, T(1) / static_cast<T>(batch.size()));
  LossSums total;
  for (const auto& s : sums) {
    total.ce += s.ce;
    total.aux += s.aux;
    total.samples += s.samples;
  }
  return total;
}

}  // namespace umoe
