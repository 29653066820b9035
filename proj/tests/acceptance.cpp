// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
// exits nonzero if any fails.

#include <sys/wait.h>

#include <Eigen/Dense>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>

#include <nlohmann/json.hpp>

#include "test_util.hpp"
#include "umoe/analytics.hpp"
#include "umoe/config.hpp"
#include "umoe/gradcheck.hpp"
#include "umoe/optim.hpp"
#include "umoe/pipeline.hpp"

using namespace umoe;
using namespace umoe::testing;
namespace fs = std::filesystem;
using nlohmann::json;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::ostringstream detail;

  void check(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::pair<int, std::string> run_cli(const std::string& args) {
  const std::string cmd = "UMOE_LOG=error '" UMOE_CLI "' " + args;
  FILE* p = popen(cmd.c_str(), "r");
  std::string out;
  char buf[4096];
  while (auto k = std::fread(buf, 1, sizeof buf, p)) out.append(buf, k);
  const int status = pclose(p);
  return {WIFEXITED(status) ? WEXITSTATUS(status) : -1, out};
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p);
  return {std::istreambuf_iterator<char>(is), {}};
}

ModelConfig small_cfg(std::size_t experts, std::size_t topk, MoeLayout layout = MoeLayout::All) {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 8;
  c.ffn_dim = 12;
  c.heads = 2;
  c.vocab = 16;
  c.max_len = 16;
  c.experts = experts;
  c.topk = topk;
  c.moe_layout = layout;
  c.init_std = 0.3;
  return c;
}

ConnectorConfig small_conn() {
  ConnectorConfig c;
  c.raw_dim = 4;
  c.enc_dim = 8;
  c.num_queries = 2;
  c.qformer_heads = 2;
  return c;
}

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.layers = 2;
  c.d_model = 16;
  c.ffn_dim = 24;
  c.heads = 2;
  c.vocab = 256;
  c.max_len = 32;
  c.experts = 4;
  c.topk = 2;
  c.moe_layout = MoeLayout::Interval;
  return c;
}

ConnectorConfig tiny_conn() {
  ConnectorConfig c;
  c.raw_dim = 16;
  c.enc_dim = 8;
  c.num_queries = 2;
  c.qformer_heads = 2;
  return c;
}

// ------------------------------------------------------------------- 1

Outcome table2() {
  Outcome o;
  struct Row {
    const char* name;
    const char* activated;
    const char* total;
  };
  // reported Activated / Total columns
  const Row rows[] = {
      {"OpenChat-7B", "6.7B", "6.7B"},           {"MoE-LLaVA-2.7B×4-Top2", "3.6B", "5.3B"},
      {"MoE-LLaVA-2.7B×4-Top2†", "4.5B", "7.8B"}, {"MoE-LLaVA-7B×4-Top2", "9.6B", "15.2B"},
      {"MoE-LLaVA-7B×4-Top2†", "12.4B", "23.7B"}, {"Vicuna-7B", "6.7B", "6.7B"},
      {"Uni-MoE-7B×4-Top2", "8.9B", "13.2B"},     {"Uni-MoE-7B×4-Top2†", "11.1B", "19.7B"},
      {"Uni-MoE-7B×8-Top2", "8.9B", "21.9B"},     {"Uni-MoE-7B×8-Top2†", "11.1B", "37.0B"},
  };
  const auto t0 = Clock::now();
  auto [code, out] = run_cli("count-params --config '" UMOE_SOURCE_DIR "/configs/table2.cfg'");
  const double secs = seconds_since(t0);
  o.check(code == 0, "count-params exit code");
  std::istringstream is(out);
  std::string line;
  std::getline(is, line);
  std::size_t matched = 0, i = 0;
  while (std::getline(is, line) && i < std::size(rows)) {
    std::istringstream ls(line);
    std::string name, experts, topk, layers, act, tot;
    ls >> name >> experts >> topk >> layers >> act >> tot;
    const bool ok = name == rows[i].name && act == rows[i].activated && tot == rows[i].total;
    o.check(ok, std::string(rows[i].name) + " got " + act + "/" + tot);
    matched += ok;
    ++i;
  }
  o.check(matched == std::size(rows), "row count");
  o.check(secs < 1.0, "runtime");
  o.detail << matched << "/10 rows exact after 0.1B rounding, " << secs << " s";
  return o;
}

// ------------------------------------------------------------------- 2

Outcome gradients() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(11);
  const GradCheckOptions opt{.eps = 1e-6, .max_coords = 400};
  auto readout = [](const TD& y) {
    Rng r(99);
    return ops::sum(ops::mul(y, rand_d(y.shape(), r)));
  };
  auto a = rand_d({6, 5}, rng, 1.0, true), b = rand_d({5, 7}, rng, 1.0, true), bt = rand_d({7, 5}, rng, 1.0, true);
  auto g = rand_d({5}, rng, 1.0, true), bias = rand_d({5}, rng, 1.0, true);
  auto sq = rand_d({6, 6}, rng, 1.0, true);
  auto att = AttentionParams<double>::make(8, 8, 0.5, rng);
  auto xa = rand_d({5, 8}, rng, 1.0, true);
  auto wg = rand_d({5, 9}, rng, 0.5, true), wu = rand_d({5, 9}, rng, 0.5, true), wd = rand_d({9, 5}, rng, 0.5, true);
  auto logits = rand_d({6, 5}, rng, 2.0, true);
  auto gates = rand_d({6, 2}, rng, 1.0, true);
  auto qf = QFormerParams<double>::make(3, 8, 6, 10, 2, rng, 0.3);
  auto enc = rand_d({4, 6}, rng, 1.0, true);
  auto w0 = rand_d({5, 4}, rng, 1.0, true);
  auto ad = LoraAdapter<double>::make("w", 5, 4, 2, 16.0, rng);
  ad.b = rand_d({4, 2}, rng, 0.5, true);
  RouterParams<double> router{rand_d({5, 4}, rng, 1.0, true)};
  std::vector<TD> qf_params{enc, qf.queries};
  for (auto& L : qf.layers)
    for (auto* t : {&L.self_attn.wq, &L.cross_attn.wv, &L.mlp_in, &L.ln_cross.gain}) qf_params.push_back(*t);

  struct Case {
    const char* name;
    std::function<TD()> f;
    std::vector<TD> params;
  };
  std::vector<Case> cases = {
      {"matmul", [&] { return readout(ops::matmul(a, b)); }, {a, b}},
      {"matmul_nt", [&] { return readout(ops::matmul_nt(a, bt)); }, {a, bt}},
      {"add_mul_scale", [&] { return readout(ops::scale(ops::mul(ops::add(a, a), a), 0.7)); }, {a}},
      {"bias", [&] { return readout(ops::add_bias(a, bias)); }, {a, bias}},
      {"silu", [&] { return readout(ops::silu(a)); }, {a}},
      {"softmax", [&] { return readout(ops::softmax(a, 1)); }, {a}},
      {"softmax_cols", [&] { return readout(ops::softmax(a, 0)); }, {a}},
      {"layer_norm", [&] { return readout(ops::layer_norm(a, g, bias)); }, {a, g, bias}},
      {"causal_softmax", [&] { return readout(ops::softmax(ops::causal_mask(sq))); }, {sq}},
      {"slice_concat", [&] { return readout(ops::concat_cols<double>({ops::slice_cols(a, 3, 5), ops::slice_cols(a, 0, 3)})); }, {a}},
      {"rows", [&] { return readout(ops::concat_rows<double>({ops::slice_rows(a, 2, 6), ops::gather_rows(a, {1, 1})})); }, {a}},
      {"take_combine",
       [&] {
         return readout(ops::combine_slots(a, ops::mul(gates, ops::take_along_rows(a, {0, 1, 1, 2, 3, 0, 4, 2, 0, 1, 2, 3}, 2)),
                                           {0, 1, 2, 3, 4, 5, 0, 2, 1, 3, 5, 4}));
       },
       {a, gates}},
      {"mean_rows", [&] { return ops::sum(ops::mul(ops::mean_rows(a), ops::mean_rows(a))); }, {a}},
      {"mean_of", [&] { return readout(ops::mean_of<double>({a, ops::scale(a, 2.0), ops::silu(a)})); }, {a}},
      {"attention", [&] { return readout(multi_head_attention(xa, xa, att, 2, true)); }, {xa, att.wq, att.wk, att.wv, att.wo}},
      {"gated_ffn", [&] { return readout(gated_ffn(ops::slice_rows(a, 0, 6), wg, wu, wd)); }, {a, wg, wu, wd}},
      {"cross_entropy", [&] { return ops::cross_entropy(logits, {0, 4, 2, 2, 1, 3}, {false, false, true, false, false, false}); }, {logits}},
      {"lora", [&] { return readout(lora_forward(a, w0, ad)); }, {a, w0, ad.a, ad.b}},
      {"router_aux", [&] { return aux_balance_loss(route(a, router, 2), 0.3); }, {router.weight}},
  };
  double worst = 0;
  std::string worst_name;
  for (auto& c : cases) {
    auto rep = finite_diff_check<double>(c.f, c.params, opt);
    if (rep.max_rel_error > worst) worst = rep.max_rel_error, worst_name = c.name;
    o.check(rep.max_rel_error <= 1e-5, c.name);
  }
  // Q-Former is a composite of the ops above; reported, not gated
  auto qf_loss = [&] { return readout(qformer_forward(enc, qf, Modality::Audio).tokens); };
  const double qf6 = finite_diff_check<double>(qf_loss, qf_params, opt).max_rel_error;
  const double qf5 = finite_diff_check<double>(qf_loss, qf_params, {.eps = 1e-5, .max_coords = 400}).max_rel_error;

  // full 2-block MoE language-model loss
  auto cfg = small_cfg(4, 2);
  auto m = UniMoeModel<double>::make_dense(cfg, small_conn(), 3);
  m.convert_to_moe(
      [&](std::size_t bl, std::size_t e) {
        Rng r(2000 + bl * 31 + e);
        return ExpertFFN<double>::make("", cfg.d_model, cfg.ffn_dim, 0.3, r);
      },
      4);
  cfg.aux_loss_coeff = 0.01;
  m.cfg = cfg;
  auto x = rand_d({5, 8}, rng);
  std::vector<std::size_t> targets{1, 4, 7, 2, 9};
  std::vector<TD> params;
  for (auto& p : m.params())
    if (p.name.starts_with("llm.")) params.push_back(p.tensor);
  auto rep = finite_diff_check<double>(
      [&] {
        auto out = forward_lm(x, m);
        return ops::add(ops::cross_entropy(out.logits, targets, {}), out.aux_loss);
      },
      params, opt);
  o.check(rep.max_rel_error <= 1e-5, "2-block MoE model");
  const double secs = seconds_since(t0);
  o.check(secs < 60, "runtime");
  o.detail << cases.size() << " ops worst rel err " << worst << " (" << worst_name << "), 2-block MoE " << rep.max_rel_error
           << ", qformer composite " << qf6 << " (eps 1e-6) / " << qf5 << " (eps 1e-5), " << secs << " s";
  return o;
}

// ------------------------------------------------------------------- 3

Outcome routing_oracle() {
  Outcome o;
  const auto t0 = Clock::now();
  Rng rng(3);
  std::size_t rows = 0, ties = 0;
  for (std::size_t m : {2, 4, 8})
    for (std::size_t k : {1, 2})
      for (bool dup : {false, true}) {
      const std::size_t n = 5000, d = 6;
      auto w = rand_d({d, m}, rng);
      // duplicated columns produce exact probability ties
      if (dup)
        for (std::size_t j = 0; j < d; ++j) w.at(j, m - 1) = w.at(j, 0);
      RouterParams<double> r{w};
      auto x = rand_d({n, d}, rng);
      auto dec = route(x, r, k);
      // brute force: full softmax per row, stable sort descending (lower index wins ties)
      bool ok = true;
      for (std::size_t t = 0; t < n && ok; ++t) {
        std::vector<double> z(m);
        double mx = -1e300;
        for (std::size_t e = 0; e < m; ++e) {
          double acc = 0;
          for (std::size_t j = 0; j < d; ++j) acc += x.at(t, j) * w.at(j, e);
          z[e] = acc;
          mx = std::max(mx, acc);
        }
        double zs = 0;
        for (auto v : z) zs += std::exp(v - mx);
        std::vector<double> p(m);
        for (std::size_t e = 0; e < m; ++e) p[e] = std::exp(z[e] - mx) / zs;
        std::vector<std::size_t> all(m);
        std::iota(all.begin(), all.end(), 0);
        std::stable_sort(all.begin(), all.end(), [&](auto a, auto b) { return p[a] > p[b]; });
        for (std::size_t s = 0; s < k; ++s) {
          ok &= dec.expert(t, s) == all[s];
          ok &= dec.gates.at(t, s) == dec.probs.at(t, all[s]);
        }
        // probabilities agree with the independent softmax
        for (std::size_t e = 0; e < m; ++e) ok &= std::abs(dec.probs.at(t, e) - p[e]) <= 1e-12;
        ties += p[0] == p[m - 1];
        ++rows;
      }
      o.check(ok, "M=" + std::to_string(m) + " k=" + std::to_string(k) + (dup ? " tied" : ""));
    }
  const double secs = seconds_since(t0);
  o.check(secs < 5, "runtime");
  o.detail << rows << " rows over M{2,4,8} x k{1,2}, " << ties << " exact ties, " << secs << " s";
  return o;
}

// ------------------------------------------------------------------- 4

Outcome dense_degeneration() {
  Outcome o;
  auto cfg = small_cfg(1, 1);
  auto dense = UniMoeModel<double>::make_dense(cfg, small_conn(), 4);
  auto moe = dense.clone();
  moe.convert_to_moe([&](std::size_t b, std::size_t) { return dense.lm.blocks[b].experts[0].copy_as(""); }, 5);
  o.check(moe.is_moe(), "model has MoE layers");
  Rng rng(15);
  std::size_t equal = 0;
  for (int i = 0; i < 100; ++i) {
    auto x = rand_d({1 + std::size_t(i) % 16, 8}, rng);
    equal += bitwise_equal(forward_lm(x, dense).logits, forward_lm(x, moe).logits);
  }
  o.check(equal == 100, "bitwise logits");
  o.detail << equal << "/100 inputs bitwise equal";
  return o;
}

// ------------------------------------------------------------------- 5

Outcome lora_contracts() {
  Outcome o;
  // fresh adapters: logits bitwise unchanged
  auto cfg = small_cfg(4, 2);
  auto m = UniMoeModel<double>::make_dense(cfg, small_conn(), 1);
  m.convert_to_moe([&](std::size_t b, std::size_t) { return m.lm.blocks[b].experts[0].copy_as(""); }, 2);
  Rng rng(9);
  auto x = rand_d({5, 8}, rng);
  auto before = forward_lm(x, m).logits;
  attach_adapters(m.lora, ffn_lora_targets(m), 8, 16.0, rng);
  attach_adapters(m.lora, attention_lora_targets(m), 8, 16.0, rng);
  const bool noop = bitwise_equal(forward_lm(x, m).logits, before);
  o.check(noop, "fresh adapter no-op");

  // merge vs live, single precision
  double worst = 0;
  for (int trial = 0; trial < 10; ++trial) {
    auto w0 = TF::randn({16, 12}, 0.1, rng);
    auto ad = LoraAdapter<float>::make("w", 16, 12, 4, 16.0, rng);
    ad.b = TF::randn({12, 4}, 0.01, rng);
    auto merged = merge_adapter(w0, ad);
    for (int i = 0; i < 10; ++i) {
      auto xi = TF::randn({1, 16}, 1.0, rng);
      worst = std::max(worst, max_abs_diff(ops::matmul(xi, merged), lora_forward(xi, w0, ad)));
    }
  }
  o.check(worst <= 1e-6, "merge vs live");

  // base weights through 100 optimizer steps
  auto mf = UniMoeModel<float>::make_dense(cfg, small_conn(), 3);
  attach_adapters(mf.lora, ffn_lora_targets(mf), 4, 16.0, rng);
  attach_adapters(mf.lora, attention_lora_targets(mf), 4, 16.0, rng);
  mf.set_trainable([](const std::string&, ParamGroup g) { return g == ParamGroup::Lora; });
  std::vector<std::pair<std::string, std::vector<float>>> frozen;
  std::vector<TF> trainable;
  for (auto& p : mf.params()) {
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
    else frozen.emplace_back(p.name, std::vector<float>(p.tensor.data().begin(), p.tensor.data().end()));
  }
  AdamW<float> opt({0.9, 0.999, 1e-8, 0.01, 0});
  opt.add_group(trainable, 1e-2);
  auto xf = TF::randn({6, 8}, 1.0, rng);
  std::vector<std::size_t> tg{1, 2, 3, 4, 5, 6};
  for (int s = 0; s < 100; ++s) {
    opt.zero_grad();
    ops::cross_entropy(forward_lm(xf, mf).logits, tg, {}).backward();
    opt.step();
  }
  std::size_t stable = 0, i = 0;
  for (auto& p : mf.params()) {
    if (p.tensor.requires_grad()) continue;
    stable += std::equal(frozen[i].second.begin(), frozen[i].second.end(), p.tensor.data().begin());
    ++i;
  }
  o.check(stable == frozen.size(), "frozen base weights");
  o.detail << "fresh no-op " << (noop ? "bitwise" : "differs") << ", merge-vs-live max " << worst << ", " << stable << "/"
           << frozen.size() << " frozen tensors bitwise after 100 steps";
  return o;
}

// ------------------------------------------------------------------- 6

template <class T>
std::vector<std::vector<T>> grads_of(UniMoeModel<T>& m) {
  std::vector<std::vector<T>> out;
  for (auto& p : m.params())
    if (p.tensor.requires_grad()) {
      auto g = p.tensor.grad();
      out.emplace_back(g.begin(), g.end());
    }
  return out;
}

template <class T>
double grad_diff(const std::vector<std::vector<T>>& a, const std::vector<std::vector<T>>& b) {
  double d = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) d = std::max(d, std::abs(double(a[i][j]) - double(b[i][j])));
  return d;
}

Outcome parallel_equivalence() {
  Outcome o;
  const auto t0 = Clock::now();
  auto dense = UniMoeModel<float>::make_dense(tiny_cfg(), tiny_conn(), 21);
  auto m = init_stage3(dense, default_stage_spec(Stage::Moe), ExpertProvenance{{"base", "random", "random", "random"}}, {},
                       22);
  m.set_trainable(stage_mask(default_stage_spec(Stage::Moe)));
  DataSpace ds;
  auto batch = generate_synthetic_batch(builtin_task("mixed_qa"), ds, 8, 23);

  // reference: single process
  std::vector<Tensor<float>> ref_logits;
  {
    NoGradGuard ng;
    for (const auto& s : batch) ref_logits.push_back(sample_forward(m, s).out.logits);
  }
  m.zero_grad();
  batch_gradients(m, batch);
  const auto ref = grads_of(m);

  double fwd = 0, ep = 0, dp = 0;
  for (std::size_t w : {2, 4}) {
    auto g = WorkerGroup::round_robin(w, 4);
    const auto exec = expert_parallel_executor<float>(g);
    {
      NoGradGuard ng;
      for (std::size_t i = 0; i < batch.size(); ++i)
        fwd = std::max(fwd, max_abs_diff(sample_forward(m, batch[i], exec).out.logits, ref_logits[i]));
    }
    m.zero_grad();
    batch_gradients(m, batch, exec);
    ep = std::max(ep, grad_diff(grads_of(m), ref));
    for (bool sharded : {false, true}) {
      data_parallel_step(m, batch, g, sharded);
      dp = std::max(dp, grad_diff(grads_of(m), ref));
    }
  }
  o.check(fwd <= 1e-6, "expert-sharded forward");
  o.check(ep <= 1e-6, "expert-sharded backward");
  o.check(dp <= 1e-6, "by-modality data parallel");

  // seed determinism of threaded multi-worker training
  auto train_hash = [&](std::size_t w) {
    auto mm = init_stage3(dense, default_stage_spec(Stage::Moe), ExpertProvenance{{"base", "random", "random", "random"}},
                          {}, 22);
    auto sp = default_stage_spec(Stage::Moe);
    sp.steps = 3;
    sp.batch = 8;
    sp.lr = 3e-3;
    auto g = WorkerGroup::round_robin(w, 4);
    g.threads = true;
    train_stage(mm, sp, builtin_task("mixed_qa"), ds, 7, ParallelSettings{g, true});
    return checkpoint_hash(mm.to_checkpoint());
  };
  bool det = true;
  for (std::size_t w : {2, 4}) det &= train_hash(w) == train_hash(w);
  o.check(det, "seed determinism");
  const double secs = seconds_since(t0);
  o.check(secs < 60, "runtime");
  o.detail << "2/4 workers: forward max " << fwd << ", expert-sharded grad max " << ep << ", data-parallel grad max " << dp
           << ", repeat runs " << (det ? "bitwise" : "differ") << ", " << secs << " s";
  return o;
}

// ------------------------------------------------------------------- 7

// Frozen (per the stage mask) parameters of `after` that also exist in
// `before` under the same name must be bitwise unchanged.
std::size_t frozen_mismatches(UniMoeModel<float>& before, UniMoeModel<float>& after, const StageSpec& sp, bool skip_ffn) {
  const auto mask = stage_mask(sp);
  std::map<std::string, Tensor<float>> prior;
  for (auto& p : before.params()) prior.emplace(p.name, p.tensor);
  std::size_t bad = 0;
  for (auto& p : after.params()) {
    if (mask(p.name, p.group) || (skip_ffn && p.group == ParamGroup::Ffn)) continue;
    auto it = prior.find(p.name);
    if (it != prior.end() && !bitwise_equal(it->second, p.tensor)) ++bad;
  }
  return bad;
}

Outcome pipeline() {
  Outcome o;
  const fs::path cfg = fs::path(UMOE_SOURCE_DIR) / "configs" / "toy.cfg";
  const fs::path out = fs::temp_directory_path() / "umoe_acceptance_pipeline";
  fs::remove_all(out);
  const auto t0 = Clock::now();
  for (int s = 0; s < 4; ++s) {
    auto [code, text] =
        run_cli("train --stage " + std::to_string(s) + " --seed 0 --config '" + cfg.string() + "' --out '" + out.string() + "'");
    o.check(code == 0, "stage " + std::to_string(s) + " exit code");
    if (code != 0) return o;
  }
  const double secs = seconds_since(t0);
  const auto rc = load_config(cfg);

  std::vector<fs::path> dirs{out / "stage0", out / "stage1"};
  for (const auto& [id, sp] : rc.stage2) dirs.push_back(out / "stage2" / id);
  dirs.push_back(out / "stage3");
  double worst = 0;
  bool hashes = true;
  for (const auto& d : dirs) {
    auto j = json::parse(slurp(d / "manifest.json"));
    const double ratio = j["final_loss"].get<double>() / j["initial_loss"].get<double>();
    worst = std::max(worst, ratio);
    o.check(ratio < 0.5, fs::relative(d, out).string() + " loss ratio " + std::to_string(ratio));
    hashes &= j["frozen_hash_before"] == j["frozen_hash_after"];
    o.detail << fs::relative(d, out).string() << " " << ratio << "; ";
  }
  o.check(hashes, "frozen hashes");

  // frozen parameters compared across checkpoints
  const auto& mc = rc.model().cfg;
  auto m0 = model_from_checkpoint<float>(mc, rc.connector, load_checkpoint(out / "stage0" / "model.ckpt"), 16.0);
  auto m1 = model_from_checkpoint<float>(mc, rc.connector, load_checkpoint(out / "stage1" / "model.ckpt"), 16.0);
  auto m3 = model_from_checkpoint<float>(mc, rc.connector, load_checkpoint(out / "stage3" / "model.ckpt"),
                                         rc.stage3.lora_alpha);
  const auto bad = frozen_mismatches(m0, m1, rc.stage1, false) + frozen_mismatches(m1, m3, rc.stage3, true);
  o.check(bad == 0, std::to_string(bad) + " frozen tensors changed across checkpoints");

  // step-0 pure-expert MoE versus the dense model it was built from
  auto sp = rc.stage3;
  sp.expert_init = ExpertInit::Pure;
  auto pure = init_stage3(m1, sp, ExpertProvenance::pure(mc.experts), {}, 0);
  auto samples = generate_synthetic_batch(builtin_task("mixed_qa"), rc.data, 20, 5);
  std::size_t equal = 0;
  double diff = 0;
  {
    NoGradGuard ng;
    for (const auto& s : samples) {
      auto a = sample_forward(m1, s).out.logits, b = sample_forward(pure, s).out.logits;
      equal += bitwise_equal(a, b);
      diff = std::max(diff, max_abs_diff(a, b));
    }
  }
  o.check(equal == samples.size(), "step-0 pure MoE == dense (max |diff| " + std::to_string(diff) + ")");
  o.check(secs < 600, "runtime");
  o.detail << "worst ratio " << worst << ", pure==dense on " << equal << "/" << samples.size() << " samples, " << secs
           << " s";
  return o;
}

// ------------------------------------------------------------------- 8

Outcome aux_loss() {
  Outcome o;
  const double alpha = 0.01;
  // uniform: every expert chosen equally, probabilities uniform
  double uniform_worst = 0;
  for (std::size_t m : {2, 4, 8})
    for (std::size_t k : {1, 2}) {
      RoutingDecision<double> d;
      d.topk = k;
      const std::size_t t = m;
      d.probs = TD::full({t, m}, 1.0 / double(m));
      d.gates = TD::full({t, k}, 1.0 / double(m));
      for (std::size_t i = 0; i < t; ++i)
        for (std::size_t s = 0; s < k; ++s) d.indices.push_back((i + s) % m);
      uniform_worst = std::max(uniform_worst, std::abs(aux_balance_loss(d, alpha).item() - alpha));
    }
  o.check(uniform_worst == 0.0, "uniform gives exactly alpha");

  // lower bound over random decisions
  Rng rng(8);
  double min_ratio = 1e300;
  std::size_t below = 0;
  for (int i = 0; i < 10000; ++i) {
    const std::size_t m = std::size_t{2} << (i % 3), k = 1 + (i / 3) % 2, t = 1 + rng() % 16;
    RouterParams<double> r{rand_d({4, m}, rng, 2.0)};
    auto d = route(rand_d({t, 4}, rng), r, k);
    const double v = aux_balance_loss(d, alpha).item();
    min_ratio = std::min(min_ratio, v / alpha);
    below += v < alpha - 1e-9;
  }
  o.check(below == 0, std::to_string(below) + "/10000 values below alpha");

  RouterParams<double> r{rand_d({6, 4}, rng, 1.0, true)};
  auto x = rand_d({7, 6}, rng);
  auto rep = finite_diff_check<double>([&] { return aux_balance_loss(route(x, r, 2), 0.3); }, {r.weight});
  o.check(rep.max_rel_error <= 1e-5, "aux gradient");
  o.detail << "uniform |v-alpha| " << uniform_worst << ", min v/alpha " << min_ratio << ", gradcheck " << rep.max_rel_error;
  return o;
}

// ------------------------------------------------------------------- 9

Outcome analytics() {
  Outcome o;
  Rng rng(9);
  double row_err = 0, worst_cos = 1;
  std::size_t matrices = 0;
  bool lossless = true;
  for (int trial = 0; trial < 10; ++trial) {
    // 100 tokens, 6 MoE layers, 8 experts -> 100 x 48 pathway matrix
    RoutingLog log{8, 2, {}};
    for (std::size_t t = 0; t < 100; ++t) {
      const auto mod = kAllModalities[rng() % 5];
      for (std::size_t l = 0; l < 6; ++l) {
        // modality-dependent preference so the spectrum has structure
        std::vector<std::size_t> all(8);
        std::iota(all.begin(), all.end(), 0);
        std::shuffle(all.begin(), all.end(), rng);
        if (rng() % 3) all[0] = (static_cast<std::size_t>(mod) + l) % 8, all[1] = all[0] == all[1] ? (all[0] + 1) % 8 : all[1];
        log.add({2 * l + 1, t, mod, {all[0], all[1]}, {0.5, 0.3}});
      }
    }
    const auto a = analyze_log(log, 10);
    for (const auto& r : a.loads) row_err = std::max(row_err, std::abs(std::accumulate(r.fraction.begin(), r.fraction.end(), 0.0) - 1));
    for (const auto& r : a.prefs)
      if (!r.empty) row_err = std::max(row_err, std::abs(std::accumulate(r.fraction.begin(), r.fraction.end(), 0.0) - 1));

    const auto p = pathway_matrix(log);
    Eigen::MatrixXd x(long(p.rows()), long(p.cols()));
    for (std::size_t i = 0; i < p.rows(); ++i)
      for (std::size_t j = 0; j < p.cols(); ++j) x(long(i), long(j)) = p.x[i * p.cols() + j];
    Eigen::MatrixXd c = x.rowwise() - x.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(c.transpose() * c);
    const auto pc = first_principal_component(p.x, p.rows(), p.cols());
    double dot = 0;
    for (std::size_t j = 0; j < p.cols(); ++j) dot += pc[j] * es.eigenvectors()(long(j), long(p.cols()) - 1);
    worst_cos = std::min(worst_cos, std::abs(dot));
    ++matrices;

    const auto dir = fs::temp_directory_path() / "umoe_acceptance_analytics";
    fs::remove_all(dir);
    export_analytics(a, dir, "acceptance", "0");
    const auto loads = read_loads_csv(dir / "loads.csv");
    const auto prefs = read_prefs_csv(dir / "prefs.csv");
    const auto pws = read_pathways_csv(dir / "pathways.csv");
    lossless &= loads.size() == a.loads.size() && prefs.size() == a.prefs.size();
    for (std::size_t i = 0; lossless && i < loads.size(); ++i)
      lossless &= loads[i].layer == a.loads[i].layer && loads[i].fraction == a.loads[i].fraction;
    for (std::size_t i = 0; lossless && i < prefs.size(); ++i)
      lossless &= prefs[i].layer == a.prefs[i].layer && prefs[i].expert == a.prefs[i].expert &&
                  prefs[i].empty == a.prefs[i].empty && prefs[i].fraction == a.prefs[i].fraction;
    std::size_t k = 0;
    for (const auto& pw : a.pathways)
      for (std::size_t l = 0; l < pw.experts.size(); ++l, ++k)
        lossless &= k < pws.size() && pws[k].rank == pw.rank && pws[k].token == pw.token &&
                    pws[k].layer == a.pathway_layers[l] && pws[k].expert == pw.experts[l] && pws[k].is_top2 == pw.is_top2;
    lossless &= k == pws.size();
  }
  o.check(row_err <= 1e-9, "row sums");
  o.check(worst_cos >= 1 - 1e-6, "PC1 cosine");
  o.check(lossless, "CSV round trip");
  o.detail << "row sum err " << row_err << ", min PC1 cosine " << worst_cos << " over " << matrices
           << " 100x48 matrices, round trip " << (lossless ? "lossless" : "lossy");
  return o;
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> all = {
      {1, "parameter table", table2},        {2, "gradient suite", gradients},
      {3, "routing oracle", routing_oracle}, {4, "dense degeneration", dense_degeneration},
      {5, "lora contracts", lora_contracts}, {6, "parallel equivalence", parallel_equivalence},
      {7, "staged pipeline", pipeline},      {8, "aux loss", aux_loss},
      {9, "analytics invariants", analytics},
  };
  int failed = 0;
  for (const auto& c : all) {
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o.pass = false;
      o.detail << " exception: " << e.what();
    }
    std::cout << "criterion " << c.id << " (" << c.name << "): " << (o.pass ? "PASS" : "FAIL") << " - " << o.detail.str()
              << std::endl;
    failed += !o.pass;
  }
  std::cout << (all.size() - std::size_t(failed)) << "/" << all.size() << " criteria passed" << std::endl;
  return failed ? 1 : 0;
}
