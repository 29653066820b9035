// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0
//
// umoe: parameter accounting, staged training, evaluation and routing
// analytics for the toy multimodal MoE model.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include "umoe/analytics.hpp"
#include "umoe/checkpoint.hpp"
#include "umoe/config.hpp"
#include "umoe/pipeline.hpp"

#ifndef UMOE_VERSION
#define UMOE_VERSION "0.0.0"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace umoe;
using T = float;

namespace {

constexpr std::uint64_t kAnalyzeSeed = 0xA7A1'0000'0001ULL;

void setup_logging() {
  auto logger = spdlog::stderr_color_st("umoe");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("UMOE_LOG")) {
    const std::string v = env;
    if (v == "error") spdlog::set_level(spdlog::level::err);
    else if (v == "debug") spdlog::set_level(spdlog::level::debug);
    else if (v != "info") spdlog::warn("UMOE_LOG='{}' not recognized (error|info|debug); using info", v);
  }
}

void ensure_dir(const fs::path& p) {
  std::error_code ec;
  fs::create_directories(p, ec);
  if (ec) throw FormatError("cannot create " + p.string() + ": " + ec.message());
}

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os || !(os << s)) throw FormatError("cannot write " + p.string());
}

std::string read_text(const fs::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open " + p.string());
  return {std::istreambuf_iterator<char>(is), std::istreambuf_iterator<char>()};
}

std::size_t dense_param_count(const ModelConfig& cfg, const ConnectorConfig& cc) {
  auto m = UniMoeModel<T>::make_dense(cfg, cc, 0);
  std::size_t n = 0;
  m.visit([&](const std::string&, Tensor<T>& t, ParamGroup) { n += t.size(); });
  return n;
}

std::uint64_t id_seed(const std::string& id) {
  Fnv1a h;
  h.update(id);
  return h.digest();
}

std::string joined(const std::vector<std::string>& v) {
  std::string s;
  for (const auto& x : v) s += (s.empty() ? "" : ", ") + x;
  return s;
}

// Left-aligns in a column of `width` code points (names may hold × and †).
std::string padded(const std::string& s, std::size_t width) {
  std::size_t cps = 0;
  for (unsigned char ch : s) cps += (ch & 0xC0) != 0x80;
  return s + std::string(cps < width ? width - cps : 1, ' ');
}

// ---------------------------------------------------------------- count-params

struct CountOpts {
  std::string config;
  bool raw = false;
};

int cmd_count_params(const CountOpts& o) {
  const auto rc = load_config(o.config);
  if (rc.models.empty()) throw ConfigError(o.config + ": no [model] sections");
  std::printf("%-31s%7s %5s %10s %12s %12s\n", "name", "experts", "topk", "moe_layers", "activated", "total");
  for (const auto& row : rc.models) {
    const double base = row.base_params ? *row.base_params : static_cast<double>(dense_param_count(row.cfg, rc.connector));
    const auto pc = count_parameters(row.cfg, base);
    const auto moe_layers = row.cfg.experts == 1 ? 0 : count_moe_layers(build_layer_layout(row.cfg));
    std::string act, tot;
    if (o.raw) {
      act = std::to_string(static_cast<long long>(pc.activated));
      tot = std::to_string(static_cast<long long>(pc.total));
    } else {
      char a[32], t[32];
      std::snprintf(a, sizeof a, "%.1fB", round_billions(pc.activated));
      std::snprintf(t, sizeof t, "%.1fB", round_billions(pc.total));
      act = a;
      tot = t;
    }
    std::printf("%s %7zu %5zu %10zu %12s %12s\n", padded(row.name, 30).c_str(), row.cfg.experts, row.cfg.topk,
                moe_layers, act.c_str(), tot.c_str());
  }
  return 0;
}

// ----------------------------------------------------------------------- train

struct TrainOpts {
  int stage = -1;
  std::string config;
  std::uint64_t seed = 0;
  std::string out = "runs";
  std::optional<std::size_t> steps;
  bool pure_experts = false;
};

struct StageRun {
  fs::path dir;
  std::ofstream log;
};

StageRun open_stage_dir(const fs::path& dir, const std::string& config_path) {
  ensure_dir(dir);
  StageRun r{dir, std::ofstream(dir / "log.jsonl")};
  if (!r.log) throw FormatError("cannot write " + (dir / "log.jsonl").string());
  write_text(dir / "config.ini", read_text(config_path));
  return r;
}

std::function<void(const StepRecord&)> step_logger(std::ofstream& log, std::size_t steps) {
  return [&log, steps](const StepRecord& r) {
    log << json{{"stage", r.stage}, {"step", r.step}, {"loss", r.loss}, {"aux_loss", r.aux_loss}, {"lr", r.lr}}.dump()
        << '\n';
    if (r.step % 50 == 0 || r.step + 1 == steps)
      spdlog::info("stage {} step {}/{} loss {:.4f}", r.stage, r.step + 1, steps, r.loss);
    spdlog::debug("stage {} step {} loss {} aux {} lr {}", r.stage, r.step, r.loss, r.aux_loss, r.lr);
  };
}

json base_manifest(const RunConfig& rc, const TrainOpts& o, const std::string& run_id) {
  return {{"run_id", run_id},   {"config_hash", rc.hash}, {"seed", o.seed},
          {"version", UMOE_VERSION}, {"stage", o.stage}};
}

void add_result(json& j, const StageSpec& sp, const StageResult& r) {
  j["task"] = sp.task;
  j["steps"] = sp.steps;
  j["initial_loss"] = r.initial_loss;
  j["final_loss"] = r.final_loss;
  j["frozen_hash_before"] = r.frozen_before;
  j["frozen_hash_after"] = r.frozen_after;
}

std::string run_id(const RunConfig& rc, int stage, std::uint64_t seed, const std::string& suffix = "") {
  return "stage" + std::to_string(stage) + (suffix.empty() ? "" : "-" + suffix) + "-seed" + std::to_string(seed) + "-" +
         rc.hash.substr(0, 8);
}

UniMoeModel<T> load_model(const RunConfig& rc, const fs::path& ckpt, double lora_alpha) {
  return model_from_checkpoint<T>(rc.model().cfg, rc.connector, load_checkpoint(ckpt), lora_alpha);
}

void save_model(UniMoeModel<T>& m, const StageRun& run, json manifest) {
  const auto entries = m.to_checkpoint();
  save_checkpoint(run.dir / "model.ckpt", entries);
  manifest["checkpoint_hash"] = checkpoint_hash(entries);
  manifest["outputs"] = {{"checkpoint", "model.ckpt"}, {"log", "log.jsonl"}, {"config", "config.ini"}};
  write_text(run.dir / "manifest.json", manifest.dump(2) + "\n");
}

int cmd_train(const TrainOpts& o) {
  const auto stage = stage_from_index(o.stage);
  const auto rc = load_config(o.config);
  const auto& cfg = rc.model().cfg;
  if (rc.connector.raw_dim != rc.data.raw_dim)
    throw ConfigError("[connector] raw_dim " + std::to_string(rc.connector.raw_dim) + " differs from [data] raw_dim " +
                      std::to_string(rc.data.raw_dim));
  ParallelSettings par{rc.parallel, rc.expert_parallel};
  par.group.validate(cfg.experts);
  const fs::path out = o.out;
  auto with_steps = [&](StageSpec sp) {
    if (o.steps) sp.steps = *o.steps;
    return sp;
  };
  const auto stage_seed = mix_seed(o.seed, static_cast<std::uint64_t>(o.stage));

  switch (stage) {
    case Stage::Pretrain:
    case Stage::Align: {
      const auto sp = with_steps(stage == Stage::Pretrain ? rc.stage0 : rc.stage1);
      const fs::path prev = out / "stage0" / "model.ckpt";
      UniMoeModel<T> m;
      std::string init = "fresh";
      if (stage == Stage::Align && fs::exists(prev)) {
        m = load_model(rc, prev, sp.lora_alpha);
        init = prev.lexically_relative(out).string();
      } else {
        m = UniMoeModel<T>::make_dense(cfg, rc.connector, o.seed);
      }
      spdlog::info("stage {}: task {} for {} steps (init: {})", o.stage, sp.task, sp.steps, init);
      auto run = open_stage_dir(out / ("stage" + std::to_string(o.stage)), o.config);
      const auto res = train_stage(m, sp, builtin_task(sp.task), rc.data, stage_seed, par, step_logger(run.log, sp.steps));
      auto j = base_manifest(rc, o, run_id(rc, o.stage, o.seed));
      add_result(j, sp, res);
      j["init"] = init;
      save_model(m, run, j);
      spdlog::info("stage {}: eval loss {:.4f} -> {:.4f}", o.stage, res.initial_loss, res.final_loss);
      return 0;
    }
    case Stage::Experts: {
      const fs::path prev = out / "stage1" / "model.ckpt";
      if (!fs::exists(prev))
        throw ConfigError("stage 2 starts from the aligned model but " + prev.string() +
                          " does not exist; run `umoe train --stage 1` first");
      if (rc.stage2.empty()) throw ConfigError("config has no [stage2.<task>] sections");
      const auto dense = load_model(rc, prev, 16.0);
      for (const auto& [id, spec] : rc.stage2) {
        const auto sp = with_steps(spec);
        const auto task = builtin_task(sp.task);
        auto m2 = prepare_stage2(dense, sp, stage_seed);
        spdlog::info("stage 2 [{}]: task {} for {} steps, lora r={} alpha={}", id, sp.task, sp.steps, sp.lora_rank,
                     sp.lora_alpha);
        auto run = open_stage_dir(out / "stage2" / id, o.config);
        const auto res = train_stage(m2, sp, task, rc.data, mix_seed(stage_seed, id_seed(id)), par,
                                     step_logger(run.log, sp.steps));
        const auto entries = extract_task_expert(m2, task).to_checkpoint();
        save_checkpoint(run.dir / "expert.ckpt", entries);
        auto j = base_manifest(rc, o, run_id(rc, 2, o.seed, id));
        add_result(j, sp, res);
        j["expert"] = id;
        j["init"] = "stage1/model.ckpt";
        j["checkpoint_hash"] = checkpoint_hash(entries);
        j["outputs"] = {{"checkpoint", "expert.ckpt"}, {"log", "log.jsonl"}, {"config", "config.ini"}};
        write_text(run.dir / "manifest.json", j.dump(2) + "\n");
        spdlog::info("stage 2 [{}]: eval loss {:.4f} -> {:.4f}", id, res.initial_loss, res.final_loss);
      }
      return 0;
    }
    case Stage::Moe: {
      auto sp = with_steps(rc.stage3);
      if (o.pure_experts) sp.expert_init = ExpertInit::Pure;
      const auto prov = resolve_provenance(sp, cfg.experts);
      std::map<std::string, TaskExpert<T>> experts;
      std::vector<std::string> missing;
      for (const auto& tag : prov.sources) {
        if (!tag.starts_with("stage2:") || experts.count(tag.substr(7))) continue;
        const auto id = tag.substr(7);
        const fs::path p = out / "stage2" / id / "expert.ckpt";
        if (!fs::exists(p)) {
          missing.push_back(p.string());
          continue;
        }
        experts[id] = TaskExpert<T>::from_checkpoint(id, load_checkpoint(p));
      }
      if (!missing.empty()) {
        std::string list;
        for (const auto& p : missing) list += "\n  " + p;
        throw ConfigError("stage 3 mixture experts need stage-2 checkpoints; missing:" + list +
                          "\nrun `umoe train --stage 2` first or pass --pure-experts");
      }
      const fs::path prev = out / "stage1" / "model.ckpt";
      UniMoeModel<T> dense;
      std::string init = "stage1/model.ckpt";
      if (fs::exists(prev)) {
        dense = load_model(rc, prev, 16.0);
      } else if (sp.expert_init == ExpertInit::Pure) {
        spdlog::warn("no {}; pure experts start from a freshly initialized dense model", prev.string());
        dense = UniMoeModel<T>::make_dense(cfg, rc.connector, o.seed);
        init = "fresh";
      } else {
        throw ConfigError("stage 3 starts from the aligned model but " + prev.string() + " does not exist");
      }
      auto m = init_stage3(dense, sp, prov, experts, stage_seed);
      spdlog::info("stage 3: task {} for {} steps, experts [{}]", sp.task, sp.steps, joined(prov.sources));
      auto run = open_stage_dir(out / "stage3", o.config);
      const auto res = train_stage(m, sp, builtin_task(sp.task), rc.data, stage_seed, par, step_logger(run.log, sp.steps));
      auto j = base_manifest(rc, o, run_id(rc, 3, o.seed));
      add_result(j, sp, res);
      j["init"] = init;
      j["expert_init"] = sp.expert_init == ExpertInit::Pure ? "pure" : "mixture";
      j["expert_sources"] = prov.sources;
      j["lora_alpha"] = sp.lora_alpha;
      save_model(m, run, j);
      spdlog::info("stage 3: eval loss {:.4f} -> {:.4f}", res.initial_loss, res.final_loss);
      return 0;
    }
  }
  return 0;
}

// ------------------------------------------------------------- eval / analyze

struct EvalOpts {
  std::string ckpt, config, task, out;
  std::optional<std::size_t> samples;
};

int cmd_eval(const EvalOpts& o) {
  const auto rc = load_config(o.config);
  const auto entries = load_checkpoint(o.ckpt);
  const auto m = model_from_checkpoint<T>(rc.model().cfg, rc.connector, entries, rc.stage3.lora_alpha);
  const auto task = builtin_task(o.task.empty() ? rc.stage3.task : o.task);
  const auto em = evaluate(m, eval_split(task, rc.data));
  const json j{{"task", task.name},
               {"samples", em.samples},
               {"ce", em.ce},
               {"exact_match", em.exact_match},
               {"checkpoint_hash", checkpoint_hash(entries)},
               {"config_hash", rc.hash}};
  std::cout << j.dump(2) << '\n';
  if (!o.out.empty()) {
    ensure_dir(o.out);
    write_text(fs::path(o.out) / "metrics.json", j.dump(2) + "\n");
  }
  return 0;
}

int cmd_analyze(const EvalOpts& o) {
  const auto rc = load_config(o.config);
  const auto entries = load_checkpoint(o.ckpt);
  const auto m = model_from_checkpoint<T>(rc.model().cfg, rc.connector, entries, rc.stage3.lora_alpha);
  const auto task = builtin_task(o.task.empty() ? rc.analytics.task : o.task);
  const auto n = o.samples.value_or(rc.analytics.samples);
  const auto samples = generate_synthetic_batch(task, rc.data, n, kAnalyzeSeed);
  const auto log = collect_routing(m, samples);
  if (log.records.empty()) spdlog::warn("model has no MoE layers; writing the manifest only");
  const auto products = analyze_log(log, rc.analytics.top_pathways);
  export_analytics(products, o.out, "analyze-" + task.name + "-" + checkpoint_hash(entries).substr(0, 8), rc.hash);
  spdlog::info("wrote analytics for {} samples ({} routing records) to {}", n, log.records.size(), o.out);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"umoe: multimodal mixture-of-experts toolkit"};
  app.set_version_flag("--version", std::string(UMOE_VERSION));
  app.require_subcommand(1);

  CountOpts count;
  auto* c = app.add_subcommand("count-params", "Print activated/total parameters for every [model*] section");
  c->add_option("--config", count.config, "config file")->required();
  c->add_flag("--raw", count.raw, "print exact counts instead of rounded billions");

  TrainOpts train;
  auto* t = app.add_subcommand("train", "Run one training stage");
  t->add_option("--stage", train.stage, "stage 0 (text pretraining), 1 (align), 2 (experts) or 3 (MoE)")
      ->required()
      ->check(CLI::Range(0, 3));
  t->add_option("--config", train.config, "config file")->required();
  t->add_option("--seed", train.seed, "seed");
  t->add_option("--out", train.out, "output root; stage N writes <out>/stageN");
  t->add_option("--steps", train.steps, "override the stage's step count");
  t->add_flag("--pure-experts", train.pure_experts, "stage 3: fill every expert with the base FFN");

  EvalOpts ev;
  auto* e = app.add_subcommand("eval", "Mean CE and exact match on a task's eval split");
  e->add_option("--ckpt", ev.ckpt, "model checkpoint")->required();
  e->add_option("--config", ev.config, "config the checkpoint was trained with")->required();
  e->add_option("--task", ev.task, "task (default: the [stage3] task)");
  e->add_option("--out", ev.out, "also write <out>/metrics.json");

  EvalOpts an;
  auto* a = app.add_subcommand("analyze", "Export routing analytics CSVs");
  a->add_option("--ckpt", an.ckpt, "model checkpoint")->required();
  a->add_option("--config", an.config, "config the checkpoint was trained with")->required();
  a->add_option("--task", an.task, "task (default: [analytics] task)");
  a->add_option("--samples", an.samples, "samples to route (default: [analytics] samples)");
  a->add_option("--out", an.out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForAllHelp& ex) {
    return app.exit(ex);
  } catch (const CLI::CallForVersion& ex) {
    return app.exit(ex);
  } catch (const CLI::ParseError& ex) {
    app.exit(ex);
    return 1;
  }

  try {
    if (*c) return cmd_count_params(count);
    if (*t) return cmd_train(train);
    if (*e) return cmd_eval(ev);
    if (*a) return cmd_analyze(an);
  } catch (const NumericError& ex) {
    spdlog::error("{}", ex.what());
    return 2;
  } catch (const Error& ex) {
    spdlog::error("{}", ex.what());
    return 1;
  } catch (const std::exception& ex) {
    spdlog::error("{}", ex.what());
    return 1;
  }
  return 0;
}
