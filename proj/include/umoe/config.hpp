// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "umoe/parallel.hpp"

namespace umoe {

/// One row of the parameter-count table: a named architecture and the
/// dense base it upcycles.
struct CountRow {
  std::string name;
  ModelConfig cfg;
  std::optional<double> base_params;  // absent: count the toy model's own parameters
};

struct AnalyticsSettings {
  std::string task = "mixed_qa";
  std::size_t samples = 200;
  std::size_t top_pathways = 10;
};

/// Parsed run configuration.
struct RunConfig {
  std::vector<CountRow> models;  // every [model] / [model.<name>] section, file order
  ConnectorConfig connector;
  DataSpace data;
  StageSpec stage0 = default_stage_spec(Stage::Pretrain);
  StageSpec stage1 = default_stage_spec(Stage::Align);
  std::vector<std::pair<std::string, StageSpec>> stage2;  // [stage2.<id>], file order
  StageSpec stage3 = default_stage_spec(Stage::Moe);
  WorkerGroup parallel;
  bool expert_parallel = false;
  AnalyticsSettings analytics;
  std::string hash;  // fingerprint of the canonical key/value content

  /// The trainable model: [model], or the only model section.
  const CountRow& model() const {
    for (const auto& r : models)
      if (r.name == "model") return r;
    if (models.size() == 1) return models.front();
    throw ConfigError(models.empty() ? "config has no [model] section"
                                     : "config has several [model.<name>] sections but no plain [model]");
  }

  const StageSpec& stage2_spec(const std::string& id) const {
    for (const auto& [n, s] : stage2)
      if (n == id) return s;
    throw ConfigError("no [stage2." + id + "] section");
  }
};

namespace detail {

using boost::property_tree::ptree;

class SectionReader {
 public:
  SectionReader(std::string name, const ptree& t) : name_(std::move(name)), t_(t) {}

  template <class V>
  void get(const std::string& key, V& out) {
    auto it = t_.find(key);
    if (it == t_.not_found()) return;
    seen_.insert(key);
    const auto raw = it->second.data();
    try {
      out = parse<V>(raw);
    } catch (const ConfigError& e) {
      throw ConfigError("[" + name_ + "] " + key + " = '" + raw + "': " + e.what());
    }
  }

  std::optional<std::string> raw(const std::string& key) {
    auto it = t_.find(key);
    if (it == t_.not_found()) return std::nullopt;
    seen_.insert(key);
    return it->second.data();
  }

  void finish() const {
    for (const auto& [k, v] : t_)
      if (!seen_.count(k)) throw ConfigError("[" + name_ + "] unknown key '" + k + "'");
  }

 private:
  template <class V>
  static V parse(const std::string& s) {
    if constexpr (std::is_same_v<V, std::string>) {
      return s;
    } else if constexpr (std::is_same_v<V, bool>) {
      if (s == "true" || s == "1") return true;
      if (s == "false" || s == "0") return false;
      throw ConfigError("expected true or false");
    } else if constexpr (std::is_same_v<V, double>) {
      std::size_t pos = 0;
      double v = 0;
      try {
        v = std::stod(s, &pos);
      } catch (const std::exception&) {
        throw ConfigError("expected a number");
      }
      if (pos != s.size()) throw ConfigError("expected a number");
      return v;
    } else {
      V v{};
      auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
      if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("expected a non-negative integer");
      return v;
    }
  }

  std::string name_;
  const ptree& t_;
  std::set<std::string> seen_;
};

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const auto b = item.find_first_not_of(" \t");
    const auto e = item.find_last_not_of(" \t");
    if (b == std::string::npos) throw ConfigError("empty item in list '" + s + "'");
    out.push_back(item.substr(b, e - b + 1));
  }
  return out;
}

inline void read_model(SectionReader& r, CountRow& row) {
  auto& c = row.cfg;
  r.get("layers", c.layers);
  r.get("d_model", c.d_model);
  r.get("ffn_dim", c.ffn_dim);
  r.get("ffn_factor", c.ffn_factor);
  r.get("heads", c.heads);
  r.get("vocab", c.vocab);
  r.get("max_len", c.max_len);
  r.get("experts", c.experts);
  r.get("topk", c.topk);
  if (auto v = r.raw("moe_layout")) c.moe_layout = parse_layout(*v);
  r.get("aux_loss_coeff", c.aux_loss_coeff);
  r.get("init_std", c.init_std);
  if (r.raw("base_params")) {
    double b = 0;
    r.get("base_params", b);
    row.base_params = b;
  }
}

inline void read_stage(SectionReader& r, StageSpec& sp) {
  r.get("task", sp.task);
  r.get("steps", sp.steps);
  r.get("batch", sp.batch);
  r.get("lr", sp.lr);
  r.get("weight_decay", sp.weight_decay);
  r.get("horizon", sp.horizon);
  r.get("train_qformer", sp.train_qformer);
  r.get("lora_rank", sp.lora_rank);
  r.get("lora_alpha", sp.lora_alpha);
  r.get("lora_attention", sp.lora_attention);
  if (auto v = r.raw("expert_init")) {
    if (*v == "mixture") sp.expert_init = ExpertInit::Mixture;
    else if (*v == "pure") sp.expert_init = ExpertInit::Pure;
    else throw ConfigError("expert_init must be mixture or pure (got '" + *v + "')");
  }
  if (auto v = r.raw("expert_sources")) sp.expert_sources = split_list(*v);
  if (sp.batch == 0) throw ConfigError("batch must be >= 1");
  if (sp.lr < 0) throw ConfigError("lr must be >= 0");
}

}  // namespace detail

/// Parses the INI-style run config. Syntax errors carry the line number;
/// unknown sections and keys are rejected.
inline RunConfig parse_config(std::istream& is, const std::string& source = "<config>") {
  boost::property_tree::ptree pt;
  try {
    boost::property_tree::ini_parser::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  RunConfig rc;
  Fnv1a h;
  for (const auto& [name, sec] : pt) {
    if (sec.empty() && !sec.data().empty())
      throw ConfigError(source + ": key '" + name + "' appears before any section");
    std::map<std::string, std::string> sorted;
    for (const auto& [k, v] : sec) sorted[k] = v.data();
    h.update("[" + name + "]");
    for (const auto& [k, v] : sorted) h.update(k + "=" + v + "\n");

    detail::SectionReader r(name, sec);
    try {
      if (name == "model" || name.starts_with("model.")) {
        CountRow row;
        row.name = name == "model" ? "model" : name.substr(6);
        detail::read_model(r, row);
        row.cfg.validate();
        rc.models.push_back(row);
      } else if (name == "connector") {
        auto& c = rc.connector;
        r.get("raw_dim", c.raw_dim);
        r.get("enc_dim", c.enc_dim);
        r.get("num_queries", c.num_queries);
        r.get("qformer_heads", c.qformer_heads);
        r.get("encoder_seed", c.encoder_seed);
        r.get("init_std", c.init_std);
      } else if (name == "data") {
        auto& d = rc.data;
        r.get("classes", d.classes);
        r.get("raw_dim", d.raw_dim);
        r.get("noise", d.noise);
        r.get("patches", d.patches);
        r.get("min_states", d.min_states);
        r.get("max_states", d.max_states);
        r.get("seed", d.seed);
        if (d.min_states == 0 || d.min_states > d.max_states) throw ConfigError("need 1 <= min_states <= max_states");
      } else if (name == "stage0") {
        detail::read_stage(r, rc.stage0);
      } else if (name == "stage1") {
        detail::read_stage(r, rc.stage1);
      } else if (name.starts_with("stage2.")) {
        auto sp = default_stage_spec(Stage::Experts);
        sp.task = name.substr(7);
        detail::read_stage(r, sp);
        rc.stage2.emplace_back(name.substr(7), sp);
      } else if (name == "stage3") {
        detail::read_stage(r, rc.stage3);
      } else if (name == "parallel") {
        auto& g = rc.parallel;
        r.get("workers", g.workers);
        r.get("threads", g.threads);
        r.get("expert_parallel", rc.expert_parallel);
        if (auto v = r.raw("data_shard")) g.data_shard = parse_data_shard(*v);
        if (auto v = r.raw("expert_map"); v && *v != "round_robin") {
          g.expert_map.clear();
          for (const auto& s : detail::split_list(*v)) {
            std::size_t w = 0;
            auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), w);
            if (ec != std::errc{} || p != s.data() + s.size()) throw ConfigError("expert_map entry '" + s + "'");
            g.expert_map.push_back(w);
          }
        }
        if (g.workers == 0) throw ConfigError("workers must be >= 1");
      } else if (name == "analytics") {
        r.get("task", rc.analytics.task);
        r.get("samples", rc.analytics.samples);
        r.get("top_pathways", rc.analytics.top_pathways);
      } else {
        throw ConfigError("unknown section [" + name + "]");
      }
      r.finish();
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": " + e.what());
    }
  }
  const bool trainable = std::any_of(rc.models.begin(), rc.models.end(), [](const CountRow& r) { return r.name == "model"; }) ||
                         rc.models.size() == 1;
  if (trainable) {
    auto& g = rc.parallel;
    const auto experts = rc.model().cfg.experts;
    if (g.expert_map.empty()) g.expert_map = WorkerGroup::round_robin(g.workers, experts).expert_map;
    try {
      g.validate(experts);
    } catch (const ConfigError& e) {
      throw ConfigError(source + ": [parallel] " + e.what());
    }
  }
  rc.hash = h.hex();
  return rc;
}

inline RunConfig parse_config_string(const std::string& text, const std::string& source = "<config>") {
  std::istringstream is(text);
  return parse_config(is, source);
}

inline RunConfig load_config(const std::filesystem::path& p) {
  std::ifstream is(p);
  if (!is) throw ConfigError("cannot open config " + p.string());
  return parse_config(is, p.string());
}

}  // namespace umoe
