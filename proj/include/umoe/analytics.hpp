// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "umoe/training.hpp"

namespace umoe {

inline constexpr int kAnalyticsSchemaVersion = 1;

/// One token's routing at one MoE layer.
struct RoutingRecord {
  std::size_t layer = 0;
  std::size_t token = 0;
  Modality modality = Modality::Text;
  std::vector<std::size_t> experts;  // selected, descending gate
  std::vector<double> gates;
};

struct RoutingLog {
  std::size_t experts = 0;
  std::size_t topk = 0;
  std::vector<RoutingRecord> records;

  void add(RoutingRecord r) {
    if (r.experts.size() != topk || r.gates.size() != topk)
      throw ConfigError("routing record has " + std::to_string(r.experts.size()) + " selections, log topk is " +
                        std::to_string(topk));
    for (auto e : r.experts)
      if (e >= experts) throw ConfigError("routing record names expert " + std::to_string(e));
    records.push_back(std::move(r));
  }

  /// Appends every MoE layer's decisions for one forward pass; token ids
  /// continue from `first_token`.
  template <class T>
  void append(const LmOutput<T>& out, const std::vector<Modality>& labels, std::size_t first_token) {
    for (const auto& ld : out.decisions) {
      const auto& d = ld.decision;
      if (d.tokens() != labels.size())
        throw ConfigError("decision covers " + std::to_string(d.tokens()) + " tokens, labels " +
                          std::to_string(labels.size()));
      for (std::size_t t = 0; t < d.tokens(); ++t) {
        RoutingRecord r{ld.layer, first_token + t, labels[t], {}, {}};
        for (std::size_t s = 0; s < d.topk; ++s) {
          r.experts.push_back(d.expert(t, s));
          r.gates.push_back(static_cast<double>(d.gates.at(t, s)));
        }
        add(std::move(r));
      }
    }
  }

  std::vector<std::size_t> layers() const {
    std::vector<std::size_t> out;
    for (const auto& r : records) out.push_back(r.layer);
    std::sort(out.begin(), out.end());
    out.erase(std::unique(out.begin(), out.end()), out.end());
    return out;
  }
};

/// Teacher-forced pass over `samples` recording every MoE decision; token
/// ids run across samples in order.
template <class T>
RoutingLog collect_routing(const UniMoeModel<T>& m, const std::vector<Sample>& samples, EvalMetrics* metrics = nullptr) {
  RoutingLog log;
  log.experts = m.cfg.experts;
  log.topk = m.cfg.topk;
  std::size_t next = 0;
  auto em = evaluate<T>(m, samples, metrics != nullptr, [&](const Sample&, const PreparedInput<T>& p, const LmOutput<T>& o) {
    log.append(o, p.input.labels, next);
    next += p.input.labels.size();
  });
  if (metrics) *metrics = em;
  return log;
}

struct LoadRow {
  std::size_t layer;
  std::vector<double> fraction;  // per expert
};

/// Share of assignment slots taken by each expert, per layer.
inline std::vector<LoadRow> expert_load_distribution(const RoutingLog& log) {
  if (log.records.empty()) throw ConfigError("expert_load_distribution: empty routing log");
  std::map<std::size_t, std::vector<std::size_t>> counts;
  for (const auto& r : log.records) {
    auto& c = counts[r.layer];
    c.resize(log.experts, 0);
    for (auto e : r.experts) ++c[e];
  }
  std::vector<LoadRow> out;
  for (const auto& [layer, c] : counts) {
    std::size_t total = 0;
    for (auto v : c) total += v;
    LoadRow row{layer, {}};
    for (auto v : c) row.fraction.push_back(static_cast<double>(v) / static_cast<double>(total));
    out.push_back(std::move(row));
  }
  return out;
}

struct PreferenceRow {
  std::size_t layer;
  std::size_t expert;
  bool empty = false;  // expert received no slots
  std::array<double, 5> fraction{};  // indexed like kAllModalities
};

/// Modality mix of the slots each expert received, per layer.
inline std::vector<PreferenceRow> modality_preference(const RoutingLog& log) {
  if (log.records.empty()) throw ConfigError("modality_preference: empty routing log");
  std::map<std::size_t, std::vector<std::array<std::size_t, 5>>> counts;
  for (const auto& r : log.records) {
    auto& c = counts[r.layer];
    c.resize(log.experts);
    for (auto e : r.experts) ++c[e][static_cast<std::size_t>(r.modality)];
  }
  std::vector<PreferenceRow> out;
  for (const auto& [layer, c] : counts)
    for (std::size_t e = 0; e < c.size(); ++e) {
      PreferenceRow row{layer, e};
      std::size_t total = 0;
      for (auto v : c[e]) total += v;
      row.empty = total == 0;
      if (!row.empty)
        for (std::size_t m = 0; m < 5; ++m) row.fraction[m] = static_cast<double>(c[e][m]) / static_cast<double>(total);
      out.push_back(row);
    }
  return out;
}

/// Tokens × (layers·M) one-hot selections, tokens and layers ascending.
struct PathwayMatrix {
  std::vector<std::size_t> tokens;
  std::vector<std::size_t> layers;
  std::size_t experts = 0;
  std::vector<double> x;                // row-major
  std::vector<std::size_t> top_expert;  // [token × layer] first-slot expert

  std::size_t rows() const { return tokens.size(); }
  std::size_t cols() const { return layers.size() * experts; }
};

inline PathwayMatrix pathway_matrix(const RoutingLog& log) {
  PathwayMatrix p;
  p.experts = log.experts;
  p.layers = log.layers();
  for (const auto& r : log.records) p.tokens.push_back(r.token);
  std::sort(p.tokens.begin(), p.tokens.end());
  p.tokens.erase(std::unique(p.tokens.begin(), p.tokens.end()), p.tokens.end());
  auto row_of = [&](std::size_t t) {
    return static_cast<std::size_t>(std::lower_bound(p.tokens.begin(), p.tokens.end(), t) - p.tokens.begin());
  };
  auto col_of = [&](std::size_t l) {
    return static_cast<std::size_t>(std::lower_bound(p.layers.begin(), p.layers.end(), l) - p.layers.begin());
  };
  p.x.assign(p.rows() * p.cols(), 0.0);
  p.top_expert.assign(p.rows() * p.layers.size(), 0);
  std::vector<std::size_t> seen(p.rows() * p.layers.size(), 0);
  for (const auto& r : log.records) {
    const auto i = row_of(r.token), l = col_of(r.layer);
    if (seen[i * p.layers.size() + l]++) throw ConfigError("duplicate routing record for token " + std::to_string(r.token));
    for (auto e : r.experts) p.x[i * p.cols() + l * p.experts + e] += 1.0;
    p.top_expert[i * p.layers.size() + l] = r.experts.front();
  }
  for (auto s : seen)
    if (s != 1) throw ConfigError("routing log misses a (token, layer) record");
  return p;
}

/// First principal component of row-major data [n × c] by power iteration
/// on the centred scatter matrix. Sign: largest-magnitude entry positive.
/// Returns zeros when the data has no variance.
inline std::vector<double> first_principal_component(const std::vector<double>& x, std::size_t n, std::size_t c,
                                                     std::size_t max_iter = 200000) {
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += x[i * c + j];
  for (auto& v : mean) v /= static_cast<double>(n);
  std::vector<double> s(c * c, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < c; ++a) {
      const double xa = x[i * c + a] - mean[a];
      if (xa == 0) continue;
      for (std::size_t b = 0; b < c; ++b) s[a * c + b] += xa * (x[i * c + b] - mean[b]);
    }
  // start from the scatter column of largest norm
  std::size_t best = 0;
  double best_norm = 0;
  for (std::size_t j = 0; j < c; ++j) {
    double nn = 0;
    for (std::size_t a = 0; a < c; ++a) nn += s[a * c + j] * s[a * c + j];
    if (nn > best_norm) {
      best_norm = nn;
      best = j;
    }
  }
  std::vector<double> v(c, 0.0);
  if (best_norm == 0) return v;
  for (std::size_t a = 0; a < c; ++a) v[a] = s[a * c + best];
  auto normalize = [](std::vector<double>& u) {
    double nn = 0;
    for (auto e : u) nn += e * e;
    nn = std::sqrt(nn);
    for (auto& e : u) e /= nn;
  };
  normalize(v);
  std::vector<double> w(c);
  for (std::size_t it = 0; it < max_iter; ++it) {
    for (std::size_t a = 0; a < c; ++a) {
      double acc = 0;
      for (std::size_t b = 0; b < c; ++b) acc += s[a * c + b] * v[b];
      w[a] = acc;
    }
    normalize(w);
    double diff = 0;
    for (std::size_t a = 0; a < c; ++a) diff = std::max(diff, std::abs(w[a] - v[a]));
    v.swap(w);
    if (diff < 1e-15) break;
  }
  std::size_t big = 0;
  for (std::size_t a = 1; a < c; ++a)
    if (std::abs(v[a]) > std::abs(v[big])) big = a;
  if (v[big] < 0)
    for (auto& e : v) e = -e;
  return v;
}

struct Pathway {
  std::size_t rank;  // 1-based
  std::size_t token;
  double projection;
  std::vector<std::size_t> experts;  // first-slot expert per layer
  bool is_top2;
};

/// Ranks tokens by |projection on PC1| (ties: token order) and returns the
/// first n with their per-layer experts.
inline std::vector<Pathway> top_pathways(const PathwayMatrix& p, std::size_t n = 10) {
  if (n > p.rows())
    throw ConfigError("top_pathways: asked for " + std::to_string(n) + " of " + std::to_string(p.rows()) + " tokens");
  const std::size_t c = p.cols();
  const auto pc = first_principal_component(p.x, p.rows(), c);
  std::vector<double> mean(c, 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) mean[j] += p.x[i * c + j];
  for (auto& v : mean) v /= static_cast<double>(p.rows());
  std::vector<double> proj(p.rows(), 0.0);
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < c; ++j) proj[i] += (p.x[i * c + j] - mean[j]) * pc[j];
  std::vector<std::size_t> order(p.rows());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return std::abs(proj[a]) > std::abs(proj[b]); });
  std::vector<Pathway> out;
  for (std::size_t r = 0; r < n; ++r) {
    const auto i = order[r];
    Pathway pw{r + 1, p.tokens[i], proj[i], {}, r < 2};
    for (std::size_t l = 0; l < p.layers.size(); ++l) pw.experts.push_back(p.top_expert[i * p.layers.size() + l]);
    out.push_back(std::move(pw));
  }
  return out;
}

struct AnalyticsProducts {
  std::vector<LoadRow> loads;
  std::vector<PreferenceRow> prefs;
  std::vector<std::size_t> pathway_layers;
  std::vector<Pathway> pathways;

  bool empty() const { return loads.empty() && prefs.empty() && pathways.empty(); }
};

inline AnalyticsProducts analyze_log(const RoutingLog& log, std::size_t n_pathways) {
  AnalyticsProducts a;
  if (log.records.empty()) return a;
  a.loads = expert_load_distribution(log);
  a.prefs = modality_preference(log);
  const auto pm = pathway_matrix(log);
  a.pathway_layers = pm.layers;
  a.pathways = top_pathways(pm, std::min(n_pathways, pm.rows()));
  return a;
}

namespace detail {
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::ofstream open_out(const std::filesystem::path& p) {
  std::ofstream os(p);
  if (!os) throw FormatError("cannot write " + p.string());
  return os;
}
}  // namespace detail

/// Writes loads.csv, prefs.csv, pathways.csv and manifest.json into `dir`.
/// Empty products write the manifest only.
inline void export_analytics(const AnalyticsProducts& a, const std::filesystem::path& dir, const std::string& run_id,
                             const std::string& config_hash) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw FormatError("cannot create " + dir.string() + ": " + ec.message());
  if (!a.empty()) {
    auto lo = detail::open_out(dir / "loads.csv");
    lo << "layer,expert,fraction\n";
    for (const auto& r : a.loads)
      for (std::size_t e = 0; e < r.fraction.size(); ++e) lo << r.layer << ',' << e << ',' << detail::num(r.fraction[e]) << '\n';
    auto pr = detail::open_out(dir / "prefs.csv");
    pr << "layer,expert,modality,fraction\n";
    for (const auto& r : a.prefs) {
      if (r.empty) {
        pr << r.layer << ',' << r.expert << ",none,0\n";
        continue;
      }
      for (std::size_t m = 0; m < 5; ++m)
        pr << r.layer << ',' << r.expert << ',' << modality_name(kAllModalities[m]) << ',' << detail::num(r.fraction[m])
           << '\n';
    }
    auto pw = detail::open_out(dir / "pathways.csv");
    pw << "rank,token,layer,expert,is_top2\n";
    for (const auto& p : a.pathways)
      for (std::size_t l = 0; l < p.experts.size(); ++l)
        pw << p.rank << ',' << p.token << ',' << a.pathway_layers[l] << ',' << p.experts[l] << ',' << (p.is_top2 ? 1 : 0)
           << '\n';
    for (auto* os : {&lo, &pr, &pw})
      if (!*os) throw FormatError("write failed in " + dir.string());
  }
  auto mf = detail::open_out(dir / "manifest.json");
  mf << nlohmann::json{{"run_id", run_id}, {"config_hash", config_hash}, {"schema_version", kAnalyticsSchemaVersion}}.dump(2)
     << '\n';
}

/// Rows of a CSV file with its header checked.
inline std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& p, const std::string& header) {
  std::ifstream is(p);
  if (!is) throw FormatError("cannot open " + p.string());
  std::string line;
  if (!std::getline(is, line) || line != header) throw FormatError(p.string() + ": expected header '" + header + "'");
  std::vector<std::vector<std::string>> rows;
  const auto width = static_cast<std::size_t>(std::count(header.begin(), header.end(), ',')) + 1;
  while (std::getline(is, line)) {
    std::vector<std::string> cells;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i)
      if (i == line.size() || line[i] == ',') {
        cells.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    if (cells.size() != width) throw FormatError(p.string() + ": row '" + line + "' has wrong column count");
    rows.push_back(std::move(cells));
  }
  return rows;
}

inline std::vector<LoadRow> read_loads_csv(const std::filesystem::path& p) {
  std::vector<LoadRow> out;
  for (const auto& c : read_csv(p, "layer,expert,fraction")) {
    const auto layer = std::stoul(c[0]);
    if (out.empty() || out.back().layer != layer) out.push_back({layer, {}});
    if (std::stoul(c[1]) != out.back().fraction.size()) throw FormatError("loads.csv: experts out of order");
    out.back().fraction.push_back(std::stod(c[2]));
  }
  return out;
}

inline std::vector<PreferenceRow> read_prefs_csv(const std::filesystem::path& p) {
  std::vector<PreferenceRow> out;
  for (const auto& c : read_csv(p, "layer,expert,modality,fraction")) {
    const auto layer = std::stoul(c[0]), expert = std::stoul(c[1]);
    if (out.empty() || out.back().layer != layer || out.back().expert != expert) out.push_back({layer, expert});
    if (c[2] == "none") {
      out.back().empty = true;
      continue;
    }
    out.back().fraction[static_cast<std::size_t>(parse_modality(c[2]))] = std::stod(c[3]);
  }
  return out;
}

struct PathwayCsvRow {
  std::size_t rank, token, layer, expert;
  bool is_top2;
};

inline std::vector<PathwayCsvRow> read_pathways_csv(const std::filesystem::path& p) {
  std::vector<PathwayCsvRow> out;
  for (const auto& c : read_csv(p, "rank,token,layer,expert,is_top2"))
    out.push_back({std::stoul(c[0]), std::stoul(c[1]), std::stoul(c[2]), std::stoul(c[3]), c[4] == "1"});
  return out;
}

}  // namespace umoe
