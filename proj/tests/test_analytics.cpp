// Copyright 2026 The umoe Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <random>

#include "fixtures.hpp"
#include "umoe/analytics.hpp"

using namespace umoe;
using namespace umoe::testing;
namespace fs = std::filesystem;

namespace {

// Random log: every token routed at every layer, k distinct experts.
RoutingLog random_log(std::size_t tokens, std::vector<std::size_t> layers, std::size_t m, std::size_t k,
                      std::uint64_t seed) {
  Rng rng(seed);
  RoutingLog log{m, k, {}};
  for (std::size_t t = 0; t < tokens; ++t) {
    const auto mod = kAllModalities[rng() % 5];
    for (auto l : layers) {
      std::vector<std::size_t> all(m);
      std::iota(all.begin(), all.end(), 0);
      std::shuffle(all.begin(), all.end(), rng);
      RoutingRecord r{l, t, mod, {all.begin(), all.begin() + long(k)}, std::vector<double>(k, 1.0 / double(k))};
      log.add(r);
    }
  }
  return log;
}

fs::path fresh_dir(const std::string& name) {
  auto d = fs::temp_directory_path() / ("umoe_analytics_" + name);
  fs::remove_all(d);
  return d;
}

}  // namespace

TEST(RoutingLog, RejectsMalformedRecords) {
  RoutingLog log{4, 2, {}};
  EXPECT_THROW(log.add({0, 0, Modality::Text, {1}, {1.0}}), ConfigError);
  EXPECT_THROW(log.add({0, 0, Modality::Text, {1, 4}, {0.5, 0.5}}), ConfigError);
  EXPECT_NO_THROW(log.add({0, 0, Modality::Text, {1, 3}, {0.5, 0.5}}));
}

TEST(ExpertLoad, MatchesHandCount) {
  RoutingLog log{3, 2, {}};
  log.add({1, 0, Modality::Image, {0, 1}, {.5, .4}});
  log.add({1, 1, Modality::Audio, {0, 2}, {.5, .4}});
  log.add({1, 2, Modality::Text, {0, 1}, {.5, .4}});
  log.add({3, 0, Modality::Image, {2, 1}, {.5, .4}});
  auto rows = expert_load_distribution(log);
  ASSERT_EQ(rows.size(), 2u);
  EXPECT_EQ(rows[0].layer, 1u);
  EXPECT_DOUBLE_EQ(rows[0].fraction[0], 3.0 / 6);
  EXPECT_DOUBLE_EQ(rows[0].fraction[1], 2.0 / 6);
  EXPECT_DOUBLE_EQ(rows[0].fraction[2], 1.0 / 6);
  EXPECT_EQ(rows[1].fraction, (std::vector<double>{0.0, 0.5, 0.5}));
  EXPECT_THROW(expert_load_distribution(RoutingLog{3, 2, {}}), ConfigError);
}

TEST(ExpertLoad, RowsSumToOneAndSingleExpertTakesAll) {
  auto log = random_log(50, {1, 3, 5}, 8, 2, 1);
  for (const auto& r : expert_load_distribution(log))
    EXPECT_NEAR(std::accumulate(r.fraction.begin(), r.fraction.end(), 0.0), 1.0, 1e-12);
  auto one = random_log(20, {0}, 1, 1, 2);
  EXPECT_EQ(expert_load_distribution(one)[0].fraction, std::vector<double>{1.0});
}

TEST(ModalityPreference, MatchesHandCountAndMarksEmpty) {
  RoutingLog log{3, 1, {}};
  log.add({0, 0, Modality::Image, {0}, {1}});
  log.add({0, 1, Modality::Image, {0}, {1}});
  log.add({0, 2, Modality::Speech, {0}, {1}});
  log.add({0, 3, Modality::Text, {1}, {1}});
  auto rows = modality_preference(log);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_DOUBLE_EQ(rows[0].fraction[0], 2.0 / 3);
  EXPECT_DOUBLE_EQ(rows[0].fraction[3], 1.0 / 3);
  EXPECT_EQ(rows[1].fraction[4], 1.0);
  EXPECT_TRUE(rows[2].empty);
  EXPECT_EQ(rows[2].fraction, (std::array<double, 5>{}));
}

TEST(ModalityPreference, NonEmptyRowsSumToOne) {
  auto log = random_log(60, {1, 3}, 6, 2, 3);
  for (const auto& r : modality_preference(log)) {
    if (r.empty) continue;
    EXPECT_NEAR(std::accumulate(r.fraction.begin(), r.fraction.end(), 0.0), 1.0, 1e-12);
  }
}

TEST(PathwayMatrix, OneHotRowsAndCoverage) {
  auto log = random_log(12, {1, 3}, 4, 2, 4);
  auto p = pathway_matrix(log);
  EXPECT_EQ(p.rows(), 12u);
  EXPECT_EQ(p.cols(), 8u);
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t l = 0; l < 2; ++l) {
      double s = 0;
      for (std::size_t e = 0; e < 4; ++e) s += p.x[i * 8 + l * 4 + e];
      EXPECT_EQ(s, 2.0);
    }
  log.records.pop_back();
  EXPECT_THROW(pathway_matrix(log), ConfigError);
  log = random_log(3, {1}, 4, 2, 4);
  log.records.push_back(log.records[0]);
  EXPECT_THROW(pathway_matrix(log), ConfigError);
}

TEST(PrincipalComponent, MatchesEigenOn100x48) {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> nd;
  const std::size_t n = 100, c = 48;
  std::vector<double> x(n * c);
  // one dominant direction plus noise
  std::vector<double> dir(c);
  for (auto& v : dir) v = nd(rng);
  for (std::size_t i = 0; i < n; ++i) {
    const double a = 3 * nd(rng);
    for (std::size_t j = 0; j < c; ++j) x[i * c + j] = a * dir[j] + nd(rng);
  }
  Eigen::MatrixXd m(n, c);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) m(long(i), long(j)) = x[i * c + j];
  Eigen::MatrixXd centred = m.rowwise() - m.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(centred.transpose() * centred);
  Eigen::VectorXd ref = es.eigenvectors().col(long(c) - 1);
  auto pc = first_principal_component(x, n, c);
  double dot = 0;
  for (std::size_t j = 0; j < c; ++j) dot += pc[j] * ref(long(j));
  EXPECT_GE(std::abs(dot), 0.999);
}

TEST(PrincipalComponent, OneHotRoutingDataMatchesEigen) {
  auto log = random_log(100, {1, 3, 5, 7, 9, 11}, 8, 2, 5);
  auto p = pathway_matrix(log);
  ASSERT_EQ(p.cols(), 48u);
  Eigen::MatrixXd m(long(p.rows()), long(p.cols()));
  for (std::size_t i = 0; i < p.rows(); ++i)
    for (std::size_t j = 0; j < p.cols(); ++j) m(long(i), long(j)) = p.x[i * p.cols() + j];
  Eigen::MatrixXd centred = m.rowwise() - m.colwise().mean();
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(centred.transpose() * centred);
  const auto ev = es.eigenvalues();
  ASSERT_GT(ev(47) - ev(46), 1e-6 * ev(47)) << "degenerate top eigenvalue";
  auto pc = first_principal_component(p.x, p.rows(), p.cols());
  double dot = 0;
  for (std::size_t j = 0; j < 48; ++j) dot += pc[j] * es.eigenvectors()(long(j), 47);
  EXPECT_GE(std::abs(dot), 0.999);
}

TEST(PrincipalComponent, ConstantDataGivesZeros) {
  std::vector<double> x(10 * 4, 1.0);
  EXPECT_EQ(first_principal_component(x, 10, 4), std::vector<double>(4, 0.0));
}

TEST(TopPathways, RanksByAbsoluteProjection) {
  auto log = random_log(40, {1, 3}, 4, 2, 6);
  auto p = pathway_matrix(log);
  auto pw = top_pathways(p, 10);
  ASSERT_EQ(pw.size(), 10u);
  for (std::size_t r = 0; r < 10; ++r) {
    EXPECT_EQ(pw[r].rank, r + 1);
    EXPECT_EQ(pw[r].is_top2, r < 2);
    EXPECT_EQ(pw[r].experts.size(), 2u);
    if (r) EXPECT_GE(std::abs(pw[r - 1].projection), std::abs(pw[r].projection));
  }
  // first-slot expert per layer is the one in the log
  for (const auto& rec : log.records)
    if (rec.token == pw[0].token) EXPECT_EQ(pw[0].experts[rec.layer == 1 ? 0 : 1], rec.experts[0]);
  EXPECT_THROW(top_pathways(p, 41), ConfigError);
}

TEST(Analytics, IndependentOfRecordOrder) {
  auto log = random_log(30, {1, 3}, 4, 2, 7);
  auto shuffled = log;
  std::shuffle(shuffled.records.begin(), shuffled.records.end(), Rng(1));
  auto a = analyze_log(log, 10), b = analyze_log(shuffled, 10);
  for (std::size_t i = 0; i < a.loads.size(); ++i) EXPECT_EQ(a.loads[i].fraction, b.loads[i].fraction);
  for (std::size_t i = 0; i < a.prefs.size(); ++i) EXPECT_EQ(a.prefs[i].fraction, b.prefs[i].fraction);
  for (std::size_t i = 0; i < 10; ++i) {
    EXPECT_EQ(a.pathways[i].token, b.pathways[i].token);
    EXPECT_EQ(a.pathways[i].experts, b.pathways[i].experts);
  }
}

TEST(Export, CsvRoundTrip) {
  auto log = random_log(25, {1, 3}, 4, 2, 8);
  auto a = analyze_log(log, 10);
  a.prefs.push_back({7, 0, true, {}});
  const auto dir = fresh_dir("roundtrip");
  export_analytics(a, dir, "run-1", "abc");
  auto loads = read_loads_csv(dir / "loads.csv");
  ASSERT_EQ(loads.size(), a.loads.size());
  for (std::size_t i = 0; i < loads.size(); ++i) {
    EXPECT_EQ(loads[i].layer, a.loads[i].layer);
    for (std::size_t e = 0; e < 4; ++e) EXPECT_NEAR(loads[i].fraction[e], a.loads[i].fraction[e], 1e-12);
  }
  auto prefs = read_prefs_csv(dir / "prefs.csv");
  ASSERT_EQ(prefs.size(), a.prefs.size());
  EXPECT_TRUE(prefs.back().empty);
  for (std::size_t i = 0; i + 1 < prefs.size(); ++i)
    for (std::size_t m = 0; m < 5; ++m) EXPECT_NEAR(prefs[i].fraction[m], a.prefs[i].fraction[m], 1e-12);
  auto pw = read_pathways_csv(dir / "pathways.csv");
  ASSERT_EQ(pw.size(), 20u);
  EXPECT_EQ(pw[0].rank, 1u);
  EXPECT_EQ(pw[0].token, a.pathways[0].token);
  EXPECT_EQ(pw[3].expert, a.pathways[1].experts[1]);
  EXPECT_TRUE(pw[3].is_top2);
  EXPECT_FALSE(pw[4].is_top2);
  std::ifstream mf(dir / "manifest.json");
  auto j = nlohmann::json::parse(mf);
  EXPECT_EQ(j["run_id"], "run-1");
  EXPECT_EQ(j["config_hash"], "abc");
  EXPECT_EQ(j["schema_version"], kAnalyticsSchemaVersion);
}

TEST(Export, EmptyLogWritesManifestOnly) {
  const auto dir = fresh_dir("empty");
  auto a = analyze_log(RoutingLog{4, 2, {}}, 10);
  EXPECT_TRUE(a.empty());
  export_analytics(a, dir, "r", "h");
  EXPECT_TRUE(fs::exists(dir / "manifest.json"));
  EXPECT_FALSE(fs::exists(dir / "loads.csv"));
  EXPECT_FALSE(fs::exists(dir / "pathways.csv"));
}

TEST(Export, UnwritableDirectoryIsAnError) {
  const auto base = fresh_dir("blocked");
  fs::create_directories(base);
  std::ofstream(base / "file") << "x";
  auto a = analyze_log(random_log(5, {1}, 2, 1, 9), 2);
  EXPECT_THROW(export_analytics(a, base / "file" / "sub", "r", "h"), FormatError);
}

TEST(Export, ReaderRejectsBadHeaderAndWidth) {
  const auto dir = fresh_dir("bad");
  fs::create_directories(dir);
  std::ofstream(dir / "a.csv") << "layer,expert\n1,2\n";
  EXPECT_THROW(read_loads_csv(dir / "a.csv"), FormatError);
  std::ofstream(dir / "b.csv") << "layer,expert,fraction\n1,2\n";
  EXPECT_THROW(read_loads_csv(dir / "b.csv"), FormatError);
}

TEST(CollectRouting, CoversEveryTokenAtEveryMoeLayer) {
  auto dense = UniMoeModel<float>::make_dense(tiny_cfg(), tiny_conn(), 3);
  auto m = init_stage3(dense, default_stage_spec(Stage::Moe), ExpertProvenance{{"base", "random", "random", "random"}},
                       {}, 4);
  DataSpace ds;
  auto samples = generate_synthetic_batch(builtin_task("mixed_qa"), ds, 12, 5);
  EvalMetrics em;
  auto log = collect_routing(m, samples, &em);
  EXPECT_EQ(log.layers(), std::vector<std::size_t>{1});
  std::size_t tokens = 0;
  for (const auto& s : samples) tokens += prepare_input(m, s, s.targets.size() - 1).input.labels.size();
  EXPECT_EQ(log.records.size(), tokens);
  auto p = pathway_matrix(log);
  EXPECT_EQ(p.rows(), tokens);
  std::set<Modality> seen;
  for (const auto& r : log.records) seen.insert(r.modality);
  EXPECT_TRUE(seen.count(Modality::Text));
  EXPECT_GE(seen.size(), 3u);
  EXPECT_EQ(em.samples, 12u);
  auto again = collect_routing(m, samples);
  ASSERT_EQ(again.records.size(), log.records.size());
  for (std::size_t i = 0; i < log.records.size(); ++i) EXPECT_EQ(again.records[i].experts, log.records[i].experts);
}

TEST(CollectRouting, DenseModelLogsNothing) {
  auto m = UniMoeModel<float>::make_dense(tiny_cfg(), tiny_conn(), 3);
  DataSpace ds;
  auto log = collect_routing(m, generate_synthetic_batch(builtin_task("image_qa"), ds, 3, 5));
  EXPECT_TRUE(log.records.empty());
  EXPECT_TRUE(analyze_log(log, 10).empty());
}
