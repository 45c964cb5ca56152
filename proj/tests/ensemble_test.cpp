#include <gtest/gtest.h>

#include "prefarena/error.hpp"
#include "prefarena/judging/config.hpp"
#include "prefarena/judging/ensemble.hpp"
#include "test_support.hpp"

using namespace prefarena;
using namespace prefarena::judging;
using namespace prefarena::test;

namespace {

MetricReport report(double waf2, double flip) {
  MetricReport r;
  r.two_class.waf = waf2;
  r.flip_consistency = flip;
  return r;
}

struct Bench {
  std::vector<DescriptionPair> pairs;
  std::map<std::string, PreferenceLabel> truth;
};

Bench bench(int n) {
  Bench b;
  for (int k = 0; k < n; ++k) {
    const std::string sample = "s" + std::to_string(k);
    DescriptionPair p{make_pair_id(sample, "ma", "mb"), sample, "ma", "mb", "A", "B"};
    b.truth[p.pair_id] = keyed_uniform(77, sample) < 0.5 ? F : S;
    b.pairs.push_back(p);
  }
  return b;
}

std::vector<JudgmentRecord> judge_forward(const Bench& b, const std::string& id,
                                          SimulatedJudgeParams params) {
  StrategyConfig c;
  c.primary = std::make_shared<SimulatedBackend>(id, params,
                                                 truth_from_table(b.truth), true);
  c.judge_id = id;
  std::vector<JudgmentRecord> out;
  for (auto& o : run_tasks(c, plan_tasks(b.pairs, 1, 0), 4, {},
                           [] { return fixed_ts(); }))
    out.push_back(o.record);
  return out;
}

double ensemble_accuracy(const Bench& b, const std::vector<JudgmentRecord>& rs,
                         const std::vector<std::string>& judges) {
  auto ens = build_ensemble_records(rs, judges, "ens", fixed_ts());
  std::size_t hits = 0;
  for (const auto& r : ens) hits += r.label == b.truth.at(r.pair_id);
  return double(hits) / double(b.pairs.size());
}

}  // namespace

TEST(Filter, DualThreshold) {
  std::map<std::string, MetricReport> reports = {
      {"biased", report(0.65, 0.55)},
      {"affect", report(0.689, 0.8545)},
      {"omni", report(0.6721, 0.7)},
      {"weak", report(0.55, 0.9)}};
  EnsembleConfig c;
  EXPECT_EQ(filter_judges(reports, c), (std::vector<std::string>{"affect", "omni"}));
  c.top_n = 1;
  EXPECT_EQ(filter_judges(reports, c), std::vector<std::string>{"affect"});
}

TEST(Filter, BoundaryIsStrictUnlessInclusive) {
  std::map<std::string, MetricReport> reports = {{"edge", report(0.60, 0.60)}};
  EnsembleConfig c;
  EXPECT_THROW(filter_judges(reports, c), ValidationError);
  c.inclusive = true;
  EXPECT_EQ(filter_judges(reports, c), std::vector<std::string>{"edge"});
}

TEST(Filter, MissingMetricsNeverSurvive) {
  MetricReport none;
  std::map<std::string, MetricReport> reports = {{"x", none}};
  EXPECT_THROW(filter_judges(reports, EnsembleConfig{}), ValidationError);
  EnsembleConfig bad;
  bad.top_n = 0;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Vote, Plurality) {
  EXPECT_EQ(ensemble_vote(std::vector{F, F, S}), F);
  EXPECT_EQ(ensemble_vote(std::vector{F, S, T}), T);
  EXPECT_EQ(ensemble_vote(std::vector{A, S}), S);
  EXPECT_THROW(ensemble_vote(std::vector{A, A}), ValidationError);
}

TEST(BuildEnsemble, CombinesPerJudgeThenVotes) {
  std::vector<JudgmentRecord> rs = {
      // j1: four runs, canonical F,F,S,F -> F
      make_canonical("s1", "j1", F, Fwd, 0), make_canonical("s1", "j1", F, Fwd, 1),
      make_canonical("s1", "j1", S, Rev, 0), make_canonical("s1", "j1", F, Rev, 1),
      // j2: single forward S; j3: single reversed presenting First -> S
      make_record("s1", "j2", S), make_record("s1", "j3", F, Rev),
      // s2: everyone abstains
      make_record("s2", "j1", A), make_record("s2", "j2", A),
      // ignored judge
      make_record("s1", "other", F)};
  std::vector<std::string> judges = {"j1", "j2", "j3"};
  auto out = build_ensemble_records(rs, judges, "ens", fixed_ts());
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(out[0].pair_id, make_pair_id("s1", "ma", "mb"));
  EXPECT_EQ(out[0].label, S);
  EXPECT_EQ(out[0].judge, "ens");
  EXPECT_EQ(out[0].direction, Fwd);
  EXPECT_EQ(out[1].label, A);
}

TEST(BuildEnsemble, MatchesMajorityFormula) {
  // Three independent judges at p = 0.65: 3p^2(1-p) + p^3.
  const double p = 0.65;
  const double expected = 3 * p * p * (1 - p) + p * p * p;
  auto b = bench(10000);
  std::vector<JudgmentRecord> rs;
  std::vector<std::string> judges;
  for (int k = 0; k < 3; ++k) {
    const std::string id = "sim" + std::to_string(k);
    auto part = judge_forward(b, id, {p, 0.0, 0.0, std::uint64_t(100 + k)});
    rs.insert(rs.end(), part.begin(), part.end());
    judges.push_back(id);
  }
  EXPECT_NEAR(ensemble_accuracy(b, rs, judges), expected, 0.02);
  // Adding judges of equal quality helps.
  EXPECT_GE(ensemble_accuracy(b, rs, judges),
            ensemble_accuracy(b, rs, {judges[0]}));
}

TEST(Config, ParsesBackendsAndStrategy) {
  TempDir dir;
  save_truth(dir / "truth.jsonl", {{"p1", F}});
  nlohmann::json j = {
      {"strategy", "s3"},
      {"primary", "sim"},
      {"external", "txt"},
      {"backends",
       {{"sim", {{"kind", "simulated"}, {"accuracy", 0.7}, {"truth", "truth.jsonl"}}},
        {"txt", {{"kind", "subprocess"}, {"command", {"cat"}}}},
        {"old", {{"kind", "replay"}, {"dir", "cache"}, {"multimodal", true}}},
        {"http", {{"kind", "text_endpoint"}, {"url", "http://127.0.0.1:9/x"}}}}},
      {"retry", {{"max_retries", 1}, {"backoff_ms", 5}}},
      {"concurrency", 2},
      {"synonyms", {{"first", {"option a"}}}}};
  auto cfg = judge_config_from_json(j, dir.path());
  EXPECT_EQ(cfg.strategy.strategy, Strategy::kS3);
  EXPECT_EQ(cfg.strategy.effective_judge_id(), "sim.s3");
  EXPECT_EQ(cfg.concurrency, 2u);
  EXPECT_EQ(cfg.backends.size(), 4u);
  EXPECT_EQ(cfg.backends.at("txt")->accepts_media(), false);
  EXPECT_EQ(cfg.strategy.retry.max_retries, 1u);
  EXPECT_EQ(cfg.strategy.parser.parse("I choose option A").label, F);
}

TEST(Config, Rejections) {
  TempDir dir;
  auto bad = [&](nlohmann::json j) {
    EXPECT_THROW(judge_config_from_json(j, dir.path()), ConfigError) << j.dump();
  };
  nlohmann::json sim = {{"kind", "simulated"}, {"strengths", {{"a", 1.0}, {"b", 2.0}}}};
  bad({{"primary", "x"}, {"backends", {{"sim", sim}}}});
  bad({{"primary", "sim"}, {"backends", {{"sim", sim}}}, {"bogus", 1}});
  bad({{"primary", "sim"}, {"strategy", "s9"}, {"backends", {{"sim", sim}}}});
  // S3 without an external backend loads (a sweep may still use it) but
  // does not validate.
  auto s3 = judge_config_from_json(
      {{"primary", "sim"}, {"strategy", "s3"}, {"backends", {{"sim", sim}}}}, dir.path());
  EXPECT_THROW(s3.strategy.validate(), ConfigError);
  bad({{"primary", "sim"}, {"backends", {{"sim", {{"kind", "simulated"}}}}}});
  bad({{"primary", "sim"}, {"backends", {{"sim", {{"kind", "warp"}}}}}});
  EXPECT_NO_THROW(judge_config_from_json({{"primary", "sim"}, {"backends", {{"sim", sim}}}},
                                         dir.path()));
}

TEST(Config, RecordDirWrapsLiveBackends) {
  TempDir dir;
  nlohmann::json j = {
      {"primary", "sim"},
      {"record_dir", "cache"},
      {"backends",
       {{"sim", {{"kind", "simulated"}, {"strengths", {{"ma", 2.0}, {"mb", 1.0}}}}}}}};
  auto cfg = judge_config_from_json(j, dir.path());
  DescriptionPair p{make_pair_id("s1", "ma", "mb"), "s1", "ma", "mb", "A", "B"};
  run_strategy(cfg.strategy, p, Fwd);
  EXPECT_EQ(std::distance(std::filesystem::directory_iterator(dir / "cache"),
                          std::filesystem::directory_iterator{}),
            1);
}

TEST(Sweep, PicksBestStrategy) {
  auto b = bench(300);
  StrategyConfig base;
  base.primary = std::make_shared<SimulatedBackend>(
      "sim", SimulatedJudgeParams{0.7, 0.1, 0.0, 3}, truth_from_table(b.truth), true);
  auto sweep = sweep_strategies(base, b.pairs, b.truth, 4, {}, [] { return fixed_ts(); });
  // Without an external backend only S1 and S2 run.
  ASSERT_EQ(sweep.entries.size(), 2u);
  // Same simulated judge: identical scores, so the simpler strategy wins.
  EXPECT_EQ(sweep.entries[0].report.two_class.waf, sweep.entries[1].report.two_class.waf);
  EXPECT_EQ(sweep.chosen, Strategy::kS1);
  EXPECT_EQ(sweep.entries[1].records.front().judge, "sim.s2");
  auto j = to_json(sweep);
  EXPECT_EQ(j["chosen"], "s1");
}
