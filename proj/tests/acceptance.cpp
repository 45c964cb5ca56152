// Acceptance checks: one PASS/FAIL line per criterion, nonzero exit on any
// failure. Seeds are fixed constants chosen before the first run.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <numeric>
#include <random>
#include <sstream>
#include <string>
#include <unistd.h>
#include <vector>

#include "prefarena/aggregate.hpp"
#include "prefarena/btrank.hpp"
#include "prefarena/corpus.hpp"
#include "prefarena/error.hpp"
#include "prefarena/judging/ensemble.hpp"
#include "prefarena/judging/strategy.hpp"
#include "prefarena/metrics.hpp"
#include "prefarena/pipeline.hpp"
#include "prefarena/tournament.hpp"

using namespace prefarena;
using namespace prefarena::judging;
namespace fs = std::filesystem;

namespace {

constexpr auto F = PreferenceLabel::kFirst;
constexpr auto S = PreferenceLabel::kSecond;
constexpr auto T = PreferenceLabel::kTie;
constexpr auto Fwd = Direction::kForward;
constexpr auto Rev = Direction::kReversed;

struct Outcome {
  bool pass;
  std::string detail;
};

std::string fmt(double v) {
  std::ostringstream s;
  s.precision(6);
  s << v;
  return s.str();
}

Timestamp ts0() { return Timestamp{std::chrono::milliseconds{1'790'000'000'000LL}}; }

JudgmentRecord record(const std::string& sample, const std::string& judge,
                      PreferenceLabel canonical, Direction d = Fwd,
                      std::uint32_t run = 0) {
  JudgmentRecord r;
  r.sample = sample;
  r.model_a = "ma";
  r.model_b = "mb";
  r.pair_id = make_pair_id(sample, "ma", "mb");
  r.judge = judge;
  r.direction = d;
  r.run = run;
  r.label = d == Fwd ? canonical : mirror(canonical);
  r.ts = ts0();
  return r;
}

std::vector<std::string> model_ids(std::size_t m) {
  std::vector<std::string> out;
  for (std::size_t k = 0; k < m; ++k) out.push_back("m" + std::to_string(k));
  return out;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

// 1: expected-outcome tallies recover the planted order quickly.
Outcome c1() {
  const std::size_t m = 10, n = 332;
  const auto models = model_ids(m);
  std::vector<TallyEntry> tallies;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j) {
      const double ti = std::pow(1.5, double(m - 1 - i));
      const double tj = std::pow(1.5, double(m - 1 - j));
      const auto wi = std::uint64_t(std::llround(double(n) * ti / (ti + tj)));
      tallies.push_back({models[i], models[j], {wi, n - wi, 0}});
    }
  FitConfig cfg;
  cfg.pseudo_count = 0.01;
  const auto start = std::chrono::steady_clock::now();
  const auto r = fit(Observations::from_matrix(build_matrix(tallies, models)), cfg);
  const double secs =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  std::vector<std::size_t> want(m);
  std::iota(want.begin(), want.end(), 0);
  return {r.ordering == want && secs < 1.0,
          "order " + std::string(r.ordering == want ? "recovered" : "wrong") +
              ", " + fmt(secs) + " s"};
}

// 2: analytic gradient against central differences.
Outcome c2() {
  std::mt19937_64 rng(20261016);
  double worst = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const std::size_t m = 2 + rng() % 7;
    Observations obs;
    obs.mode = inst % 2 ? FitMode::kCounts : FitMode::kBinary;
    obs.models = model_ids(m);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::uint32_t i = 0; i < m; ++i)
      for (std::uint32_t j = i + 1; j < m; ++j) {
        if (u(rng) < 0.3 && !(i + 1 == j)) continue;
        double a, b;
        if (obs.mode == FitMode::kBinary) {
          a = u(rng) < 0.5 ? 1.0 : 0.0;
          b = 1.0 - a;
        } else {
          a = double(rng() % 6);
          b = double(rng() % 6);
          if (a + b == 0) a = 1;
        }
        obs.pairs.push_back({i, j, a, b});
      }
    std::vector<double> beta(m);
    for (auto& b : beta) b = u(rng) * 4.0 - 2.0;
    const double lambda = 0.01 + u(rng);
    const auto g = grad_nll(obs, beta, lambda);
    const double h = 1e-5;
    double num = 0.0, den = 0.0;
    for (std::size_t k = 0; k < m; ++k) {
      auto up = beta, down = beta;
      up[k] += h;
      down[k] -= h;
      const double fd = (nll(obs, up, lambda) - nll(obs, down, lambda)) / (2 * h);
      num += (fd - g[k]) * (fd - g[k]);
      den += g[k] * g[k];
    }
    worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-12));
  }
  return {worst < 1e-6, "max relative error " + fmt(worst)};
}

// 3: counts (3, 1, 0) with no pseudo-count give a strength ratio of 3.
Outcome c3() {
  const auto models = model_ids(2);
  std::vector<TallyEntry> t{{"m0", "m1", {3, 1, 0}}};
  FitConfig cfg;
  cfg.mode = FitMode::kCounts;
  cfg.pseudo_count = 0.0;
  cfg.max_iters = 200000;
  cfg.grad_tol = 1e-12;
  const auto r = fit(Observations::from_tallies(t, models), cfg);
  const double ratio = r.theta(0) / r.theta(1);
  return {std::abs(ratio - 3.0) < 1e-6, "theta ratio " + fmt(ratio)};
}

// 4: a 3-cycle ties; a total order without a pseudo-count diverges.
Outcome c4() {
  const auto models = model_ids(3);
  std::vector<TallyEntry> cycle{{"m0", "m1", {1, 0, 0}},
                                {"m1", "m2", {1, 0, 0}},
                                {"m0", "m2", {0, 1, 0}}};
  const auto r = fit(Observations::from_matrix(build_matrix(cycle, models)), FitConfig{});
  double spread = 0.0;
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j)
      spread = std::max(spread, std::abs(r.theta(i) - r.theta(j)));
  std::vector<TallyEntry> order{{"m0", "m1", {1, 0, 0}},
                                {"m1", "m2", {1, 0, 0}},
                                {"m0", "m2", {1, 0, 0}}};
  FitConfig zero;
  zero.pseudo_count = 0.0;
  bool diverged = false;
  try {
    fit(Observations::from_matrix(build_matrix(order, models)), zero);
  } catch (const DivergenceError&) {
    diverged = true;
  }
  return {spread < 1e-6 && diverged,
          "cycle spread " + fmt(spread) +
              (diverged ? ", total order diverges" : ", total order did not diverge")};
}

// 5: five random starts reach the same strengths.
Outcome c5() {
  const std::size_t m = 6;
  const auto models = model_ids(m);
  std::mt19937_64 rng(5150);
  std::vector<TallyEntry> tallies;
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = i + 1; j < m; ++j)
      tallies.push_back({models[i], models[j],
                         {3 + rng() % 15, 3 + rng() % 15, rng() % 3}});
  const auto obs = Observations::from_tallies(tallies, models);
  FitConfig cfg;
  cfg.mode = FitMode::kCounts;
  cfg.max_iters = 200000;
  cfg.grad_tol = 1e-10;
  std::vector<std::vector<double>> thetas;
  std::normal_distribution<double> g(0.0, 1.5);
  for (int start = 0; start < 5; ++start) {
    std::vector<double> init(m);
    for (auto& b : init) b = g(rng);
    const auto r = fit(obs, cfg, init);
    std::vector<double> th(m);
    for (std::size_t k = 0; k < m; ++k) th[k] = r.theta(k);
    thetas.push_back(th);
  }
  double worst = 0.0;
  for (const auto& th : thetas)
    for (std::size_t k = 0; k < m; ++k)
      worst = std::max(worst, std::abs(th[k] - thetas[0][k]) / thetas[0][k]);
  return {worst < 1e-4, "max relative difference " + fmt(worst)};
}

// Per-class F1 from precision and recall; 0 when either is undefined.
double waf_reference(const std::vector<PreferenceLabel>& truth,
                     const std::vector<PreferenceLabel>& pred,
                     const std::vector<PreferenceLabel>& classes) {
  double total = 0.0, score = 0.0;
  for (auto c : classes) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t k = 0; k < truth.size(); ++k) {
      if (pred[k] == c && truth[k] == c) ++tp;
      else if (pred[k] == c) ++fp;
      else if (truth[k] == c) ++fn;
    }
    const double support = tp + fn;
    const double p = tp + fp > 0 ? tp / (tp + fp) : 0.0;
    const double r = support > 0 ? tp / support : 0.0;
    score += support * (p + r > 0 ? 2 * p * r / (p + r) : 0.0);
    total += support;
  }
  return score / total;
}

// 6: WAF and ACC against the reference on random instances and a hand case.
Outcome c6() {
  const std::vector<PreferenceLabel> three{F, S, T}, two{F, S};
  std::mt19937_64 rng(606);
  double worst = 0.0;
  for (int inst = 0; inst < 1000; ++inst) {
    const std::size_t n = 1 + rng() % 40;
    std::vector<PreferenceLabel> truth(n), pred(n);
    for (std::size_t k = 0; k < n; ++k) {
      truth[k] = three[rng() % 3];
      pred[k] = three[rng() % 3];
    }
    worst = std::max(worst, std::abs(waf(truth, pred, three) -
                                     waf_reference(truth, pred, three)));
    double hits = 0;
    for (std::size_t k = 0; k < n; ++k) hits += truth[k] == pred[k];
    worst = std::max(worst, std::abs(accuracy(truth, pred) - hits / double(n)));
    const auto view = two_class_view(truth, pred);
    if (!view.truth.empty())
      worst = std::max(worst, std::abs(waf(view.truth, view.pred, two) -
                                       waf_reference(view.truth, view.pred, two)));
  }
  // F: tp 1, predicted 1, support 2 -> 2/3; S: tp 2, predicted 3, support 2
  // -> 4/5. (2 * 2/3 + 2 * 4/5) / 4 = 11/15.
  const std::vector<PreferenceLabel> truth{F, F, S, S}, pred{F, S, S, S};
  const double hand_waf = waf(truth, pred, three);
  const double hand_acc = accuracy(truth, pred);
  const bool hand = std::abs(hand_waf - 11.0 / 15.0) < 1e-12 &&
                    std::abs(hand_acc - 0.75) < 1e-12;
  return {worst < 1e-12 && hand,
          "max deviation " + fmt(worst) + ", hand WAF " + fmt(hand_waf) + " ACC " +
              fmt(hand_acc)};
}

// 7: flip and multi-run consistency.
Outcome c7() {
  std::vector<JudgmentRecord> fwd, rev, run1;
  const PreferenceLabel cycle[] = {F, S, T};
  for (int k = 0; k < 30; ++k) {
    const auto s = "s" + std::to_string(k);
    fwd.push_back(record(s, "j", cycle[k % 3], Fwd));
    rev.push_back(record(s, "j", cycle[k % 3], Rev));  // mirrored presentation
    run1.push_back(record(s, "j", cycle[k % 3], Fwd, 1));
  }
  const auto mirrored = flip_consistency(fwd, rev).value.value_or(-1);
  const double multi = multi_run_consistency(fwd, run1);

  std::map<std::string, PreferenceLabel> truth;
  std::vector<DescriptionPair> pairs;
  for (int k = 0; k < 200; ++k) {
    const auto s = "p" + std::to_string(k);
    DescriptionPair p{make_pair_id(s, "ma", "mb"), s, "ma", "mb", "A", "B"};
    truth[p.pair_id] = k % 2 ? F : S;
    pairs.push_back(p);
  }
  StrategyConfig cfg;
  cfg.primary = std::make_shared<SimulatedBackend>(
      "biased", SimulatedJudgeParams{0.7, 1.0, 0.0, 71}, truth_from_table(truth), true);
  std::vector<JudgmentRecord> sf, sr;
  for (auto& o : run_tasks(cfg, plan_tasks(pairs, 1, 1), 4, {}, ts0))
    (o.record.direction == Fwd ? sf : sr).push_back(o.record);
  const auto biased = flip_consistency(sf, sr).value.value_or(-1);
  return {mirrored == 1.0 && multi == 1.0 && biased == 0.0,
          "mirrored " + fmt(mirrored) + ", identical runs " + fmt(multi) +
              ", full position bias " + fmt(biased)};
}

// 8: comparison counts for M = 10, N = 332.
Outcome c8() {
  const auto rr = round_robin_cost(10, 332);
  const auto h = hierarchical_cost(10, 332);
  std::vector<std::string> samples;
  for (int k = 0; k < 332; ++k) samples.push_back("s" + std::to_string(k));
  const auto models = model_ids(10);
  const auto sched_rr = round_robin(models, samples).tasks.size();
  const auto sched_h = hierarchical(models, samples, 1).tasks.size();
  const bool ok = rr.total_tasks == 14940 && sched_rr == 14940 &&
                  h.total_tasks == 6972 && sched_h == 6972 &&
                  h.shortcut_formula_value == 3652u;
  return {ok, "round robin " + std::to_string(rr.total_tasks) + ", hierarchical " +
                  std::to_string(h.total_tasks) + ", shortcut " +
                  std::to_string(h.shortcut_formula_value.value_or(0))};
}

struct Bench {
  std::vector<DescriptionPair> pairs;
  std::map<std::string, PreferenceLabel> truth;
};

Bench bench(int n, std::uint64_t seed) {
  Bench b;
  for (int k = 0; k < n; ++k) {
    const auto s = "s" + std::to_string(k);
    DescriptionPair p{make_pair_id(s, "ma", "mb"), s, "ma", "mb", "A", "B"};
    b.truth[p.pair_id] = keyed_uniform(seed, s) < 0.5 ? F : S;
    b.pairs.push_back(p);
  }
  return b;
}

std::vector<JudgmentRecord> run_judge(const Bench& b, const std::string& id,
                                      SimulatedJudgeParams params,
                                      std::uint32_t fwd_runs,
                                      std::uint32_t rev_runs) {
  StrategyConfig cfg;
  cfg.primary = std::make_shared<SimulatedBackend>(id, params,
                                                   truth_from_table(b.truth), true);
  cfg.judge_id = id;
  std::vector<JudgmentRecord> out;
  for (auto& o : run_tasks(cfg, plan_tasks(b.pairs, fwd_runs, rev_runs), 8, {}, ts0))
    out.push_back(o.record);
  return out;
}

// 9: majority of three p = 0.65 judges, and the dual-threshold filter.
Outcome c9() {
  const double p = 0.65;
  const double expected = 3 * p * p * (1 - p) + p * p * p;
  const auto b = bench(10000, 909);
  std::vector<JudgmentRecord> rs;
  std::vector<std::string> judges;
  for (int k = 0; k < 3; ++k) {
    const auto id = "sim" + std::to_string(k);
    auto part = run_judge(b, id, {p, 0.0, 0.0, std::uint64_t(900 + k)}, 1, 0);
    rs.insert(rs.end(), part.begin(), part.end());
    judges.push_back(id);
  }
  const auto ens = build_ensemble_records(rs, judges, "ens", ts0());
  double hits = 0;
  for (const auto& r : ens) hits += r.label == b.truth.at(r.pair_id);
  const double acc = hits / double(b.pairs.size());

  auto report = [](double w, double f) {
    MetricReport r;
    r.two_class.waf = w;
    r.flip_consistency = f;
    return r;
  };
  std::map<std::string, MetricReport> reports{{"biased", report(0.65, 0.55)},
                                              {"affect", report(0.689, 0.8545)},
                                              {"omni", report(0.6721, 0.7)},
                                              {"weak", report(0.55, 0.9)},
                                              {"edge", report(0.60, 0.60)}};
  const auto kept = filter_judges(reports, EnsembleConfig{});
  const bool filter_ok = kept == std::vector<std::string>{"affect", "omni"};
  return {std::abs(acc - expected) <= 0.02 && filter_ok,
          "ensemble accuracy " + fmt(acc) + " vs " + fmt(expected) +
              (filter_ok ? ", filter ok" : ", filter wrong")};
}

// 10: combine rule on all 81 verdict sets, and combining beats one forward
// run under position bias.
Outcome c10() {
  const PreferenceLabel labels[] = {F, S, T};
  int mismatches = 0;
  for (int code = 0; code < 81; ++code) {
    PreferenceLabel v[4];
    int counts[3] = {0, 0, 0};
    for (int k = 0, c = code; k < 4; ++k, c /= 3) {
      v[k] = labels[c % 3];
      ++counts[c % 3];
    }
    const int top = std::max({counts[0], counts[1], counts[2]});
    int n_top = 0;
    PreferenceLabel winner = T;
    for (int k = 0; k < 3; ++k)
      if (counts[k] == top) {
        ++n_top;
        winner = labels[k];
      }
    std::vector<JudgmentRecord> rs{record("s", "j", v[0], Fwd, 0),
                                   record("s", "j", v[1], Fwd, 1),
                                   record("s", "j", v[2], Rev, 0),
                                   record("s", "j", v[3], Rev, 1)};
    mismatches += combine_forward_reverse(rs) != (n_top == 1 ? winner : T);
  }

  const auto b = bench(10000, 1010);
  const auto rs = run_judge(b, "sim", {0.65, 0.2, 0.0, 1010}, 2, 2);
  std::map<std::string, std::vector<JudgmentRecord>> by_pair;
  for (const auto& r : rs) by_pair[r.pair_id].push_back(r);
  double single = 0, combined = 0;
  for (const auto& [id, group] : by_pair) {
    for (const auto& r : group)
      if (r.direction == Fwd && r.run == 0) single += r.label == b.truth.at(id);
    combined += combine_forward_reverse(group) == b.truth.at(id);
  }
  single /= double(by_pair.size());
  combined /= double(by_pair.size());
  return {mismatches == 0 && combined >= single,
          std::to_string(mismatches) + " enumeration mismatches, combined " +
              fmt(combined) + " vs single forward " + fmt(single)};
}

// 11: agreement with and without ties, and the unanimity filter.
Outcome c11() {
  const std::vector<std::vector<PreferenceLabel>> votes{
      {F, S, T}, {F, F, T}, {F, S, F}};  // annotators A, B, C over s1..s3
  const std::string names[] = {"A", "B", "C"};
  std::vector<JudgmentRecord> rs;
  for (int a = 0; a < 3; ++a)
    for (int s = 0; s < 3; ++s)
      rs.push_back(record("s" + std::to_string(s + 1), names[a], votes[a][s]));
  const auto with = inter_annotator_consistency(rs, true);
  const auto without = inter_annotator_consistency(rs, false);
  double ab_with = -1, ab_without = -1;
  for (const auto& p : with.pairs)
    if (p.annotator_a == "A" && p.annotator_b == "B") ab_with = p.agreement.value_or(-1);
  for (const auto& p : without.pairs)
    if (p.annotator_a == "A" && p.annotator_b == "B")
      ab_without = p.agreement.value_or(-1);
  const bool exact = std::abs(ab_with - 2.0 / 3.0) < 1e-12 &&
                     std::abs(ab_without - 0.5) < 1e-12;
  const bool order = without.weighted_mean >= with.weighted_mean &&
                     without.unweighted_mean >= with.unweighted_mean;

  std::vector<JudgmentRecord> twins;
  for (int s = 0; s < 3; ++s)
    for (auto who : {"A", "B"})
      twins.push_back(record("s" + std::to_string(s + 1), who, votes[0][s]));
  const bool identical = inter_annotator_consistency(twins, true).weighted_mean == 1.0 &&
                         inter_annotator_consistency(twins, false).weighted_mean == 1.0;

  const auto kept = unanimity_filter(rs, 3);
  const bool unanimity = kept.kept_count() == 1 &&
                         kept.consensus.count(make_pair_id("s1", "ma", "mb")) &&
                         kept.consensus.begin()->second == F &&
                         kept.dropped_count() == 2;
  auto mixed = rs;
  mixed[6] = record("s1", "C", T);  // s1 becomes [F, F, T]
  const bool mixed_dropped = unanimity_filter(mixed, 3).kept_count() == 0;
  return {exact && order && identical && unanimity && mixed_dropped,
          "A-B " + fmt(ab_with) + " / " + fmt(ab_without) + ", means with ties " +
              fmt(with.weighted_mean) + " without " + fmt(without.weighted_mean) +
              (unanimity && mixed_dropped ? ", unanimity ok" : ", unanimity wrong")};
}

// 12: a simulated campaign run twice produces identical artifacts.
Outcome c12() {
  const auto root = fs::temp_directory_path() /
                    ("prefarena-acceptance-" + std::to_string(::getpid()));
  fs::remove_all(root);
  SimulationConfig cfg;
  cfg.models = 6;
  cfg.samples = 30;
  cfg.seed = 1212;
  for (int k = 0; k < 3; ++k)
    cfg.annotators.push_back({"h" + std::to_string(k), {0.8, 0.1, 0.1, 0}});
  std::vector<std::string> docs[2];
  for (int pass = 0; pass < 2; ++pass) {
    const auto c = simulate_campaign(cfg);
    const auto dir = root / std::to_string(pass);
    fs::create_directories(dir);
    save_records(dir / "records.jsonl", c.records);
    save_schedule(dir / "schedule.jsonl", c.schedule);
    write_artifacts(dir / "out", run_pipeline(c.manifest, c.schedule, c.records, {}));
    for (auto f : {"records.jsonl", "schedule.jsonl", "out/tallies.json", "out/W.csv",
                   "out/ranking.json", "out/report.md"})
      docs[pass].push_back(slurp(dir / f));
  }
  fs::remove_all(root);
  const bool same = docs[0] == docs[1] &&
                    std::none_of(docs[0].begin(), docs[0].end(),
                                 [](const std::string& d) { return d.empty(); });
  return {same, same ? "6 files byte-identical" : "artifacts differ"};
}

}  // namespace

int main() {
  const std::vector<std::function<Outcome()>> checks{c1, c2, c3, c4,  c5,  c6,
                                                     c7, c8, c9, c10, c11, c12};
  int failed = 0;
  for (std::size_t k = 0; k < checks.size(); ++k) {
    Outcome o;
    try {
      o = checks[k]();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s criterion %zu: %s\n", o.pass ? "PASS" : "FAIL", k + 1,
                o.detail.c_str());
  }
  return failed ? 1 : 0;
}
