#include "prefarena/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <tuple>

#include "prefarena/judging/strategy.hpp"

namespace prefarena {

namespace {

// (sample, lower model, higher model) with models ordered by id so that
// records oriented either way land on the same key.
using TaskKey = std::tuple<std::string, std::string, std::string>;

TaskKey key_for(const std::string& sample, const std::string& a,
                const std::string& b) {
  return a < b ? TaskKey{sample, a, b} : TaskKey{sample, b, a};
}

std::string describe(const ComparisonTask& t) {
  return std::string(to_string(t.phase)) + " " + t.model_i + " " + t.model_j +
         " " + t.sample;
}

struct VerdictIndex {
  std::map<TaskKey, SampleVerdict> by_task;
  std::vector<std::string> judges;
};

VerdictIndex index_verdicts(const CampaignManifest& manifest,
                            std::span<const JudgmentRecord> records,
                            const PipelineOptions& options) {
  const std::set<std::string> sources =
      options.judges.empty()
          ? std::set<std::string>(manifest.judges.begin(), manifest.judges.end())
          : std::set<std::string>(options.judges.begin(), options.judges.end());
  if (sources.empty())
    throw ValidationError("no verdict source: the manifest lists no annotators "
                          "and no judge was given");

  std::vector<JudgmentRecord> used;
  std::set<std::string> seen;
  for (const auto& r : records) {
    if (!sources.count(r.judge)) continue;
    used.push_back(r);
    seen.insert(r.judge);
  }

  if (!options.allow_overlap) {
    const std::set<std::string> models(manifest.models.begin(),
                                       manifest.models.end());
    for (const auto& j : seen) {
      const auto stem = j.substr(0, j.find('.'));
      if (models.count(j) || models.count(stem))
        throw ValidationError("judge '" + j +
                              "' is also a ranked model; judges and ranked "
                              "models must be disjoint (allow_overlap to "
                              "override)");
    }
  }

  const auto collected = collect_verdicts(
      used, [&](std::string_view j) { return manifest.is_human(j); });
  VerdictIndex index;
  index.judges.assign(seen.begin(), seen.end());
  for (const auto& v : collected.verdicts) {
    auto key = key_for(v.sample, v.model_a, v.model_b);
    if (!index.by_task.emplace(key, v).second)
      throw ValidationError("two pair ids describe the same comparison: '" +
                            index.by_task.at(key).pair_id + "' and '" +
                            v.pair_id + "'");
  }
  return index;
}

// Verdicts of the tasks in one phase; missing tasks are appended to
// `missing`.
std::vector<SampleVerdict> phase_verdicts(
    const VerdictIndex& index, std::span<const ComparisonTask> tasks,
    std::vector<std::string>& missing, std::set<TaskKey>& consumed) {
  std::vector<SampleVerdict> out;
  for (const auto& t : tasks) {
    const auto key = key_for(t.sample, t.model_i, t.model_j);
    auto it = index.by_task.find(key);
    if (it == index.by_task.end()) {
      missing.push_back(describe(t));
      continue;
    }
    consumed.insert(key);
    out.push_back(it->second);
  }
  return out;
}

void check_missing(const std::vector<std::string>& missing,
                   const PipelineOptions& options) {
  if (missing.empty() || options.allow_incomplete) return;
  std::string msg = std::to_string(missing.size()) +
                    " scheduled comparison(s) have no verdict:";
  const std::size_t shown = std::min<std::size_t>(missing.size(), 20);
  for (std::size_t k = 0; k < shown; ++k) msg += "\n  " + missing[k];
  if (shown < missing.size())
    msg += "\n  ... and " + std::to_string(missing.size() - shown) + " more";
  throw ValidationError(msg);
}

RankResult fit_tallies(std::span<const TallyEntry> tallies,
                       std::span<const std::string> models,
                       const FitConfig& config, PreferenceMatrix& w) {
  w = build_matrix(tallies, models);
  const auto obs = config.mode == FitMode::kBinary
                       ? Observations::from_matrix(w)
                       : Observations::from_tallies(tallies, models);
  return fit(obs, config);
}

SubsetFit fit_subset(Phase phase, const std::vector<std::string>& subset,
                     const std::vector<SampleVerdict>& verdicts,
                     const FitConfig& config) {
  SubsetFit s{phase, subset, tally_all(verdicts, subset), {}, {}};
  PreferenceMatrix w;
  s.result = fit_tallies(s.tallies, subset, config, w);
  s.winner = rank(s.result).front().model;
  return s;
}

struct Phase1 {
  SubsetFit a, b;
  std::vector<std::string> missing;
  std::set<TaskKey> consumed;
};

Phase1 play_phase1(const VerdictIndex& index,
                   const ComparisonSchedule& schedule,
                   const PipelineOptions& options) {
  Phase1 p;
  const auto tasks_a = schedule.phase_tasks(Phase::kSubsetA);
  const auto tasks_b = schedule.phase_tasks(Phase::kSubsetB);
  const auto va = phase_verdicts(index, tasks_a, p.missing, p.consumed);
  const auto vb = phase_verdicts(index, tasks_b, p.missing, p.consumed);
  check_missing(p.missing, options);
  p.a = fit_subset(Phase::kSubsetA, schedule.subset_a, va, options.fit);
  p.b = fit_subset(Phase::kSubsetB, schedule.subset_b, vb, options.fit);
  return p;
}

void check_schedule(const CampaignManifest& manifest,
                    const ComparisonSchedule& schedule) {
  if (schedule.tasks.empty()) throw ValidationError("empty schedule");
  for (const auto& t : schedule.tasks) {
    const bool placeholder = t.phase == Phase::kFinal && t.model_i.front() == '@';
    if (!placeholder &&
        (!manifest.model_index(t.model_i) || !manifest.model_index(t.model_j)))
      throw ValidationError("schedule task '" + describe(t) +
                            "' names a model outside the manifest");
    if (!manifest.find_sample(t.sample))
      throw ValidationError("schedule task '" + describe(t) +
                            "' names a sample outside the manifest");
  }
}

}  // namespace

std::pair<std::string, std::string> phase_winners(
    const CampaignManifest& manifest, const ComparisonSchedule& schedule,
    std::span<const JudgmentRecord> records, const PipelineOptions& options) {
  if (!schedule.hierarchical())
    throw ValidationError("phase winners need a hierarchical schedule");
  check_schedule(manifest, schedule);
  const auto index = index_verdicts(manifest, records, options);
  auto p = play_phase1(index, schedule, options);
  return {p.a.winner, p.b.winner};
}

PipelineResult run_pipeline(const CampaignManifest& manifest,
                            const ComparisonSchedule& schedule,
                            std::span<const JudgmentRecord> records,
                            const PipelineOptions& options) {
  options.fit.validate();
  check_schedule(manifest, schedule);
  const auto index = index_verdicts(manifest, records, options);

  PipelineResult out;
  out.models = manifest.models;
  out.judges = index.judges;
  std::set<TaskKey> consumed;
  std::vector<SampleVerdict> verdicts;

  if (schedule.hierarchical()) {
    auto p1 = play_phase1(index, schedule, options);
    out.missing = p1.missing;
    consumed = p1.consumed;
    ComparisonSchedule resolved = schedule;
    if (!schedule.final_resolved()) {
      resolved = resolve_final(schedule, p1.a.winner, p1.b.winner,
                               manifest.models);
    } else {
      const auto finals = schedule.phase_tasks(Phase::kFinal);
      const std::set<std::string> played = {finals.front().model_i,
                                            finals.front().model_j};
      if (played != std::set<std::string>{p1.a.winner, p1.b.winner})
        throw ValidationError("final pairs " + finals.front().model_i + " and " +
                              finals.front().model_j +
                              " but the subset winners are " + p1.a.winner +
                              " and " + p1.b.winner);
    }
    const auto finals = resolved.phase_tasks(Phase::kFinal);
    std::vector<std::string> missing_final;
    auto vf = phase_verdicts(index, finals, missing_final, consumed);
    check_missing(missing_final, options);
    out.missing.insert(out.missing.end(), missing_final.begin(),
                       missing_final.end());

    for (const auto& t : p1.a.tallies) out.tallies.push_back(t);
    for (const auto& t : p1.b.tallies) out.tallies.push_back(t);
    if (!vf.empty()) {
      auto final_tally = tally_all(vf, manifest.models);
      out.tallies.insert(out.tallies.end(), final_tally.begin(),
                         final_tally.end());
    }
    // Orient and order like a round-robin tally list.
    std::sort(out.tallies.begin(), out.tallies.end(),
              [&](const TallyEntry& x, const TallyEntry& y) {
                return std::pair(*manifest.model_index(x.model_i),
                                 *manifest.model_index(x.model_j)) <
                       std::pair(*manifest.model_index(y.model_i),
                                 *manifest.model_index(y.model_j));
              });
    out.subsets = {std::move(p1.a), std::move(p1.b)};
    out.schedule = std::move(resolved);
  } else {
    verdicts = phase_verdicts(index, schedule.tasks, out.missing, consumed);
    check_missing(out.missing, options);
    out.tallies = tally_all(verdicts, manifest.models);
    out.schedule = schedule;
  }

  for (const auto& [key, v] : index.by_task)
    if (!consumed.count(key)) ++out.unscheduled_verdicts;
  std::set<std::string> samples;
  for (const auto& t : out.schedule.tasks) samples.insert(t.sample);
  out.samples = samples.size();
  out.cost = cost_of(out.schedule);
  out.ranking = fit_tallies(out.tallies, manifest.models, options.fit, out.w);
  return out;
}

// ---------------------------------------------------------------------------
// Artifacts

namespace {

std::string fixed(double v, int digits = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

}  // namespace

std::string ranking_document(const PipelineResult& result) {
  return ranking_to_json(result.ranking).dump(2) + "\n";
}

std::string render_report(const PipelineResult& r) {
  std::string md;
  md += "# Ranking report\n\n";
  md += "- models: " + std::to_string(r.models.size()) + "\n";
  md += "- samples: " + std::to_string(r.samples) + "\n";
  md += "- scheduled comparisons: " + std::to_string(r.cost.total_tasks) +
        " (" + r.cost.formula + ")";
  if (r.cost.shortcut_formula_value)
    md += "; shortcut formula C(M/2,2)*N + N gives " +
          std::to_string(*r.cost.shortcut_formula_value);
  md += "\n";
  md += "- verdict sources: ";
  for (std::size_t k = 0; k < r.judges.size(); ++k)
    md += (k ? ", " : "") + r.judges[k];
  md += "\n";
  if (!r.missing.empty())
    md += "- INCOMPLETE: " + std::to_string(r.missing.size()) +
          " scheduled comparison(s) had no verdict and were skipped\n";
  if (r.unscheduled_verdicts)
    md += "- ignored verdicts outside the schedule: " +
          std::to_string(r.unscheduled_verdicts) + "\n";

  for (const auto& s : r.subsets) {
    md += "\n## Phase " + std::string(to_string(s.phase)) + "\n\n";
    md += "Members: ";
    for (std::size_t k = 0; k < s.models.size(); ++k)
      md += (k ? ", " : "") + s.models[k];
    md += "\n\nWinner (within-subset Bradley-Terry): " + s.winner + "\n";
  }

  md += "\n## Pairwise tallies\n\n";
  md += "Per-sample majority verdicts per model pair.\n\n";
  md += "| model i | model j | wins i | wins j | ties |\n";
  md += "|---|---|---:|---:|---:|\n";
  for (const auto& t : r.tallies)
    md += "| " + t.model_i + " | " + t.model_j + " | " +
          std::to_string(t.tally.wins_i) + " | " +
          std::to_string(t.tally.wins_j) + " | " +
          std::to_string(t.tally.ties) + " |\n";

  md += "\n## Preference matrix W\n\n";
  md += "Entry (row, column) is 1 when the row model won more samples than the "
        "column model, 0 when it won fewer, and -1 when the pair was never "
        "compared or split its wins evenly. Ties do not count as wins.\n\n";
  md += "| |";
  for (const auto& m : r.w.models()) md += " " + m + " |";
  md += "\n|---|";
  for (std::size_t k = 0; k < r.w.size(); ++k) md += "---:|";
  md += "\n";
  for (std::size_t i = 0; i < r.w.size(); ++i) {
    md += "| " + r.w.models()[i] + " |";
    for (std::size_t j = 0; j < r.w.size(); ++j)
      md += " " + std::to_string(r.w.at(i, j)) + " |";
    md += "\n";
  }

  md += "\n## Ranking\n\n";
  md += "| rank | model | theta | beta |\n|---:|---|---:|---:|\n";
  std::size_t pos = 0;
  for (const auto& e : rank(r.ranking))
    md += "| " + std::to_string(++pos) + (e.tied_with_previous ? "=" : "") +
          " | " + e.model + " | " + fixed(e.theta) + " | " + fixed(e.beta) +
          " |\n";

  const auto& c = r.ranking.config;
  md += "\nFit: " + std::string(to_string(c.mode)) + " mode, pseudo-count " +
        fixed(c.pseudo_count, 4) + " added to both directions of every "
        "observed pair, " + std::to_string(r.ranking.iterations) +
        " iterations, gradient norm " + fixed(r.ranking.grad_norm, 10) + ", " +
        (r.ranking.converged ? "converged" : "NOT converged (iteration cap)") +
        ". Strengths are exp(beta) with beta summing to zero.\n";
  return md;
}

void write_artifacts(const std::filesystem::path& dir,
                     const PipelineResult& result) {
  std::filesystem::create_directories(dir);
  auto write = [&](const char* name, const std::string& body) {
    std::ofstream out(dir / name, std::ios::binary);
    if (!out) throw Error("cannot write " + (dir / name).string());
    out << body;
  };
  write("tallies.json",
        tallies_to_json(result.tallies, result.models).dump(2) + "\n");
  write("W.csv", to_csv(result.w));
  write("ranking.json", ranking_document(result));
  write("report.md", render_report(result));
}

// ---------------------------------------------------------------------------
// Synthetic campaigns

namespace {

std::string padded(const char* prefix, std::size_t k, std::size_t n) {
  const auto width = std::to_string(n > 0 ? n - 1 : 0).size();
  std::string num = std::to_string(k);
  return prefix + std::string(width - std::min(width, num.size()), '0') + num;
}

std::uint64_t derive_seed(std::uint64_t seed, const std::string& key) {
  return std::uint64_t(judging::keyed_uniform(seed, key) * 9007199254740992.0);
}

void vote(const SimulationConfig& config, const judging::TruthOracle& truth,
          std::span<const DescriptionPair> pairs, Timestamp& clock,
          std::vector<JudgmentRecord>& out) {
  for (const auto& a : config.annotators) {
    judging::SimulatedJudgeParams p = a.params;
    p.seed = derive_seed(config.seed, "annotator|" + a.id);
    judging::StrategyConfig sc;
    sc.strategy = judging::Strategy::kS1;
    sc.primary = std::make_shared<judging::SimulatedBackend>(a.id, p, truth, true);
    sc.judge_id = a.id;
    sc.retry.max_retries = 0;
    for (const auto& pair : pairs) {
      const bool reversed =
          judging::keyed_uniform(config.seed, "order|" + a.id + "|" + pair.pair_id) <
          0.5;
      judging::RunOptions opt;
      opt.clock = [&clock] { return clock += std::chrono::milliseconds(1000); };
      auto o = judging::run_strategy(
          sc, pair, reversed ? Direction::kReversed : Direction::kForward, opt);
      if (o.record.label == PreferenceLabel::kAbstain)
        throw ValidationError("simulated annotator produced no verdict");
      out.push_back(std::move(o.record));
    }
  }
}

std::vector<DescriptionPair> pairs_for(std::span<const ComparisonTask> tasks) {
  std::vector<DescriptionPair> out;
  for (const auto& t : tasks) {
    DescriptionPair p;
    p.sample = t.sample;
    p.model_a = t.model_i;
    p.model_b = t.model_j;
    p.pair_id = make_pair_id(t.sample, t.model_i, t.model_j);
    p.text_a = "Emotion description of " + t.sample + " by " + t.model_i + ".";
    p.text_b = "Emotion description of " + t.sample + " by " + t.model_j + ".";
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace

SimulatedCampaign simulate_campaign(const SimulationConfig& config) {
  if (config.models < 2) throw ConfigError("simulation needs at least 2 models");
  if (config.samples < 1) throw ConfigError("simulation needs samples");
  if (!(config.ratio > 0.0)) throw ConfigError("ratio must be positive");
  if (config.annotators.empty())
    throw ConfigError("simulation needs at least one annotator");

  SimulatedCampaign c;
  auto& m = c.manifest;
  m.seed = config.seed;
  for (std::size_t k = 0; k < config.models; ++k)
    m.models.push_back(padded("m", k, config.models));
  for (std::size_t k = 0; k < config.samples; ++k)
    m.samples.push_back({padded("s", k, config.samples), std::nullopt});
  for (const auto& a : config.annotators) m.judges.push_back(a.id);
  m.votes_per_task = std::uint32_t(config.annotators.size());
  m.validate();

  // Planted rank r (0 = strongest) goes to a seeded permutation of models.
  std::vector<std::size_t> perm(config.models);
  for (std::size_t k = 0; k < perm.size(); ++k) perm[k] = k;
  std::mt19937_64 rng(config.seed);
  for (std::size_t k = perm.size() - 1; k > 0; --k)
    std::swap(perm[k], perm[std::size_t(rng() % (k + 1))]);
  for (std::size_t r = 0; r < perm.size(); ++r) {
    const auto& model = m.models[perm[r]];
    c.strengths[model] = std::pow(config.ratio, double(config.models - 1 - r));
    c.planted_order.push_back(model);
  }
  const auto truth =
      judging::truth_from_strengths(c.strengths, config.bernoulli, config.seed);

  std::vector<std::string> samples;
  for (const auto& s : m.samples) samples.push_back(s.id);
  Timestamp clock{std::chrono::milliseconds(1767225600000)};  // 2026-01-01
  if (!config.hierarchical) {
    c.schedule = round_robin(m.models, samples);
    c.pairs = pairs_for(c.schedule.tasks);
    vote(config, truth, c.pairs, clock, c.records);
    return c;
  }
  c.schedule = hierarchical(m.models, samples, config.seed);
  std::vector<ComparisonTask> phase1;
  for (const auto& t : c.schedule.tasks)
    if (t.phase != Phase::kFinal) phase1.push_back(t);
  c.pairs = pairs_for(phase1);
  vote(config, truth, c.pairs, clock, c.records);
  const auto [wa, wb] = phase_winners(m, c.schedule, c.records, {});
  c.schedule = resolve_final(c.schedule, wa, wb, m.models);
  const auto final_pairs = pairs_for(c.schedule.phase_tasks(Phase::kFinal));
  vote(config, truth, final_pairs, clock, c.records);
  c.pairs.insert(c.pairs.end(), final_pairs.begin(), final_pairs.end());
  return c;
}

}  // namespace prefarena
