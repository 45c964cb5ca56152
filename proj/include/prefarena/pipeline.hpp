#pragma once

// Schedule + verdict records -> tallies, W, Bradley-Terry ranking and a
// report bundle. Also generates fully synthetic campaigns.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "prefarena/aggregate.hpp"
#include "prefarena/btrank.hpp"
#include "prefarena/corpus.hpp"
#include "prefarena/judging/backend.hpp"
#include "prefarena/tournament.hpp"

namespace prefarena {

struct PipelineOptions {
  FitConfig fit;
  // Judges whose records count as verdicts. Empty means the manifest's
  // human annotators.
  std::vector<std::string> judges;
  // Permit judge ids that name (or are derived from) a ranked model.
  bool allow_overlap = false;
  // Rank with whatever verdicts exist instead of failing on missing ones.
  bool allow_incomplete = false;
};

struct SubsetFit {
  Phase phase;
  std::vector<std::string> models;
  std::vector<TallyEntry> tallies;
  RankResult result;
  std::string winner;
};

struct PipelineResult {
  std::vector<std::string> models;
  std::size_t samples = 0;
  ComparisonSchedule schedule;  // final phase resolved
  CostReport cost;
  std::vector<std::string> judges;  // verdict sources actually used
  std::vector<TallyEntry> tallies;
  PreferenceMatrix w;
  RankResult ranking;
  std::vector<SubsetFit> subsets;    // hierarchical only
  std::vector<std::string> missing;  // "phase model_i model_j sample"
  std::size_t unscheduled_verdicts = 0;
};

// Throws ValidationError listing the tasks without a verdict (unless
// allow_incomplete) or naming a judge that is also a ranked model (unless
// allow_overlap). Fit errors propagate. A hierarchical schedule whose final
// still holds placeholders is resolved from the phase-1 winners.
PipelineResult run_pipeline(const CampaignManifest& manifest,
                            const ComparisonSchedule& schedule,
                            std::span<const JudgmentRecord> records,
                            const PipelineOptions& options);

// Phase-1 winners (subset A, subset B) of a hierarchical schedule.
std::pair<std::string, std::string> phase_winners(
    const CampaignManifest& manifest, const ComparisonSchedule& schedule,
    std::span<const JudgmentRecord> records, const PipelineOptions& options);

// Markdown: tally table, W, ranking and fit diagnostics.
std::string render_report(const PipelineResult& result);

// Writes tallies.json, W.csv, ranking.json and report.md into `dir`.
void write_artifacts(const std::filesystem::path& dir,
                     const PipelineResult& result);

// ranking.json contents, byte for byte.
std::string ranking_document(const PipelineResult& result);

struct SimulatedAnnotator {
  std::string id;
  judging::SimulatedJudgeParams params;
};

struct SimulationConfig {
  std::size_t models = 10;
  std::size_t samples = 332;
  double ratio = 1.5;  // theta of consecutive planted ranks
  // Planted outcomes drawn per comparison from the BT probabilities; when
  // false the stronger model always wins.
  bool bernoulli = true;
  bool hierarchical = false;
  std::vector<SimulatedAnnotator> annotators;
  std::uint64_t seed = 0;
};

struct SimulatedCampaign {
  CampaignManifest manifest;
  std::vector<DescriptionPair> pairs;
  ComparisonSchedule schedule;
  std::vector<JudgmentRecord> records;
  std::vector<std::string> planted_order;  // strongest first
  std::map<std::string, double> strengths;
};

// Deterministic in the config: model strengths are a seeded permutation of
// ratio^k, every annotator votes once per scheduled comparison in a seeded
// presentation order, and timestamps come from a fixed clock.
SimulatedCampaign simulate_campaign(const SimulationConfig& config);

}  // namespace prefarena
