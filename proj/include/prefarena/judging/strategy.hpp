#pragma once

// Judge pipelines S1-S4:
//   S1  prefer (multimodal model, one call)
//   S2  describe -> prefer against the description (both on the multimodal model)
//   S3  describe (multimodal) -> prefer (external text model)
//   S4  describe (multimodal) -> reason (external) -> prefer from reasoning (external)

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/corpus.hpp"
#include "prefarena/judging/backend.hpp"
#include "prefarena/judging/templates.hpp"
#include "prefarena/metrics.hpp"

namespace prefarena::judging {

enum class Strategy { kS1, kS2, kS3, kS4 };

std::string_view to_string(Strategy s);
std::optional<Strategy> parse_strategy(std::string_view text);
std::size_t step_count(Strategy s);
bool uses_external(Strategy s);

struct ParseTrace {
  PreferenceLabel label = PreferenceLabel::kAbstain;
  // "verdict": a marker directly after a verdict cue ("I prefer ...");
  // "marker": the only marker class present; "conflict"/"none": Abstain.
  std::string rule;
  std::vector<std::string> matched;
};

// Case-insensitive scan for "description 1" / "description 2" / "tie" (and
// configured synonyms). Never throws: anything ambiguous is Abstain.
class PreferenceParser {
 public:
  PreferenceParser() : PreferenceParser(std::map<PreferenceLabel, std::vector<std::string>>{}) {}
  explicit PreferenceParser(
      std::map<PreferenceLabel, std::vector<std::string>> synonyms);

  ParseTrace parse(std::string_view text) const;

 private:
  std::vector<std::pair<std::string, PreferenceLabel>> phrases_;
};

PreferenceLabel parse_preference(std::string_view text);

struct RetryPolicy {
  std::uint32_t max_retries = 2;
  std::chrono::milliseconds backoff{200};  // doubled after every failure
};

struct StrategyConfig {
  Strategy strategy = Strategy::kS1;
  std::shared_ptr<JudgeBackend> primary;
  std::shared_ptr<JudgeBackend> external;
  TemplateSet templates = TemplateSet::defaults();
  RetryPolicy retry;
  PreferenceParser parser;
  std::string judge_id;  // defaults to "<primary>.<strategy>"

  std::string effective_judge_id() const;
  void validate() const;
};

struct StepTrace {
  StepRole role;
  std::string backend;
  std::string prompt;
  std::optional<std::string> media;
  std::string output;
  std::uint32_t attempts = 0;
  std::optional<std::string> error;
};

struct StrategyOutcome {
  JudgmentRecord record;
  std::vector<StepTrace> steps;
  ParseTrace parse;
};

nlohmann::json to_json(const StrategyOutcome& outcome);

struct RunOptions {
  std::uint32_t run = 0;
  // Media reference for the sample; defaults to the sample id.
  std::optional<std::string> media;
  std::function<Timestamp()> clock = now_utc;
};

// Executes the step chain for one pair in one presentation order. Backend
// failures are retried per policy and end in an Abstain record; a text-only
// backend handed media raises ConfigError.
StrategyOutcome run_strategy(const StrategyConfig& config,
                             const DescriptionPair& pair, Direction direction,
                             const RunOptions& options = {});

struct JudgeTask {
  const DescriptionPair* pair;
  Direction direction;
  std::uint32_t run;
};

// The forward/reversed x runs task list for every pair.
std::vector<JudgeTask> plan_tasks(std::span<const DescriptionPair> pairs,
                                  std::uint32_t forward_runs,
                                  std::uint32_t reversed_runs);

// Runs tasks with at most `concurrency` in flight. Output order matches
// task order regardless of completion order.
std::vector<StrategyOutcome> run_tasks(
    const StrategyConfig& config, std::span<const JudgeTask> tasks,
    unsigned concurrency,
    const std::function<std::optional<std::string>(const DescriptionPair&)>&
        media_for = {},
    const std::function<Timestamp()>& clock = now_utc);

// Majority vote over two forward and two reversed runs (runs 0 and 1) of
// one judge on one pair. A 2-2 split is Tie; abstentions are ignored and
// four abstentions give Abstain. Throws ValidationError naming any missing
// run.
PreferenceLabel combine_forward_reverse(std::span<const JudgmentRecord> records);

struct SweepEntry {
  Strategy strategy;
  MetricReport report;
  std::vector<JudgmentRecord> records;
};

struct SweepResult {
  std::vector<SweepEntry> entries;
  Strategy chosen = Strategy::kS1;
};

// Runs every applicable strategy (S3/S4 only with an external backend) in
// both orders over `pairs`, scores each against `truth` and picks the one
// with the highest two-class WAF (ties favour the simpler strategy).
SweepResult sweep_strategies(
    const StrategyConfig& base, std::span<const DescriptionPair> pairs,
    const std::map<std::string, PreferenceLabel>& truth, unsigned concurrency,
    const std::function<std::optional<std::string>(const DescriptionPair&)>&
        media_for = {},
    const std::function<Timestamp()>& clock = now_utc);

nlohmann::json to_json(const SweepResult& sweep);

}  // namespace prefarena::judging
