#pragma once

// Comparison schedules: a full round robin, or two seeded subsets played as
// round robins followed by a final between the subset winners.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace prefarena {

enum class Phase { kSingle, kSubsetA, kSubsetB, kFinal };

std::string_view to_string(Phase phase);
std::optional<Phase> parse_phase(std::string_view text);

// Final-phase tasks are scheduled before phase 1 is played; their model
// slots hold these placeholders until the subset winners are known.
inline constexpr std::string_view kWinnerA = "@winner-subset-a";
inline constexpr std::string_view kWinnerB = "@winner-subset-b";

struct ComparisonTask {
  Phase phase = Phase::kSingle;
  std::string model_i;
  std::string model_j;
  std::string sample;

  bool operator==(const ComparisonTask&) const = default;
};

struct ComparisonSchedule {
  std::vector<ComparisonTask> tasks;
  std::uint64_t seed = 0;
  // Subset membership, hierarchical plans only (campaign model order).
  std::vector<std::string> subset_a;
  std::vector<std::string> subset_b;

  bool hierarchical() const { return !subset_a.empty(); }
  bool final_resolved() const;
  std::vector<ComparisonTask> phase_tasks(Phase phase) const;

  bool operator==(const ComparisonSchedule&) const = default;
};

// Every unordered pair (i < j in `models` order) on every sample; pairs are
// the outer loop. Throws ValidationError for fewer than 2 models, no
// samples, or duplicate ids.
ComparisonSchedule round_robin(std::span<const std::string> models,
                               std::span<const std::string> samples);

// Seeded shuffle into subsets of ceil(M/2) and floor(M/2), a round robin
// inside each, and N placeholder final tasks. Throws for M < 4.
ComparisonSchedule hierarchical(std::span<const std::string> models,
                                std::span<const std::string> samples,
                                std::uint64_t seed);

// Fills in the final's placeholders. `models` fixes the orientation (the
// earlier model becomes model_i).
ComparisonSchedule resolve_final(const ComparisonSchedule& schedule,
                                 const std::string& winner_a,
                                 const std::string& winner_b,
                                 std::span<const std::string> models);

struct CostReport {
  std::uint64_t total_tasks = 0;
  std::string formula;
  // C(M/2,2)*N + N, which counts only one subset's round robin; set when
  // it differs from the count actually scheduled.
  std::optional<std::uint64_t> shortcut_formula_value;
};

std::uint64_t choose2(std::uint64_t n);
CostReport round_robin_cost(std::uint64_t models, std::uint64_t samples);
CostReport hierarchical_cost(std::uint64_t models, std::uint64_t samples);
// Hierarchical schedules must match their closed form (ValidationError
// otherwise); a partial single-phase schedule reports formula "custom".
CostReport cost_of(const ComparisonSchedule& schedule);

nlohmann::json to_json(const CostReport& cost);

// schedule.jsonl: {"phase", "model_i", "model_j", "sample", "seed"} per
// line. Subset membership is recovered from the phase tags.
std::string schedule_to_jsonl(const ComparisonSchedule& schedule);
ComparisonSchedule schedule_from_jsonl(std::string_view text);
void save_schedule(const std::filesystem::path& path,
                   const ComparisonSchedule& schedule);
ComparisonSchedule load_schedule(const std::filesystem::path& path);

}  // namespace prefarena
