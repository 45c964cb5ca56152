#pragma once

// Per-sample majority voting, per-pair tallies and the binarized preference
// matrix W (1 = row model beats column model, 0 = loses, -1 = no direct
// comparison).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/corpus.hpp"

namespace prefarena {

// Plurality over First/Second/Tie with Abstain ignored. A tie for the top
// count resolves to Tie. Throws ValidationError when nothing but Abstain
// remains.
PreferenceLabel plurality(std::span<const PreferenceLabel> labels);

struct SampleVerdict {
  std::string pair_id;
  std::string sample;
  std::string model_a;
  std::string model_b;
  PreferenceLabel label;  // canonical order, never Abstain

  bool operator==(const SampleVerdict&) const = default;
};

// Majority vote over all records of one (pair, sample). Records may mix
// directions; they are canonicalized first.
SampleVerdict vote_per_sample(std::span<const JudgmentRecord> records);

struct PairTally {
  std::uint64_t wins_i = 0;
  std::uint64_t wins_j = 0;
  std::uint64_t ties = 0;

  std::uint64_t total() const { return wins_i + wins_j + ties; }
  bool operator==(const PairTally&) const = default;
};

PairTally swapped(const PairTally& t);

// Tally of one unordered model pair, oriented so model_i has the smaller
// index in the campaign's model order.
struct TallyEntry {
  std::string model_i;
  std::string model_j;
  PairTally tally;

  bool operator==(const TallyEntry&) const = default;
};

// Counts verdicts of a single model pair, oriented on the first verdict's
// model_a. Throws on an empty list or mixed pairs.
PairTally tally(std::span<const SampleVerdict> verdicts);

// Groups verdicts by model pair and tallies each, ordered by model index.
std::vector<TallyEntry> tally_all(std::span<const SampleVerdict> verdicts,
                                  std::span<const std::string> models);

struct BinaryOutcome {
  int w_ij;
  int w_ji;
  bool operator==(const BinaryOutcome&) const = default;
};

// Strictly more wins -> 1/0. Equal wins -> -1/-1 (treated as uncompared).
BinaryOutcome binarize(const PairTally& t);

class PreferenceMatrix {
 public:
  PreferenceMatrix() = default;
  // All entries -1.
  explicit PreferenceMatrix(std::vector<std::string> models);

  std::size_t size() const { return models_.size(); }
  const std::vector<std::string>& models() const { return models_; }
  int at(std::size_t i, std::size_t j) const { return cells_[i * size() + j]; }
  void set(std::size_t i, std::size_t j, int v) { cells_[i * size() + j] = v; }
  bool observed(std::size_t i, std::size_t j) const { return at(i, j) != -1; }
  std::size_t observed_pairs() const;

  // Checks the diagonal, value range and antisymmetry invariants.
  void validate() const;

  bool operator==(const PreferenceMatrix&) const = default;

 private:
  std::vector<std::string> models_;
  std::vector<int> cells_;
};

// Throws ValidationError on out-of-range models or conflicting duplicate
// tallies for the same pair.
PreferenceMatrix build_matrix(std::span<const TallyEntry> tallies,
                              std::span<const std::string> models);

// W.csv: header row of model ids, then one row of integers per model.
std::string to_csv(const PreferenceMatrix& w);
PreferenceMatrix matrix_from_csv(std::string_view text);
PreferenceMatrix load_matrix(const std::filesystem::path& path);

// tallies.json: {"models": [...], "pairs": {"a|b": {"wins_i","wins_j","ties"}}}
nlohmann::json tallies_to_json(std::span<const TallyEntry> tallies,
                               std::span<const std::string> models);
struct TallyFile {
  std::vector<std::string> models;
  std::vector<TallyEntry> tallies;
};
TallyFile tallies_from_json(const nlohmann::json& j);
TallyFile load_tallies(const std::filesystem::path& path);

struct VerdictCollection {
  std::vector<SampleVerdict> verdicts;  // sorted by pair_id
  std::vector<std::string> undecided;   // pairs whose records all abstained
};

// Reduces raw records to one verdict per pair. Each judge contributes one
// vote per pair: human judges (per `is_human`) use their latest run, machine
// judges the plurality of their runs; the judge votes are then combined by
// plurality.
VerdictCollection collect_verdicts(
    std::span<const JudgmentRecord> records,
    const std::function<bool(std::string_view)>& is_human);

}  // namespace prefarena
