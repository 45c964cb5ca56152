#pragma once

// Recognition metrics (accuracy, weighted-average F1), flip consistency,
// multi-run consistency and inter-annotator agreement.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/corpus.hpp"

namespace prefarena {

inline constexpr PreferenceLabel kTwoClasses[] = {PreferenceLabel::kFirst,
                                                  PreferenceLabel::kSecond};
inline constexpr PreferenceLabel kThreeClasses[] = {
    PreferenceLabel::kFirst, PreferenceLabel::kSecond, PreferenceLabel::kTie};

// Rows are truth classes, columns predicted classes plus one trailing
// column for predictions outside the class set.
class ConfusionMatrix {
 public:
  ConfusionMatrix(std::span<const PreferenceLabel> truth,
                  std::span<const PreferenceLabel> pred,
                  std::span<const PreferenceLabel> classes);

  std::size_t num_classes() const { return classes_.size(); }
  const std::vector<PreferenceLabel>& classes() const { return classes_; }
  std::size_t count(std::size_t truth_class, std::size_t pred_column) const {
    return cells_[truth_class * (num_classes() + 1) + pred_column];
  }
  std::size_t out_of_class(std::size_t truth_class) const {
    return count(truth_class, num_classes());
  }
  std::size_t support(std::size_t c) const;
  std::size_t predicted(std::size_t c) const;
  std::size_t total() const { return total_; }

 private:
  std::vector<PreferenceLabel> classes_;
  std::vector<std::size_t> cells_;
  std::size_t total_ = 0;
};

// Fraction of positions where pred equals truth.
double accuracy(std::span<const PreferenceLabel> truth,
                std::span<const PreferenceLabel> pred);

// Support-weighted mean of per-class F1. Predictions outside `classes`
// count against precision of no class and are never correct.
double waf(std::span<const PreferenceLabel> truth,
           std::span<const PreferenceLabel> pred,
           std::span<const PreferenceLabel> classes);

struct LabelView {
  std::vector<PreferenceLabel> truth;
  std::vector<PreferenceLabel> pred;
  std::vector<std::size_t> positions;  // indices kept from the input
};

// Drops positions whose truth is Tie. Predicted ties stay (and score wrong).
LabelView two_class_view(std::span<const PreferenceLabel> truth,
                         std::span<const PreferenceLabel> pred);

struct FlipResult {
  std::optional<double> value;  // absent when nothing could be paired
  std::size_t paired = 0;
  std::size_t consistent = 0;
  std::vector<RecordKey> unpaired;
};

// Pairs records by (pair, judge, run) across the two directions and
// measures canonical agreement. Abstain on either side is inconsistent.
FlipResult flip_consistency(std::span<const JudgmentRecord> forward,
                            std::span<const JudgmentRecord> reversed);

// Fraction of identical labels between two runs aligned on
// (pair, judge, direction). Throws ValidationError if the key sets differ.
double multi_run_consistency(std::span<const JudgmentRecord> run_a,
                             std::span<const JudgmentRecord> run_b);

struct AnnotatorAgreement {
  std::string annotator_a;
  std::string annotator_b;
  std::size_t co_annotated = 0;
  std::size_t agreed = 0;
  std::optional<double> agreement;
};

struct ConsistencyReport {
  bool include_ties = true;
  std::vector<AnnotatorAgreement> pairs;
  double weighted_mean = 0.0;    // weighted by co-annotated count
  double unweighted_mean = 0.0;  // over annotator pairs with overlap
};

// Agreement between every pair of annotators on the samples both labeled
// (latest run per annotator). Without ties, samples either annotator
// labeled Tie are dropped first.
ConsistencyReport inter_annotator_consistency(
    std::span<const JudgmentRecord> records, bool include_ties);

nlohmann::json to_json(const ConsistencyReport& report);

struct ClassScores {
  std::optional<double> waf;
  std::optional<double> acc;
  std::optional<double> waf_std;  // across runs, when there are several
  std::size_t n = 0;
};

struct MetricReport {
  std::string judge;
  ClassScores two_class;
  ClassScores three_class;
  std::optional<double> flip_consistency;
  std::size_t flip_pairs = 0;
  std::size_t flip_unpaired = 0;
  std::optional<double> multi_run_consistency;
  std::size_t multi_run_items = 0;
  std::size_t total = 0;    // records of this judge with a truth label
  std::size_t abstain = 0;  // of those, how many abstained

  double abstain_rate() const {
    return total ? double(abstain) / double(total) : 0.0;
  }
};

// Scores one judge's records against gold canonical labels (pair_id ->
// label). Recognition uses forward-order records of every run; abstentions
// are left out of WAF/ACC and counted separately. Multi-run consistency
// compares runs 0 and 1 when both exist.
MetricReport evaluate_judge(std::string judge,
                            std::span<const JudgmentRecord> records,
                            const std::map<std::string, PreferenceLabel>& truth);

nlohmann::json to_json(const MetricReport& report);
MetricReport metric_report_from_json(const nlohmann::json& j);

// truth.jsonl: {"pair_id": ..., "label": "first|second|tie"} per line.
std::map<std::string, PreferenceLabel> load_truth(
    const std::filesystem::path& path);
void save_truth(const std::filesystem::path& path,
                const std::map<std::string, PreferenceLabel>& truth);

}  // namespace prefarena
