#include "prefarena/judging/ensemble.hpp"

#include <algorithm>
#include <set>

#include "prefarena/judging/strategy.hpp"

namespace prefarena::judging {

void EnsembleConfig::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(recognition_threshold) || !unit(flip_threshold))
    throw ConfigError("ensemble thresholds must lie in [0, 1]");
  if (top_n && *top_n == 0) throw ConfigError("top_n must be at least 1");
}

std::vector<std::string> filter_judges(
    const std::map<std::string, MetricReport>& reports,
    const EnsembleConfig& config) {
  config.validate();
  auto clears = [&](const std::optional<double>& v, double threshold) {
    if (!v) return false;
    return config.inclusive ? *v >= threshold : *v > threshold;
  };
  std::vector<std::pair<double, std::string>> kept;
  for (const auto& [judge, report] : reports) {
    if (clears(report.two_class.waf, config.recognition_threshold) &&
        clears(report.flip_consistency, config.flip_threshold))
      kept.emplace_back(*report.two_class.waf, judge);
  }
  if (kept.empty())
    throw ValidationError("no judge clears both ensemble thresholds");
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;
  });
  if (config.top_n && kept.size() > *config.top_n) kept.resize(*config.top_n);
  std::vector<std::string> out;
  for (auto& k : kept) out.push_back(std::move(k.second));
  return out;
}

PreferenceLabel ensemble_vote(std::span<const PreferenceLabel> verdicts) {
  return plurality(verdicts);
}

std::vector<JudgmentRecord> build_ensemble_records(
    std::span<const JudgmentRecord> records,
    std::span<const std::string> judges, const std::string& ensemble_id,
    Timestamp ts) {
  if (judges.empty()) throw ValidationError("ensemble needs at least one judge");
  if (!is_valid_token(ensemble_id))
    throw ValidationError("invalid ensemble id '" + ensemble_id + "'");
  const std::set<std::string> selected(judges.begin(), judges.end());

  // pair_id -> judge -> records
  std::map<std::string, std::map<std::string, std::vector<JudgmentRecord>>>
      grouped;
  for (const auto& r : records)
    if (selected.count(r.judge)) grouped[r.pair_id][r.judge].push_back(r);

  std::vector<JudgmentRecord> out;
  for (const auto& [pair_id, by_judge] : grouped) {
    std::vector<PreferenceLabel> votes;
    for (const auto& [judge, recs] : by_judge) {
      std::set<std::pair<Direction, std::uint32_t>> present;
      for (const auto& r : recs) present.emplace(r.direction, r.run);
      const bool four = present.size() == 4 && recs.size() == 4 &&
                        std::all_of(recs.begin(), recs.end(),
                                    [](const auto& r) { return r.run <= 1; });
      if (four) {
        votes.push_back(combine_forward_reverse(recs));
        continue;
      }
      std::vector<PreferenceLabel> labels;
      for (const auto& r : recs) labels.push_back(canonical_label(r));
      const bool all_abstain =
          std::all_of(labels.begin(), labels.end(),
                      [](auto l) { return l == PreferenceLabel::kAbstain; });
      votes.push_back(all_abstain ? PreferenceLabel::kAbstain
                                  : plurality(labels));
    }
    const JudgmentRecord& first = by_judge.begin()->second.front();
    JudgmentRecord e;
    e.pair_id = pair_id;
    e.sample = first.sample;
    e.model_a = first.model_a;
    e.model_b = first.model_b;
    e.judge = ensemble_id;
    e.direction = Direction::kForward;
    e.run = 0;
    e.label = std::all_of(votes.begin(), votes.end(),
                          [](auto l) { return l == PreferenceLabel::kAbstain; })
                  ? PreferenceLabel::kAbstain
                  : ensemble_vote(votes);
    e.ts = ts;
    out.push_back(std::move(e));
  }
  return out;
}

}  // namespace prefarena::judging
