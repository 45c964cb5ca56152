#pragma once

// Model-based crowdsourcing: keep judges that clear both the recognition and
// the flip-consistency threshold, then majority-vote the best few.

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "prefarena/aggregate.hpp"
#include "prefarena/metrics.hpp"

namespace prefarena::judging {

struct EnsembleConfig {
  double recognition_threshold = 0.60;  // on two-class WAF
  double flip_threshold = 0.60;
  std::optional<std::size_t> top_n;  // all survivors when unset
  // Survive at exactly the threshold instead of strictly above it.
  bool inclusive = false;

  void validate() const;
};

// Survivors sorted by two-class WAF (descending, ties by judge id), cut to
// top_n. Throws ValidationError when nobody survives.
std::vector<std::string> filter_judges(
    const std::map<std::string, MetricReport>& reports,
    const EnsembleConfig& config);

// Plurality over one verdict per selected judge; Abstains are ignored.
// Throws ValidationError when every verdict is Abstain.
PreferenceLabel ensemble_vote(std::span<const PreferenceLabel> verdicts);

// One verdict per judge per pair, then the ensemble vote across `judges`.
// A judge with both orders of runs 0 and 1 is reduced through
// combine_forward_reverse, otherwise through the plurality of its canonical
// labels. The result is one forward run-0 record per pair under
// `ensemble_id`; pairs where every judge abstained come back as Abstain.
std::vector<JudgmentRecord> build_ensemble_records(
    std::span<const JudgmentRecord> records,
    std::span<const std::string> judges, const std::string& ensemble_id,
    Timestamp ts);

}  // namespace prefarena::judging
