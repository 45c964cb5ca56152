#include "prefarena/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "prefarena/error.hpp"

namespace prefarena {

using nlohmann::json;

namespace {

void check_aligned(std::span<const PreferenceLabel> truth,
                   std::span<const PreferenceLabel> pred) {
  if (truth.size() != pred.size())
    throw ValidationError("truth and prediction lengths differ (" +
                          std::to_string(truth.size()) + " vs " +
                          std::to_string(pred.size()) + ")");
  if (truth.empty()) throw ValidationError("no labels to score");
}

}  // namespace

ConfusionMatrix::ConfusionMatrix(std::span<const PreferenceLabel> truth,
                                 std::span<const PreferenceLabel> pred,
                                 std::span<const PreferenceLabel> classes)
    : classes_(classes.begin(), classes.end()),
      cells_(classes.size() * (classes.size() + 1), 0) {
  check_aligned(truth, pred);
  auto column = [&](PreferenceLabel l) {
    auto it = std::find(classes_.begin(), classes_.end(), l);
    return static_cast<std::size_t>(it - classes_.begin());
  };
  for (std::size_t k = 0; k < truth.size(); ++k) {
    const auto row = column(truth[k]);
    if (row == num_classes())
      throw ValidationError("truth label '" + std::string(to_string(truth[k])) +
                            "' is outside the scored classes");
    ++cells_[row * (num_classes() + 1) + column(pred[k])];
    ++total_;
  }
}

std::size_t ConfusionMatrix::support(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t p = 0; p <= num_classes(); ++p) s += count(c, p);
  return s;
}

std::size_t ConfusionMatrix::predicted(std::size_t c) const {
  std::size_t s = 0;
  for (std::size_t t = 0; t < num_classes(); ++t) s += count(t, c);
  return s;
}

double accuracy(std::span<const PreferenceLabel> truth,
                std::span<const PreferenceLabel> pred) {
  check_aligned(truth, pred);
  std::size_t hits = 0;
  for (std::size_t k = 0; k < truth.size(); ++k) hits += truth[k] == pred[k];
  return double(hits) / double(truth.size());
}

double waf(std::span<const PreferenceLabel> truth,
           std::span<const PreferenceLabel> pred,
           std::span<const PreferenceLabel> classes) {
  const ConfusionMatrix cm(truth, pred, classes);
  double score = 0.0;
  for (std::size_t c = 0; c < cm.num_classes(); ++c) {
    const auto support = cm.support(c);
    if (support == 0) continue;
    const auto tp = cm.count(c, c);
    // F1 = 2PR / (P + R) = 2TP / (predicted + support); zero when both are.
    const double f1 = double(2 * tp) / double(cm.predicted(c) + support);
    score += double(support) * f1;
  }
  score /= double(cm.total());
  return score;
}

LabelView two_class_view(std::span<const PreferenceLabel> truth,
                         std::span<const PreferenceLabel> pred) {
  if (truth.size() != pred.size())
    throw ValidationError("truth and prediction lengths differ");
  LabelView view;
  for (std::size_t k = 0; k < truth.size(); ++k) {
    if (truth[k] == PreferenceLabel::kTie) continue;
    view.truth.push_back(truth[k]);
    view.pred.push_back(pred[k]);
    view.positions.push_back(k);
  }
  return view;
}

FlipResult flip_consistency(std::span<const JudgmentRecord> forward,
                            std::span<const JudgmentRecord> reversed) {
  struct Slot {
    const JudgmentRecord* fwd = nullptr;
    const JudgmentRecord* rev = nullptr;
  };
  std::map<std::tuple<std::string, std::string, std::uint32_t>, Slot> slots;
  auto add = [&](const JudgmentRecord& r) {
    auto& slot = slots[{r.pair_id, r.judge, r.run}];
    auto& dst = r.direction == Direction::kForward ? slot.fwd : slot.rev;
    if (dst) throw DuplicateKeyError("flip_consistency: duplicate record for '" +
                                     r.pair_id + "'");
    dst = &r;
  };
  for (const auto& r : forward) add(r);
  for (const auto& r : reversed) add(r);

  FlipResult out;
  for (const auto& [key, slot] : slots) {
    if (!slot.fwd || !slot.rev) {
      const auto* r = slot.fwd ? slot.fwd : slot.rev;
      out.unpaired.push_back(key_of(*r));
      continue;
    }
    ++out.paired;
    const auto a = canonical_label(*slot.fwd);
    const auto b = canonical_label(*slot.rev);
    if (a == b && a != PreferenceLabel::kAbstain) ++out.consistent;
  }
  if (out.paired) out.value = double(out.consistent) / double(out.paired);
  return out;
}

double multi_run_consistency(std::span<const JudgmentRecord> run_a,
                             std::span<const JudgmentRecord> run_b) {
  using Key = std::tuple<std::string, std::string, Direction>;
  auto index = [](std::span<const JudgmentRecord> run) {
    std::map<Key, PreferenceLabel> out;
    for (const auto& r : run) {
      if (!out.emplace(Key{r.pair_id, r.judge, r.direction}, r.label).second)
        throw ValidationError("multi_run_consistency: duplicate item '" +
                              r.pair_id + "' in one run");
    }
    return out;
  };
  const auto a = index(run_a);
  const auto b = index(run_b);
  if (a.empty()) throw ValidationError("multi_run_consistency: empty runs");
  if (a.size() != b.size())
    throw ValidationError("multi_run_consistency: runs cover different items");
  std::size_t same = 0;
  for (const auto& [key, label] : a) {
    auto it = b.find(key);
    if (it == b.end())
      throw ValidationError("multi_run_consistency: item '" + std::get<0>(key) +
                            "' missing from the second run");
    same += it->second == label;
  }
  return double(same) / double(a.size());
}

ConsistencyReport inter_annotator_consistency(
    std::span<const JudgmentRecord> records, bool include_ties) {
  const auto latest =
      latest_human_votes(records, [](std::string_view) { return true; });
  std::map<std::string, std::map<std::string, PreferenceLabel>> by_annotator;
  for (const auto& r : latest) {
    if (r.label == PreferenceLabel::kAbstain)
      throw ValidationError("annotator '" + r.judge + "' abstained on '" +
                            r.pair_id + "'");
    by_annotator[r.judge][r.pair_id] = canonical_label(r);
  }
  ConsistencyReport report;
  report.include_ties = include_ties;
  std::size_t weight = 0, agreed = 0, with_overlap = 0;
  double sum = 0.0;
  for (auto a = by_annotator.begin(); a != by_annotator.end(); ++a) {
    for (auto b = std::next(a); b != by_annotator.end(); ++b) {
      AnnotatorAgreement pair;
      pair.annotator_a = a->first;
      pair.annotator_b = b->first;
      for (const auto& [pair_id, la] : a->second) {
        auto it = b->second.find(pair_id);
        if (it == b->second.end()) continue;
        const auto lb = it->second;
        if (!include_ties &&
            (la == PreferenceLabel::kTie || lb == PreferenceLabel::kTie))
          continue;
        ++pair.co_annotated;
        pair.agreed += la == lb;
      }
      if (pair.co_annotated) {
        pair.agreement = double(pair.agreed) / double(pair.co_annotated);
        weight += pair.co_annotated;
        agreed += pair.agreed;
        sum += *pair.agreement;
        ++with_overlap;
      }
      report.pairs.push_back(std::move(pair));
    }
  }
  if (with_overlap == 0)
    throw ValidationError("no annotator pair shares a scored sample");
  report.weighted_mean = double(agreed) / double(weight);
  report.unweighted_mean = sum / double(with_overlap);
  return report;
}

json to_json(const ConsistencyReport& report) {
  json pairs = json::array();
  for (const auto& p : report.pairs) {
    pairs.push_back({{"annotator_a", p.annotator_a},
                     {"annotator_b", p.annotator_b},
                     {"co_annotated", p.co_annotated},
                     {"agreed", p.agreed},
                     {"agreement", p.agreement ? json(*p.agreement) : json()}});
  }
  return json{{"include_ties", report.include_ties},
              {"weighted_mean", report.weighted_mean},
              {"unweighted_mean", report.unweighted_mean},
              {"pairs", std::move(pairs)}};
}

// ---------------------------------------------------------------------------

namespace {

struct Scored {
  std::vector<PreferenceLabel> truth, pred;
};

ClassScores score(const std::map<std::uint32_t, Scored>& per_run,
                  bool two_class) {
  ClassScores out;
  Scored pooled;
  std::vector<double> run_waf;
  const std::span<const PreferenceLabel> classes =
      two_class ? std::span<const PreferenceLabel>(kTwoClasses)
                : std::span<const PreferenceLabel>(kThreeClasses);
  for (const auto& [run, s] : per_run) {
    std::vector<PreferenceLabel> t = s.truth, p = s.pred;
    if (two_class) {
      auto v = two_class_view(t, p);
      t = std::move(v.truth);
      p = std::move(v.pred);
    }
    if (!t.empty()) run_waf.push_back(waf(t, p, classes));
    pooled.truth.insert(pooled.truth.end(), t.begin(), t.end());
    pooled.pred.insert(pooled.pred.end(), p.begin(), p.end());
  }
  out.n = pooled.truth.size();
  if (out.n) {
    out.waf = waf(pooled.truth, pooled.pred, classes);
    out.acc = accuracy(pooled.truth, pooled.pred);
  }
  if (run_waf.size() >= 2) {
    double mean = 0.0;
    for (auto w : run_waf) mean += w;
    mean /= double(run_waf.size());
    double var = 0.0;
    for (auto w : run_waf) var += (w - mean) * (w - mean);
    out.waf_std = std::sqrt(var / double(run_waf.size() - 1));
  }
  return out;
}

json scores_json(const ClassScores& s) {
  return json{{"waf", s.waf ? json(*s.waf) : json()},
              {"acc", s.acc ? json(*s.acc) : json()},
              {"waf_std", s.waf_std ? json(*s.waf_std) : json()},
              {"n", s.n}};
}

std::optional<double> opt_double(const json& j, const char* key) {
  if (!j.contains(key) || j.at(key).is_null()) return std::nullopt;
  return j.at(key).get<double>();
}

ClassScores scores_from_json(const json& j) {
  ClassScores s;
  s.waf = opt_double(j, "waf");
  s.acc = opt_double(j, "acc");
  s.waf_std = opt_double(j, "waf_std");
  s.n = j.value("n", std::size_t{0});
  return s;
}

}  // namespace

MetricReport evaluate_judge(std::string judge,
                            std::span<const JudgmentRecord> records,
                            const std::map<std::string, PreferenceLabel>& truth) {
  MetricReport report;
  report.judge = std::move(judge);
  std::vector<JudgmentRecord> mine;
  for (const auto& r : records)
    if (r.judge == report.judge) mine.push_back(r);

  std::map<std::uint32_t, Scored> per_run;
  for (const auto& r : mine) {
    auto it = truth.find(r.pair_id);
    if (it == truth.end()) continue;
    ++report.total;
    if (r.label == PreferenceLabel::kAbstain) {
      ++report.abstain;
      continue;
    }
    if (r.direction != Direction::kForward) continue;
    if (it->second == PreferenceLabel::kAbstain)
      throw ValidationError("gold label for '" + r.pair_id + "' is abstain");
    per_run[r.run].truth.push_back(it->second);
    per_run[r.run].pred.push_back(r.label);
  }
  report.two_class = score(per_run, true);
  report.three_class = score(per_run, false);

  std::vector<JudgmentRecord> fwd, rev;
  for (const auto& r : mine)
    (r.direction == Direction::kForward ? fwd : rev).push_back(r);
  const auto flip = flip_consistency(fwd, rev);
  report.flip_consistency = flip.value;
  report.flip_pairs = flip.paired;
  report.flip_unpaired = flip.unpaired.size();

  std::vector<JudgmentRecord> run0, run1;
  for (const auto& r : mine) {
    if (r.run == 0) run0.push_back(r);
    if (r.run == 1) run1.push_back(r);
  }
  if (!run0.empty() && !run1.empty()) {
    // Compare only the items both runs cover.
    std::set<std::tuple<std::string, Direction>> k0, k1;
    for (const auto& r : run0) k0.emplace(r.pair_id, r.direction);
    for (const auto& r : run1) k1.emplace(r.pair_id, r.direction);
    auto keep = [](std::vector<JudgmentRecord>& v, const auto& other) {
      std::erase_if(v, [&](const JudgmentRecord& r) {
        return !other.count({r.pair_id, r.direction});
      });
    };
    keep(run0, k1);
    keep(run1, k0);
    if (!run0.empty()) {
      report.multi_run_consistency = multi_run_consistency(run0, run1);
      report.multi_run_items = run0.size();
    }
  }
  return report;
}

json to_json(const MetricReport& r) {
  return json{
      {"judge", r.judge},
      {"two_class", scores_json(r.two_class)},
      {"three_class", scores_json(r.three_class)},
      {"flip_consistency",
       {{"value", r.flip_consistency ? json(*r.flip_consistency) : json()},
        {"pairs", r.flip_pairs},
        {"unpaired", r.flip_unpaired}}},
      {"multi_run_consistency",
       {{"value",
         r.multi_run_consistency ? json(*r.multi_run_consistency) : json()},
        {"items", r.multi_run_items}}},
      {"abstain", {{"count", r.abstain}, {"rate", r.abstain_rate()}}},
      {"total", r.total},
      {"rules",
       "two-class drops gold ties and keeps predicted ties as errors; "
       "abstentions are excluded from WAF/ACC and count as flip "
       "inconsistencies"}};
}

MetricReport metric_report_from_json(const json& j) {
  MetricReport r;
  try {
    r.judge = j.at("judge").get<std::string>();
    r.two_class = scores_from_json(j.at("two_class"));
    r.three_class = scores_from_json(j.value("three_class", json::object()));
    if (j.contains("flip_consistency")) {
      const auto& f = j.at("flip_consistency");
      r.flip_consistency = opt_double(f, "value");
      r.flip_pairs = f.value("pairs", std::size_t{0});
      r.flip_unpaired = f.value("unpaired", std::size_t{0});
    }
    if (j.contains("multi_run_consistency")) {
      const auto& m = j.at("multi_run_consistency");
      r.multi_run_consistency = opt_double(m, "value");
      r.multi_run_items = m.value("items", std::size_t{0});
    }
    if (j.contains("abstain"))
      r.abstain = j.at("abstain").value("count", std::size_t{0});
    r.total = j.value("total", std::size_t{0});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("metrics report: ") + e.what());
  }
  return r;
}

std::map<std::string, PreferenceLabel> load_truth(
    const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::map<std::string, PreferenceLabel> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      const auto j = json::parse(line);
      const auto id = j.at("pair_id").get<std::string>();
      const auto label = parse_label(j.at("label").get<std::string>());
      if (!label || *label == PreferenceLabel::kAbstain)
        throw ParseError(path.string(), lineno, "bad gold label");
      if (!out.emplace(id, *label).second)
        throw ParseError(path.string(), lineno, "duplicate pair '" + id + "'");
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
  }
  return out;
}

void save_truth(const std::filesystem::path& path,
                const std::map<std::string, PreferenceLabel>& truth) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& [id, label] : truth)
    out << json{{"pair_id", id}, {"label", to_string(label)}}.dump() << '\n';
}

}  // namespace prefarena
