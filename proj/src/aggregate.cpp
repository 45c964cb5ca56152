#include "prefarena/aggregate.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>

#include "prefarena/error.hpp"

namespace prefarena {

using nlohmann::json;

PreferenceLabel plurality(std::span<const PreferenceLabel> labels) {
  std::array<std::size_t, 3> counts{};
  for (auto l : labels) {
    if (l != PreferenceLabel::kAbstain) ++counts[static_cast<std::size_t>(l)];
  }
  const auto top = *std::max_element(counts.begin(), counts.end());
  if (top == 0) throw ValidationError("no non-abstain votes");
  if (std::count(counts.begin(), counts.end(), top) > 1)
    return PreferenceLabel::kTie;
  return static_cast<PreferenceLabel>(
      std::max_element(counts.begin(), counts.end()) - counts.begin());
}

SampleVerdict vote_per_sample(std::span<const JudgmentRecord> records) {
  if (records.empty()) throw ValidationError("no records to vote on");
  const auto& head = records.front();
  std::vector<PreferenceLabel> labels;
  labels.reserve(records.size());
  for (const auto& r : records) {
    if (r.pair_id != head.pair_id)
      throw ValidationError("vote_per_sample: records span pairs '" +
                            head.pair_id + "' and '" + r.pair_id + "'");
    labels.push_back(canonical_label(r));
  }
  try {
    return {head.pair_id, head.sample, head.model_a, head.model_b,
            plurality(labels)};
  } catch (const ValidationError&) {
    throw ValidationError("pair '" + head.pair_id + "': every record abstained");
  }
}

PairTally swapped(const PairTally& t) { return {t.wins_j, t.wins_i, t.ties}; }

PairTally tally(std::span<const SampleVerdict> verdicts) {
  if (verdicts.empty()) throw ValidationError("tally of an empty pair");
  const auto& a = verdicts.front().model_a;
  const auto& b = verdicts.front().model_b;
  PairTally t;
  for (const auto& v : verdicts) {
    PreferenceLabel label = v.label;
    if (v.model_a == b && v.model_b == a) {
      label = mirror(label);
    } else if (v.model_a != a || v.model_b != b) {
      throw ValidationError("tally: verdicts mix model pairs");
    }
    switch (label) {
      case PreferenceLabel::kFirst:
        ++t.wins_i;
        break;
      case PreferenceLabel::kSecond:
        ++t.wins_j;
        break;
      case PreferenceLabel::kTie:
        ++t.ties;
        break;
      case PreferenceLabel::kAbstain:
        throw ValidationError("verdict cannot be abstain");
    }
  }
  return t;
}

std::vector<TallyEntry> tally_all(std::span<const SampleVerdict> verdicts,
                                  std::span<const std::string> models) {
  auto index_of = [&](const std::string& id) {
    auto it = std::find(models.begin(), models.end(), id);
    if (it == models.end())
      throw ValidationError("verdict references unknown model '" + id + "'");
    return static_cast<std::size_t>(it - models.begin());
  };
  std::map<std::pair<std::size_t, std::size_t>, std::vector<SampleVerdict>>
      groups;
  for (const auto& v : verdicts) {
    auto i = index_of(v.model_a);
    auto j = index_of(v.model_b);
    groups[{std::min(i, j), std::max(i, j)}].push_back(v);
  }
  std::vector<TallyEntry> out;
  out.reserve(groups.size());
  for (const auto& [ij, group] : groups) {
    auto t = tally(group);
    // tally() orients on the first verdict; reorient on model index.
    if (group.front().model_a != models[ij.first]) t = swapped(t);
    out.push_back({models[ij.first], models[ij.second], t});
  }
  return out;
}

BinaryOutcome binarize(const PairTally& t) {
  if (t.wins_i > t.wins_j) return {1, 0};
  if (t.wins_i < t.wins_j) return {0, 1};
  return {-1, -1};
}

// ---------------------------------------------------------------------------

PreferenceMatrix::PreferenceMatrix(std::vector<std::string> models)
    : models_(std::move(models)), cells_(models_.size() * models_.size(), -1) {}

std::size_t PreferenceMatrix::observed_pairs() const {
  std::size_t n = 0;
  for (std::size_t i = 0; i < size(); ++i)
    for (std::size_t j = i + 1; j < size(); ++j) n += observed(i, j);
  return n;
}

void PreferenceMatrix::validate() const {
  const auto m = size();
  for (std::size_t i = 0; i < m; ++i) {
    if (at(i, i) != -1)
      throw ValidationError("W diagonal must be -1 (row " + models_[i] + ")");
    for (std::size_t j = 0; j < m; ++j) {
      const int v = at(i, j);
      if (v < -1 || v > 1)
        throw ValidationError("W entries must be in {-1, 0, 1}");
      if (i == j) continue;
      const int w = at(j, i);
      const bool ok = (v == -1 && w == -1) || (v == 1 && w == 0) ||
                      (v == 0 && w == 1);
      if (!ok)
        throw ValidationError("W not antisymmetric at (" + models_[i] + ", " +
                              models_[j] + ")");
    }
  }
}

PreferenceMatrix build_matrix(std::span<const TallyEntry> tallies,
                              std::span<const std::string> models) {
  PreferenceMatrix w(std::vector<std::string>(models.begin(), models.end()));
  std::map<std::pair<std::size_t, std::size_t>, PairTally> seen;
  for (const auto& e : tallies) {
    auto find = [&](const std::string& id) {
      auto it = std::find(models.begin(), models.end(), id);
      if (it == models.end())
        throw ValidationError("tally references unknown model '" + id + "'");
      return static_cast<std::size_t>(it - models.begin());
    };
    auto i = find(e.model_i);
    auto j = find(e.model_j);
    if (i == j) throw ValidationError("tally pairs a model with itself");
    PairTally t = e.tally;
    if (i > j) {
      std::swap(i, j);
      t = swapped(t);
    }
    auto [it, inserted] = seen.emplace(std::make_pair(i, j), t);
    if (!inserted) {
      if (it->second != t)
        throw ValidationError("conflicting tallies for pair (" + models[i] +
                              ", " + models[j] + ")");
      continue;
    }
    const auto b = binarize(t);
    w.set(i, j, b.w_ij);
    w.set(j, i, b.w_ji);
  }
  return w;
}

std::string to_csv(const PreferenceMatrix& w) {
  std::string out;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) out += ',';
    out += w.models()[i];
  }
  out += '\n';
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (j) out += ',';
      out += std::to_string(w.at(i, j));
    }
    out += '\n';
  }
  return out;
}

namespace {

std::vector<std::string> split_csv(const std::string& line) {
  std::vector<std::string> cells;
  std::stringstream ss(line);
  std::string cell;
  while (std::getline(ss, cell, ',')) {
    while (!cell.empty() && (cell.back() == '\r' || cell.back() == ' '))
      cell.pop_back();
    cells.push_back(cell);
  }
  if (!line.empty() && line.back() == ',') cells.emplace_back();
  return cells;
}

}  // namespace

PreferenceMatrix matrix_from_csv(std::string_view text) {
  std::stringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line)) throw ParseError("W.csv", 1, "missing header");
  auto models = split_csv(line);
  for (const auto& m : models)
    if (!is_valid_token(m)) throw ParseError("W.csv", 1, "bad model id '" + m + "'");
  PreferenceMatrix w(models);
  std::size_t row = 0;
  std::size_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line == "\r") continue;
    if (row >= w.size()) throw ParseError("W.csv", lineno, "too many rows");
    auto cells = split_csv(line);
    if (cells.size() != w.size())
      throw ParseError("W.csv", lineno, "expected " + std::to_string(w.size()) +
                                            " columns");
    for (std::size_t j = 0; j < cells.size(); ++j) {
      int v = 0;
      try {
        std::size_t pos = 0;
        v = std::stoi(cells[j], &pos);
        if (pos != cells[j].size()) throw std::invalid_argument("trailing");
      } catch (const std::exception&) {
        throw ParseError("W.csv", lineno, "bad entry '" + cells[j] + "'");
      }
      w.set(row, j, v);
    }
    ++row;
  }
  if (row != w.size())
    throw ParseError("W.csv", lineno, "expected " + std::to_string(w.size()) +
                                          " rows");
  w.validate();
  return w;
}

PreferenceMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return matrix_from_csv(ss.str());
}

json tallies_to_json(std::span<const TallyEntry> tallies,
                     std::span<const std::string> models) {
  json pairs = json::object();
  for (const auto& e : tallies) {
    pairs[e.model_i + "|" + e.model_j] = {{"wins_i", e.tally.wins_i},
                                          {"wins_j", e.tally.wins_j},
                                          {"ties", e.tally.ties}};
  }
  return json{{"models", std::vector<std::string>(models.begin(), models.end())},
              {"pairs", std::move(pairs)}};
}

TallyFile tallies_from_json(const json& j) {
  TallyFile f;
  try {
    f.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& [key, v] : j.at("pairs").items()) {
      const auto bar = key.find('|');
      if (bar == std::string::npos)
        throw ValidationError("tally key '" + key + "' is not 'a|b'");
      f.tallies.push_back({key.substr(0, bar), key.substr(bar + 1),
                           {v.at("wins_i").get<std::uint64_t>(),
                            v.at("wins_j").get<std::uint64_t>(),
                            v.at("ties").get<std::uint64_t>()}});
    }
  } catch (const json::exception& e) {
    throw ValidationError(std::string("tallies.json: ") + e.what());
  }
  return f;
}

TallyFile load_tallies(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  try {
    return tallies_from_json(json::parse(in));
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 1, e.what());
  }
}

VerdictCollection collect_verdicts(
    std::span<const JudgmentRecord> records,
    const std::function<bool(std::string_view)>& is_human) {
  const auto latest = latest_human_votes(records, is_human);
  // pair_id -> judge -> canonical labels
  std::map<std::string, std::map<std::string, std::vector<PreferenceLabel>>>
      grouped;
  std::map<std::string, const JudgmentRecord*> exemplar;
  for (const auto& r : latest) {
    grouped[r.pair_id][r.judge].push_back(canonical_label(r));
    exemplar.emplace(r.pair_id, &r);
  }
  VerdictCollection out;
  for (const auto& [pair_id, judges] : grouped) {
    std::vector<PreferenceLabel> votes;
    for (const auto& [judge, labels] : judges) {
      const bool any = std::any_of(labels.begin(), labels.end(), [](auto l) {
        return l != PreferenceLabel::kAbstain;
      });
      if (any) votes.push_back(plurality(labels));
    }
    if (votes.empty()) {
      out.undecided.push_back(pair_id);
      continue;
    }
    const auto* r = exemplar.at(pair_id);
    out.verdicts.push_back(
        {pair_id, r->sample, r->model_a, r->model_b, plurality(votes)});
  }
  return out;
}

}  // namespace prefarena
