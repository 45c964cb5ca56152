#include "prefarena/tournament.hpp"

#include <algorithm>
#include <fstream>
#include <random>
#include <set>
#include <sstream>

#include "prefarena/error.hpp"

namespace prefarena {

using nlohmann::json;

std::string_view to_string(Phase phase) {
  switch (phase) {
    case Phase::kSingle:
      return "single";
    case Phase::kSubsetA:
      return "subset-a";
    case Phase::kSubsetB:
      return "subset-b";
    case Phase::kFinal:
      return "final";
  }
  return "single";
}

std::optional<Phase> parse_phase(std::string_view text) {
  for (auto p : {Phase::kSingle, Phase::kSubsetA, Phase::kSubsetB, Phase::kFinal})
    if (to_string(p) == text) return p;
  return std::nullopt;
}

bool ComparisonSchedule::final_resolved() const {
  return std::none_of(tasks.begin(), tasks.end(), [](const auto& t) {
    return t.phase == Phase::kFinal && t.model_i.front() == '@';
  });
}

std::vector<ComparisonTask> ComparisonSchedule::phase_tasks(Phase phase) const {
  std::vector<ComparisonTask> out;
  for (const auto& t : tasks)
    if (t.phase == phase) out.push_back(t);
  return out;
}

namespace {

void check_ids(std::span<const std::string> ids, const char* what) {
  std::set<std::string> seen;
  for (const auto& id : ids) {
    if (id.empty() || id.front() == '@')
      throw ValidationError(std::string("invalid ") + what + " id '" + id + "'");
    if (!seen.insert(id).second)
      throw ValidationError(std::string("duplicate ") + what + " '" + id + "'");
  }
}

void append_round_robin(std::vector<ComparisonTask>& out, Phase phase,
                        std::span<const std::string> models,
                        std::span<const std::string> samples) {
  for (std::size_t i = 0; i < models.size(); ++i)
    for (std::size_t j = i + 1; j < models.size(); ++j)
      for (const auto& s : samples)
        out.push_back({phase, models[i], models[j], s});
}

// Uniform index in [0, n) from a 64-bit engine, by rejection, so the
// shuffle does not depend on the standard library's distributions.
std::size_t uniform_index(std::mt19937_64& rng, std::size_t n) {
  const std::uint64_t bound = n;
  const std::uint64_t limit = UINT64_MAX - UINT64_MAX % bound;
  std::uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return std::size_t(x % bound);
}

}  // namespace

ComparisonSchedule round_robin(std::span<const std::string> models,
                               std::span<const std::string> samples) {
  if (models.size() < 2)
    throw ValidationError("round robin needs at least 2 models");
  if (samples.empty()) throw ValidationError("round robin needs samples");
  check_ids(models, "model");
  check_ids(samples, "sample");
  ComparisonSchedule s;
  s.tasks.reserve(choose2(models.size()) * samples.size());
  append_round_robin(s.tasks, Phase::kSingle, models, samples);
  return s;
}

ComparisonSchedule hierarchical(std::span<const std::string> models,
                                std::span<const std::string> samples,
                                std::uint64_t seed) {
  if (models.size() < 4)
    throw ValidationError("hierarchical schedule needs at least 4 models");
  if (samples.empty()) throw ValidationError("hierarchical schedule needs samples");
  check_ids(models, "model");
  check_ids(samples, "sample");

  std::vector<std::size_t> order(models.size());
  for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
  std::mt19937_64 rng(seed);
  for (std::size_t k = order.size() - 1; k > 0; --k)
    std::swap(order[k], order[uniform_index(rng, k + 1)]);

  const std::size_t size_a = (models.size() + 1) / 2;
  std::vector<std::size_t> a(order.begin(), order.begin() + long(size_a));
  std::vector<std::size_t> b(order.begin() + long(size_a), order.end());
  std::sort(a.begin(), a.end());
  std::sort(b.begin(), b.end());

  ComparisonSchedule s;
  s.seed = seed;
  for (auto k : a) s.subset_a.push_back(models[k]);
  for (auto k : b) s.subset_b.push_back(models[k]);
  append_round_robin(s.tasks, Phase::kSubsetA, s.subset_a, samples);
  append_round_robin(s.tasks, Phase::kSubsetB, s.subset_b, samples);
  for (const auto& sample : samples)
    s.tasks.push_back({Phase::kFinal, std::string(kWinnerA),
                       std::string(kWinnerB), sample});
  return s;
}

ComparisonSchedule resolve_final(const ComparisonSchedule& schedule,
                                 const std::string& winner_a,
                                 const std::string& winner_b,
                                 std::span<const std::string> models) {
  if (!schedule.hierarchical())
    throw ValidationError("resolve_final: not a hierarchical schedule");
  auto in = [](const std::vector<std::string>& v, const std::string& m) {
    return std::find(v.begin(), v.end(), m) != v.end();
  };
  if (!in(schedule.subset_a, winner_a) || !in(schedule.subset_b, winner_b))
    throw ValidationError("resolve_final: winners must come from their subsets");
  auto index = [&](const std::string& m) {
    return std::find(models.begin(), models.end(), m) - models.begin();
  };
  const bool a_first = index(winner_a) < index(winner_b);
  ComparisonSchedule out = schedule;
  for (auto& t : out.tasks) {
    if (t.phase != Phase::kFinal) continue;
    t.model_i = a_first ? winner_a : winner_b;
    t.model_j = a_first ? winner_b : winner_a;
  }
  return out;
}

std::uint64_t choose2(std::uint64_t n) { return n < 2 ? 0 : n * (n - 1) / 2; }

CostReport round_robin_cost(std::uint64_t models, std::uint64_t samples) {
  return {choose2(models) * samples, "C(M,2)*N", std::nullopt};
}

CostReport hierarchical_cost(std::uint64_t models, std::uint64_t samples) {
  const std::uint64_t a = (models + 1) / 2, b = models / 2;
  CostReport c;
  c.total_tasks = (choose2(a) + choose2(b)) * samples + samples;
  c.formula = models % 2 == 0 ? "2*C(M/2,2)*N + N"
                              : "(C(ceil(M/2),2) + C(floor(M/2),2))*N + N";
  // The shortcut counts one subset only: C(M/2,2)*N + N.
  const std::uint64_t shortcut = choose2(a) * samples + samples;
  if (shortcut != c.total_tasks) c.shortcut_formula_value = shortcut;
  return c;
}

CostReport cost_of(const ComparisonSchedule& schedule) {
  std::set<std::string> models, samples;
  for (const auto& t : schedule.tasks) {
    if (t.phase != Phase::kFinal) {
      models.insert(t.model_i);
      models.insert(t.model_j);
    }
    samples.insert(t.sample);
  }
  if (!schedule.hierarchical()) {
    auto c = round_robin_cost(models.size(), samples.size());
    // Any other single-phase plan (e.g. built from a pair list) is counted
    // as is.
    if (c.total_tasks != schedule.tasks.size())
      c = {schedule.tasks.size(), "custom", std::nullopt};
    return c;
  }
  CostReport c = hierarchical_cost(models.size(), samples.size());
  if (c.total_tasks != schedule.tasks.size())
    throw ValidationError("schedule has " + std::to_string(schedule.tasks.size()) +
                          " tasks, expected " + std::to_string(c.total_tasks));
  return c;
}

json to_json(const CostReport& cost) {
  return json{{"total_tasks", cost.total_tasks},
              {"formula", cost.formula},
              {"shortcut_formula_value", cost.shortcut_formula_value
                                          ? json(*cost.shortcut_formula_value)
                                          : json()}};
}

std::string schedule_to_jsonl(const ComparisonSchedule& schedule) {
  std::string out;
  for (const auto& t : schedule.tasks) {
    json j{{"phase", to_string(t.phase)},
           {"model_i", t.model_i},
           {"model_j", t.model_j},
           {"sample", t.sample},
           {"seed", schedule.seed}};
    out += j.dump();
    out += '\n';
  }
  return out;
}

namespace {

ComparisonSchedule parse_schedule(std::string_view text,
                                  const std::string& source) {
  ComparisonSchedule s;
  std::set<std::tuple<std::string, std::string, std::string>> seen_tasks;
  std::istringstream in{std::string(text)};
  std::string line;
  std::size_t line_no = 0;
  bool first = true;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const auto j = json::parse(line);
      ComparisonTask t;
      const auto phase = parse_phase(j.at("phase").get<std::string>());
      if (!phase) throw ValidationError("unknown phase");
      t.phase = *phase;
      t.model_i = j.at("model_i").get<std::string>();
      t.model_j = j.at("model_j").get<std::string>();
      t.sample = j.at("sample").get<std::string>();
      const auto seed = j.at("seed").get<std::uint64_t>();
      if (first) s.seed = seed;
      else if (seed != s.seed) throw ValidationError("seed changes mid-file");
      first = false;
      if (t.model_i == t.model_j) throw ValidationError("self-comparison");
      if (!seen_tasks.emplace(t.model_i + "|" + t.model_j, t.sample,
                              std::string(to_string(t.phase)))
               .second)
        throw ValidationError("duplicate task");
      s.tasks.push_back(std::move(t));
    } catch (const json::exception& e) {
      throw ParseError(source, line_no, e.what());
    } catch (const ValidationError& e) {
      throw ParseError(source, line_no, e.what());
    }
  }
  // Subset membership in order of first appearance, which follows campaign
  // order.
  auto add = [](std::vector<std::string>& v, const std::string& m) {
    if (std::find(v.begin(), v.end(), m) == v.end()) v.push_back(m);
  };
  for (const auto& t : s.tasks) {
    if (t.phase == Phase::kSubsetA) {
      add(s.subset_a, t.model_i);
      add(s.subset_a, t.model_j);
    } else if (t.phase == Phase::kSubsetB) {
      add(s.subset_b, t.model_i);
      add(s.subset_b, t.model_j);
    }
  }
  return s;
}

}  // namespace

ComparisonSchedule schedule_from_jsonl(std::string_view text) {
  return parse_schedule(text, "schedule");
}

void save_schedule(const std::filesystem::path& path,
                   const ComparisonSchedule& schedule) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << schedule_to_jsonl(schedule);
}

ComparisonSchedule load_schedule(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open " + path.string());
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_schedule(buf.str(), path.string());
}

}  // namespace prefarena
