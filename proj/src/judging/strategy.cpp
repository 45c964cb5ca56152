#include "prefarena/judging/strategy.hpp"

#include <algorithm>
#include <atomic>
#include <cctype>
#include <mutex>
#include <set>
#include <thread>

#include "prefarena/aggregate.hpp"

namespace prefarena::judging {

using nlohmann::json;

std::string_view to_string(Strategy s) {
  switch (s) {
    case Strategy::kS1:
      return "s1";
    case Strategy::kS2:
      return "s2";
    case Strategy::kS3:
      return "s3";
    case Strategy::kS4:
      return "s4";
  }
  return "s1";
}

std::optional<Strategy> parse_strategy(std::string_view text) {
  std::string lower(text);
  std::transform(lower.begin(), lower.end(), lower.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  for (auto s : {Strategy::kS1, Strategy::kS2, Strategy::kS3, Strategy::kS4})
    if (to_string(s) == lower) return s;
  return std::nullopt;
}

std::size_t step_count(Strategy s) {
  switch (s) {
    case Strategy::kS1:
      return 1;
    case Strategy::kS2:
    case Strategy::kS3:
      return 2;
    case Strategy::kS4:
      return 3;
  }
  return 1;
}

bool uses_external(Strategy s) {
  return s == Strategy::kS3 || s == Strategy::kS4;
}

// ---------------------------------------------------------------------------
// Output parsing

namespace {

std::string lowercase(std::string_view text) {
  std::string out(text);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return std::tolower(c); });
  return out;
}

bool is_word_char(char c) {
  return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

struct Hit {
  std::size_t begin, end;
  PreferenceLabel label;
  std::string phrase;
};

const std::vector<std::string>& verdict_cues() {
  static const std::vector<std::string> cues = {
      "prefer", "preferred", "preference", "answer", "verdict", "choice",
      "choose", "chose", "pick", "select", "winner", "better one"};
  return cues;
}

const std::set<std::string>& filler_words() {
  static const std::set<std::string> words = {
      "is", "the", "would", "be", "clearly", "definitely", "i", "my",
      "final", "a", "it's", "its", "option", "for", "me"};
  return words;
}

// True when `gap` holds only punctuation, whitespace and filler words.
bool only_filler(std::string_view gap) {
  std::string word;
  auto flush = [&] {
    if (word.empty()) return true;
    const bool ok = filler_words().count(word) > 0;
    word.clear();
    return ok;
  };
  for (char c : gap) {
    if (is_word_char(c) || c == '\'') {
      word += c;
    } else if (!flush()) {
      return false;
    }
  }
  return flush();
}

}  // namespace

PreferenceParser::PreferenceParser(
    std::map<PreferenceLabel, std::vector<std::string>> synonyms) {
  phrases_ = {{"description 1", PreferenceLabel::kFirst},
              {"description1", PreferenceLabel::kFirst},
              {"description one", PreferenceLabel::kFirst},
              {"first description", PreferenceLabel::kFirst},
              {"description 2", PreferenceLabel::kSecond},
              {"description2", PreferenceLabel::kSecond},
              {"description two", PreferenceLabel::kSecond},
              {"second description", PreferenceLabel::kSecond},
              {"tie", PreferenceLabel::kTie},
              {"tied", PreferenceLabel::kTie}};
  for (const auto& [label, words] : synonyms) {
    if (label == PreferenceLabel::kAbstain)
      throw ConfigError("synonyms cannot map to abstain");
    for (const auto& w : words)
      if (!w.empty()) phrases_.emplace_back(lowercase(w), label);
  }
  // Longest phrases first so "description 1" is not shadowed by a synonym
  // prefix.
  std::stable_sort(phrases_.begin(), phrases_.end(),
                   [](const auto& a, const auto& b) {
                     return a.first.size() > b.first.size();
                   });
}

ParseTrace PreferenceParser::parse(std::string_view raw) const {
  const std::string text = lowercase(raw);
  auto bounded = [&](std::size_t begin, std::size_t end) {
    return (begin == 0 || !is_word_char(text[begin - 1])) &&
           (end >= text.size() || !is_word_char(text[end]));
  };

  std::vector<Hit> hits;
  std::vector<bool> taken(text.size(), false);
  for (const auto& [phrase, label] : phrases_) {
    for (auto pos = text.find(phrase); pos != std::string::npos;
         pos = text.find(phrase, pos + 1)) {
      const auto end = pos + phrase.size();
      if (!bounded(pos, end)) continue;
      if (std::any_of(taken.begin() + long(pos), taken.begin() + long(end),
                      [](bool t) { return t; }))
        continue;
      std::fill(taken.begin() + long(pos), taken.begin() + long(end), true);
      hits.push_back({pos, end, label, phrase});
    }
  }
  std::sort(hits.begin(), hits.end(),
            [](const Hit& a, const Hit& b) { return a.begin < b.begin; });

  std::vector<std::size_t> cue_ends;
  for (const auto& cue : verdict_cues()) {
    for (auto pos = text.find(cue); pos != std::string::npos;
         pos = text.find(cue, pos + 1)) {
      if (bounded(pos, pos + cue.size())) cue_ends.push_back(pos + cue.size());
    }
  }

  auto decide = [](const std::vector<const Hit*>& set, const char* rule,
                   ParseTrace& trace) {
    std::set<PreferenceLabel> classes;
    for (const auto* h : set) {
      classes.insert(h->label);
      trace.matched.push_back(h->phrase);
    }
    if (classes.size() == 1) {
      trace.label = *classes.begin();
      trace.rule = rule;
    } else {
      trace.label = PreferenceLabel::kAbstain;
      trace.rule = classes.empty() ? "none" : "conflict";
    }
  };

  std::vector<const Hit*> verdicts;
  for (const auto& h : hits) {
    for (auto cue_end : cue_ends) {
      if (cue_end <= h.begin && h.begin - cue_end <= 40 &&
          only_filler(std::string_view(text).substr(cue_end, h.begin - cue_end))) {
        verdicts.push_back(&h);
        break;
      }
    }
  }
  ParseTrace trace;
  if (!verdicts.empty()) {
    decide(verdicts, "verdict", trace);
    return trace;
  }
  std::vector<const Hit*> all;
  for (const auto& h : hits) all.push_back(&h);
  decide(all, "marker", trace);
  return trace;
}

PreferenceLabel parse_preference(std::string_view text) {
  static const PreferenceParser parser;
  return parser.parse(text).label;
}

// ---------------------------------------------------------------------------
// Strategy execution

std::string StrategyConfig::effective_judge_id() const {
  if (!judge_id.empty()) return judge_id;
  return (primary ? primary->id() : std::string("judge")) + "." +
         std::string(to_string(strategy));
}

void StrategyConfig::validate() const {
  if (!primary) throw ConfigError("strategy needs a primary backend");
  if (!primary->accepts_media())
    throw ConfigError("primary backend '" + primary->id() +
                      "' must accept media (multimodal)");
  if (uses_external(strategy)) {
    if (!external)
      throw ConfigError(std::string(to_string(strategy)) +
                        " needs an external text backend");
    if (external->accepts_media())
      throw ConfigError("external backend '" + external->id() +
                        "' must be text-only");
  }
  templates.validate();
  if (!is_valid_token(effective_judge_id()))
    throw ConfigError("invalid judge id '" + effective_judge_id() + "'");
}

namespace {

struct StepSpec {
  const PromptTemplate* tmpl;
  JudgeBackend* backend;
};

std::vector<StepSpec> steps_for(const StrategyConfig& c) {
  const auto& t = c.templates;
  switch (c.strategy) {
    case Strategy::kS1:
      return {{&t.direct_prefer, c.primary.get()}};
    case Strategy::kS2:
      return {{&t.describe, c.primary.get()},
              {&t.prefer_with_reference, c.primary.get()}};
    case Strategy::kS3:
      return {{&t.describe, c.primary.get()},
              {&t.prefer_with_reference, c.external.get()}};
    case Strategy::kS4:
      return {{&t.describe, c.primary.get()},
              {&t.reason, c.external.get()},
              {&t.prefer_from_reasoning, c.external.get()}};
  }
  return {};
}

// Returns the output, or nullopt after exhausting retries.
std::optional<std::string> call_with_retry(JudgeBackend& backend,
                                           const BackendRequest& request,
                                           const RetryPolicy& policy,
                                           StepTrace& trace) {
  auto delay = policy.backoff;
  for (std::uint32_t attempt = 0;; ++attempt) {
    trace.attempts = attempt + 1;
    try {
      return backend.complete(request);
    } catch (const PermanentBackendError& e) {
      trace.error = e.what();
      return std::nullopt;
    } catch (const BackendError& e) {
      trace.error = e.what();
      if (attempt >= policy.max_retries) return std::nullopt;
    }
    if (delay.count() > 0) std::this_thread::sleep_for(delay);
    delay *= 2;
  }
}

}  // namespace

StrategyOutcome run_strategy(const StrategyConfig& config,
                             const DescriptionPair& pair, Direction direction,
                             const RunOptions& options) {
  config.validate();
  pair.validate();
  const bool forward = direction == Direction::kForward;
  std::map<std::string, std::string> slots = {
      {"video", "<video>"},
      {"description_1", forward ? pair.text_a : pair.text_b},
      {"description_2", forward ? pair.text_b : pair.text_a}};
  const std::string media = options.media.value_or(pair.sample);

  StrategyOutcome out;
  out.record.pair_id = pair.pair_id;
  out.record.sample = pair.sample;
  out.record.model_a = pair.model_a;
  out.record.model_b = pair.model_b;
  out.record.judge = config.effective_judge_id();
  out.record.direction = direction;
  out.record.run = options.run;

  const RequestContext ctx{pair.pair_id, pair.sample, pair.model_a,
                           pair.model_b, direction,   options.run};
  std::string last;
  bool failed = false;
  for (const auto& step : steps_for(config)) {
    BackendRequest req;
    req.role = step.tmpl->role();
    req.prompt = step.tmpl->fill(slots);
    if (step.tmpl->has_slot("video")) req.media = media;
    req.context = ctx;
    if (req.media && !step.backend->accepts_media())
      throw ConfigError("backend '" + step.backend->id() +
                        "' is text-only but the step attaches media");

    StepTrace trace{req.role, step.backend->id(), req.prompt, req.media, {}, 0, {}};
    auto output = call_with_retry(*step.backend, req, config.retry, trace);
    if (output) {
      trace.output = *output;
      trace.error.reset();
    }
    out.steps.push_back(std::move(trace));
    if (!output) {
      failed = true;
      break;
    }
    last = *output;
    if (req.role == StepRole::kDescribe) slots["reference"] = last;
    if (req.role == StepRole::kReason) slots["reasoning"] = last;
  }
  if (failed) {
    out.parse = {PreferenceLabel::kAbstain, "backend_failure", {}};
  } else {
    out.parse = config.parser.parse(last);
  }
  out.record.label = out.parse.label;
  out.record.ts = options.clock ? options.clock() : now_utc();
  return out;
}

json to_json(const StrategyOutcome& o) {
  json steps = json::array();
  for (const auto& s : o.steps) {
    steps.push_back({{"role", to_string(s.role)},
                     {"backend", s.backend},
                     {"prompt", s.prompt},
                     {"media", s.media ? json(*s.media) : json()},
                     {"output", s.output},
                     {"attempts", s.attempts},
                     {"error", s.error ? json(*s.error) : json()}});
  }
  return json{{"pair_id", o.record.pair_id},
              {"judge", o.record.judge},
              {"direction", to_string(o.record.direction)},
              {"run", o.record.run},
              {"label", to_string(o.record.label)},
              {"parse", {{"rule", o.parse.rule}, {"matched", o.parse.matched}}},
              {"steps", std::move(steps)}};
}

std::vector<JudgeTask> plan_tasks(std::span<const DescriptionPair> pairs,
                                  std::uint32_t forward_runs,
                                  std::uint32_t reversed_runs) {
  std::vector<JudgeTask> tasks;
  tasks.reserve(pairs.size() * (forward_runs + reversed_runs));
  for (const auto& p : pairs) {
    for (std::uint32_t r = 0; r < forward_runs; ++r)
      tasks.push_back({&p, Direction::kForward, r});
    for (std::uint32_t r = 0; r < reversed_runs; ++r)
      tasks.push_back({&p, Direction::kReversed, r});
  }
  return tasks;
}

std::vector<StrategyOutcome> run_tasks(
    const StrategyConfig& config, std::span<const JudgeTask> tasks,
    unsigned concurrency,
    const std::function<std::optional<std::string>(const DescriptionPair&)>&
        media_for,
    const std::function<Timestamp()>& clock) {
  config.validate();
  std::vector<std::optional<StrategyOutcome>> results(tasks.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  auto worker = [&] {
    for (;;) {
      const auto k = next.fetch_add(1);
      if (k >= tasks.size()) return;
      try {
        RunOptions opt;
        opt.run = tasks[k].run;
        if (media_for) opt.media = media_for(*tasks[k].pair);
        opt.clock = clock;
        results[k] =
            run_strategy(config, *tasks[k].pair, tasks[k].direction, opt);
      } catch (...) {
        std::lock_guard lock(error_mu);
        if (!error) error = std::current_exception();
        next = tasks.size();
        return;
      }
    }
  };
  const unsigned n = std::max(1u, std::min<unsigned>(
                                      concurrency, unsigned(tasks.size())));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::jthread> pool;
    for (unsigned t = 0; t < n; ++t) pool.emplace_back(worker);
  }
  if (error) std::rethrow_exception(error);
  std::vector<StrategyOutcome> out;
  out.reserve(results.size());
  for (auto& r : results) out.push_back(std::move(*r));
  return out;
}

PreferenceLabel combine_forward_reverse(
    std::span<const JudgmentRecord> records) {
  std::set<std::pair<Direction, std::uint32_t>> present;
  for (const auto& r : records) {
    if (r.pair_id != records.front().pair_id || r.judge != records.front().judge)
      throw ValidationError("combine_forward_reverse: records span pairs or judges");
    if (r.run > 1)
      throw ValidationError("combine_forward_reverse: unexpected run " +
                            std::to_string(r.run));
    if (!present.emplace(r.direction, r.run).second)
      throw ValidationError("combine_forward_reverse: duplicate " +
                            std::string(to_string(r.direction)) + " run " +
                            std::to_string(r.run));
  }
  std::string missing;
  for (auto d : {Direction::kForward, Direction::kReversed}) {
    for (std::uint32_t run = 0; run < 2; ++run) {
      if (!present.count({d, run})) {
        if (!missing.empty()) missing += ", ";
        missing += std::string(to_string(d)) + " run " + std::to_string(run);
      }
    }
  }
  if (!missing.empty())
    throw ValidationError("combine_forward_reverse: missing " + missing);
  std::vector<PreferenceLabel> labels;
  for (const auto& r : records) labels.push_back(canonical_label(r));
  if (std::all_of(labels.begin(), labels.end(),
                  [](auto l) { return l == PreferenceLabel::kAbstain; }))
    return PreferenceLabel::kAbstain;
  return plurality(labels);
}

// ---------------------------------------------------------------------------

SweepResult sweep_strategies(
    const StrategyConfig& base, std::span<const DescriptionPair> pairs,
    const std::map<std::string, PreferenceLabel>& truth, unsigned concurrency,
    const std::function<std::optional<std::string>(const DescriptionPair&)>&
        media_for,
    const std::function<Timestamp()>& clock) {
  SweepResult result;
  const auto tasks = plan_tasks(pairs, 1, 1);
  double best = -1.0;
  const std::string stem =
      base.judge_id.empty() ? base.primary->id() : base.judge_id;
  for (auto s : {Strategy::kS1, Strategy::kS2, Strategy::kS3, Strategy::kS4}) {
    if (uses_external(s) && !base.external) continue;
    StrategyConfig config = base;
    config.strategy = s;
    config.judge_id = stem + "." + std::string(to_string(s));
    SweepEntry entry{s, {}, {}};
    for (auto& o : run_tasks(config, tasks, concurrency, media_for, clock))
      entry.records.push_back(std::move(o.record));
    entry.report = evaluate_judge(config.judge_id, entry.records, truth);
    const double score = entry.report.two_class.waf.value_or(-1.0);
    if (score > best) {
      best = score;
      result.chosen = s;
    }
    result.entries.push_back(std::move(entry));
  }
  if (result.entries.empty()) throw ConfigError("no strategy could run");
  return result;
}

json to_json(const SweepResult& sweep) {
  json entries = json::array();
  for (const auto& e : sweep.entries) {
    entries.push_back({{"strategy", to_string(e.strategy)},
                       {"metrics", to_json(e.report)}});
  }
  return json{{"chosen", to_string(sweep.chosen)},
              {"selection", "argmax two-class WAF"},
              {"strategies", std::move(entries)}};
}

}  // namespace prefarena::judging
