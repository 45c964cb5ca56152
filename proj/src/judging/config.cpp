#include "prefarena/judging/config.hpp"

#include <fstream>
#include <set>

#include "prefarena/metrics.hpp"

namespace prefarena::judging {

using nlohmann::json;

namespace {

void check_keys(const json& j, const std::set<std::string>& allowed,
                const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + ": expected an object");
  for (const auto& [key, v] : j.items())
    if (!allowed.count(key))
      throw ConfigError(where + ": unknown key '" + key + "'");
}

std::filesystem::path resolve(const std::filesystem::path& base,
                              const std::string& p) {
  std::filesystem::path path(p);
  return path.is_absolute() ? path : base / path;
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

}  // namespace

std::shared_ptr<JudgeBackend> backend_from_json(
    const std::string& id, const json& j,
    const std::filesystem::path& base_dir) {
  const std::string where = "backend '" + id + "'";
  if (!is_valid_token(id)) throw ConfigError("invalid backend id '" + id + "'");
  if (!j.is_object() || !j.contains("kind"))
    throw ConfigError(where + ": missing kind");
  const auto kind = parse_backend_kind(j.at("kind").get<std::string>());
  if (!kind)
    throw ConfigError(where + ": unknown kind '" +
                      j.at("kind").get<std::string>() + "'");
  try {
    switch (*kind) {
      case BackendKind::kMultimodalEndpoint:
      case BackendKind::kTextEndpoint:
        check_keys(j, {"kind", "url", "timeout_s"}, where);
        return std::make_shared<HttpBackend>(
            id, *kind, j.at("url").get<std::string>(),
            std::chrono::seconds(get_or<int>(j, "timeout_s", 120)));
      case BackendKind::kSubprocess:
        check_keys(j, {"kind", "command", "multimodal"}, where);
        return std::make_shared<SubprocessBackend>(
            id, j.at("command").get<std::vector<std::string>>(),
            get_or<bool>(j, "multimodal", false));
      case BackendKind::kReplay:
        check_keys(j, {"kind", "dir", "multimodal"}, where);
        return std::make_shared<ReplayBackend>(
            id, resolve(base_dir, j.at("dir").get<std::string>()),
            get_or<bool>(j, "multimodal", false));
      case BackendKind::kSimulated: {
        check_keys(j,
                   {"kind", "multimodal", "accuracy", "position_bias",
                    "tie_rate", "seed", "truth", "strengths", "bernoulli"},
                   where);
        SimulatedJudgeParams p;
        p.accuracy = get_or<double>(j, "accuracy", p.accuracy);
        p.position_bias = get_or<double>(j, "position_bias", p.position_bias);
        p.tie_rate = get_or<double>(j, "tie_rate", p.tie_rate);
        p.seed = get_or<std::uint64_t>(j, "seed", p.seed);
        TruthOracle truth;
        if (j.contains("truth") == j.contains("strengths"))
          throw ConfigError(where + ": give exactly one of truth, strengths");
        if (j.contains("truth")) {
          truth = truth_from_table(
              load_truth(resolve(base_dir, j.at("truth").get<std::string>())));
        } else {
          truth = truth_from_strengths(
              j.at("strengths").get<std::map<std::string, double>>(),
              get_or<bool>(j, "bernoulli", false), p.seed);
        }
        return std::make_shared<SimulatedBackend>(
            id, p, std::move(truth), get_or<bool>(j, "multimodal", true));
      }
    }
  } catch (const json::exception& e) {
    throw ConfigError(where + ": " + e.what());
  }
  throw ConfigError(where + ": unsupported kind");
}

JudgeConfig judge_config_from_json(const json& j,
                                   const std::filesystem::path& base_dir) {
  check_keys(j,
             {"strategy", "primary", "external", "judge_id", "backends",
              "record_dir", "templates", "retry", "concurrency", "synonyms"},
             "strategy config");
  JudgeConfig out;
  try {
    if (!j.contains("backends") || !j.at("backends").is_object())
      throw ConfigError("strategy config: missing backends");
    std::optional<std::filesystem::path> record_dir;
    if (j.contains("record_dir"))
      record_dir = resolve(base_dir, j.at("record_dir").get<std::string>());
    for (const auto& [id, spec] : j.at("backends").items()) {
      auto backend = backend_from_json(id, spec, base_dir);
      if (record_dir && backend->kind() != BackendKind::kReplay)
        backend = std::make_shared<RecordingBackend>(backend, *record_dir);
      out.backends.emplace(id, std::move(backend));
    }
    auto lookup = [&](const std::string& id) {
      auto it = out.backends.find(id);
      if (it == out.backends.end())
        throw ConfigError("strategy config: no backend named '" + id + "'");
      return it->second;
    };

    auto& s = out.strategy;
    const auto name = get_or<std::string>(j, "strategy", "s1");
    const auto strategy = parse_strategy(name);
    if (!strategy) throw ConfigError("unknown strategy '" + name + "'");
    s.strategy = *strategy;
    if (!j.contains("primary"))
      throw ConfigError("strategy config: missing primary");
    s.primary = lookup(j.at("primary").get<std::string>());
    if (j.contains("external"))
      s.external = lookup(j.at("external").get<std::string>());
    s.judge_id = get_or<std::string>(j, "judge_id", "");
    if (j.contains("templates"))
      s.templates = templates_from_json(j.at("templates"));
    if (j.contains("retry")) {
      const auto& r = j.at("retry");
      check_keys(r, {"max_retries", "backoff_ms"}, "retry");
      s.retry.max_retries = get_or<std::uint32_t>(r, "max_retries", 2);
      s.retry.backoff =
          std::chrono::milliseconds(get_or<std::int64_t>(r, "backoff_ms", 200));
    }
    if (j.contains("synonyms")) {
      std::map<PreferenceLabel, std::vector<std::string>> synonyms;
      for (const auto& [key, words] : j.at("synonyms").items()) {
        const auto label = parse_label(key);
        if (!label || *label == PreferenceLabel::kAbstain)
          throw ConfigError("synonyms: unknown label '" + key + "'");
        synonyms[*label] = words.get<std::vector<std::string>>();
      }
      s.parser = PreferenceParser(std::move(synonyms));
    }
    out.concurrency = get_or<unsigned>(j, "concurrency", 4);
    if (out.concurrency == 0) throw ConfigError("concurrency must be >= 1");
  } catch (const json::exception& e) {
    throw ConfigError(std::string("strategy config: ") + e.what());
  }
  // Validation of the primary/external shape is deferred to commands that
  // use a particular strategy (sweep overrides it).
  return out;
}

JudgeConfig load_judge_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open " + path.string());
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path.string() + ": " + e.what());
  }
  return judge_config_from_json(j, path.parent_path());
}

}  // namespace prefarena::judging
