#include "prefarena/corpus.hpp"

#include <fcntl.h>
#include <unistd.h>

#include <algorithm>
#include <cctype>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "prefarena/error.hpp"

namespace prefarena {

using nlohmann::json;

std::string_view to_string(PreferenceLabel label) {
  switch (label) {
    case PreferenceLabel::kFirst:
      return "first";
    case PreferenceLabel::kSecond:
      return "second";
    case PreferenceLabel::kTie:
      return "tie";
    case PreferenceLabel::kAbstain:
      return "abstain";
  }
  return "abstain";
}

std::string_view to_string(Direction direction) {
  return direction == Direction::kForward ? "forward" : "reversed";
}

std::optional<PreferenceLabel> parse_label(std::string_view text) {
  if (text == "first") return PreferenceLabel::kFirst;
  if (text == "second") return PreferenceLabel::kSecond;
  if (text == "tie") return PreferenceLabel::kTie;
  if (text == "abstain") return PreferenceLabel::kAbstain;
  return std::nullopt;
}

std::optional<Direction> parse_direction(std::string_view text) {
  if (text == "forward") return Direction::kForward;
  if (text == "reversed") return Direction::kReversed;
  return std::nullopt;
}

PreferenceLabel mirror(PreferenceLabel label) {
  switch (label) {
    case PreferenceLabel::kFirst:
      return PreferenceLabel::kSecond;
    case PreferenceLabel::kSecond:
      return PreferenceLabel::kFirst;
    default:
      return label;
  }
}

Direction flip(Direction direction) {
  return direction == Direction::kForward ? Direction::kReversed
                                          : Direction::kForward;
}

std::string format_timestamp(Timestamp ts) {
  using namespace std::chrono;
  const auto day = floor<days>(ts);
  const year_month_day ymd{day};
  const hh_mm_ss<milliseconds> tod{ts - day};
  char buf[64];
  std::snprintf(buf, sizeof buf, "%04d-%02u-%02uT%02ld:%02ld:%02ld.%03ldZ",
                static_cast<int>(ymd.year()),
                static_cast<unsigned>(ymd.month()),
                static_cast<unsigned>(ymd.day()),
                static_cast<long>(tod.hours().count()),
                static_cast<long>(tod.minutes().count()),
                static_cast<long>(tod.seconds().count()),
                static_cast<long>(tod.subseconds().count()));
  return buf;
}

std::optional<Timestamp> parse_timestamp(std::string_view text) {
  using namespace std::chrono;
  int y = 0;
  unsigned mo = 0, d = 0, h = 0, mi = 0, s = 0, ms = 0;
  int consumed = 0;
  const std::string str(text);
  if (std::sscanf(str.c_str(), "%4d-%2u-%2uT%2u:%2u:%2u%n", &y, &mo, &d, &h,
                  &mi, &s, &consumed) != 6) {
    return std::nullopt;
  }
  std::string_view rest = text.substr(static_cast<std::size_t>(consumed));
  if (!rest.empty() && rest.front() == '.') {
    rest.remove_prefix(1);
    unsigned digits = 0;
    while (!rest.empty() && std::isdigit(static_cast<unsigned char>(rest[0]))) {
      if (digits < 3) ms = ms * 10 + static_cast<unsigned>(rest[0] - '0');
      ++digits;
      rest.remove_prefix(1);
    }
    if (digits == 0) return std::nullopt;
    for (; digits < 3; ++digits) ms *= 10;
  }
  if (rest != "Z") return std::nullopt;
  const year_month_day ymd{year{y}, month{mo}, day{d}};
  if (!ymd.ok() || h > 23 || mi > 59 || s > 60) return std::nullopt;
  return Timestamp{sys_days{ymd}.time_since_epoch() + hours{h} +
                   minutes{mi} + seconds{s} + milliseconds{ms}};
}

Timestamp now_utc() {
  return std::chrono::floor<std::chrono::milliseconds>(
      std::chrono::system_clock::now());
}

bool is_valid_token(std::string_view id) {
  if (id.empty()) return false;
  return std::none_of(id.begin(), id.end(), [](char c) {
    return std::isspace(static_cast<unsigned char>(c)) || c == '|' ||
           c == ',' || std::iscntrl(static_cast<unsigned char>(c));
  });
}

void DescriptionPair::validate() const {
  if (!is_valid_token(pair_id)) throw ValidationError("invalid pair_id");
  if (!is_valid_token(sample))
    throw ValidationError("pair " + pair_id + ": invalid sample id");
  if (!is_valid_token(model_a) || !is_valid_token(model_b))
    throw ValidationError("pair " + pair_id + ": invalid model id");
  if (model_a == model_b)
    throw ValidationError("pair " + pair_id + ": model_a == model_b");
  if (text_a.empty() || text_b.empty())
    throw ValidationError("pair " + pair_id + ": empty description");
}

std::string make_pair_id(std::string_view sample, std::string_view model_a,
                         std::string_view model_b) {
  std::string id;
  id.reserve(sample.size() + model_a.size() + model_b.size() + 2);
  id.append(sample).append("/").append(model_a).append("~").append(model_b);
  return id;
}

void JudgmentRecord::validate() const {
  if (!is_valid_token(pair_id)) throw ValidationError("invalid pair_id");
  if (!is_valid_token(sample)) throw ValidationError("invalid sample id");
  if (!is_valid_token(model_a) || !is_valid_token(model_b))
    throw ValidationError("invalid model id");
  if (model_a == model_b) throw ValidationError("model_a == model_b");
  if (!is_valid_token(judge)) throw ValidationError("invalid judge id");
  if (elapsed_ms && *elapsed_ms < 0)
    throw ValidationError("elapsed_ms must be nonnegative");
}

RecordKey key_of(const JudgmentRecord& record) {
  return {record.pair_id, record.judge, record.direction, record.run};
}

JudgmentRecord canonicalize(JudgmentRecord record) {
  if (record.direction == Direction::kReversed) {
    record.direction = Direction::kForward;
    record.label = mirror(record.label);
  }
  return record;
}

PreferenceLabel canonical_label(const JudgmentRecord& record) {
  return record.direction == Direction::kReversed ? mirror(record.label)
                                                  : record.label;
}

// ---------------------------------------------------------------------------
// Manifest

void CampaignManifest::validate() const {
  std::set<std::string_view> seen;
  for (const auto& m : models) {
    if (!is_valid_token(m)) throw ValidationError("invalid model id '" + m + "'");
    if (!seen.insert(m).second)
      throw ValidationError("duplicate model id '" + m + "'");
  }
  seen.clear();
  for (const auto& s : samples) {
    if (!is_valid_token(s.id))
      throw ValidationError("invalid sample id '" + s.id + "'");
    if (!seen.insert(s.id).second)
      throw ValidationError("duplicate sample id '" + s.id + "'");
    if (s.media_ref) {
      const std::filesystem::path ref(*s.media_ref);
      if (ref.is_absolute() ||
          std::any_of(ref.begin(), ref.end(),
                      [](const auto& part) { return part == ".."; })) {
        throw ValidationError("media_ref of sample '" + s.id +
                              "' escapes the media root");
      }
    }
  }
  seen.clear();
  for (const auto& j : judges) {
    if (!is_valid_token(j)) throw ValidationError("invalid judge id '" + j + "'");
    if (!seen.insert(j).second)
      throw ValidationError("duplicate judge id '" + j + "'");
  }
  if (votes_per_task == 0) throw ValidationError("votes_per_task must be >= 1");
  if (lease_seconds <= 0) throw ValidationError("lease_seconds must be > 0");
}

std::optional<std::size_t> CampaignManifest::model_index(
    std::string_view id) const {
  auto it = std::find(models.begin(), models.end(), id);
  if (it == models.end()) return std::nullopt;
  return static_cast<std::size_t>(it - models.begin());
}

const Sample* CampaignManifest::find_sample(std::string_view id) const {
  auto it = std::find_if(samples.begin(), samples.end(),
                         [&](const Sample& s) { return s.id == id; });
  return it == samples.end() ? nullptr : &*it;
}

bool CampaignManifest::is_human(std::string_view judge) const {
  return std::find(judges.begin(), judges.end(), judge) != judges.end();
}

json to_json(const CampaignManifest& manifest) {
  json samples = json::array();
  for (const auto& s : manifest.samples) {
    json js = {{"id", s.id}};
    if (s.media_ref) js["media_ref"] = *s.media_ref;
    samples.push_back(std::move(js));
  }
  return json{{"models", manifest.models},
              {"samples", std::move(samples)},
              {"judges", manifest.judges},
              {"media_root", manifest.media_root.string()},
              {"seed", manifest.seed},
              {"votes_per_task", manifest.votes_per_task},
              {"lease_seconds", manifest.lease_seconds}};
}

CampaignManifest manifest_from_json(const json& j) {
  CampaignManifest m;
  try {
    m.models = j.at("models").get<std::vector<std::string>>();
    for (const auto& s : j.at("samples")) {
      if (s.is_string()) {
        m.samples.push_back({s.get<std::string>(), std::nullopt});
      } else {
        Sample sample{s.at("id").get<std::string>(), std::nullopt};
        if (s.contains("media_ref") && !s["media_ref"].is_null())
          sample.media_ref = s["media_ref"].get<std::string>();
        m.samples.push_back(std::move(sample));
      }
    }
    m.judges = j.value("judges", std::vector<std::string>{});
    m.media_root = j.value("media_root", std::string{});
    m.seed = j.value("seed", std::uint64_t{0});
    m.votes_per_task = j.value("votes_per_task", 3u);
    m.lease_seconds = j.value("lease_seconds", std::int64_t{600});
  } catch (const json::exception& e) {
    throw ValidationError(std::string("manifest: ") + e.what());
  }
  m.validate();
  return m;
}

CampaignManifest load_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open manifest " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ParseError(path.string(), 1, e.what());
  }
  auto m = manifest_from_json(j);
  // A relative media root is relative to the manifest's directory.
  if (!m.media_root.empty() && m.media_root.is_relative())
    m.media_root = path.parent_path() / m.media_root;
  return m;
}

void save_manifest(const std::filesystem::path& path,
                   const CampaignManifest& manifest) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  out << to_json(manifest).dump(2) << '\n';
}

// ---------------------------------------------------------------------------
// Records

json to_json(const JudgmentRecord& r) {
  json j;
  j["pair_id"] = r.pair_id;
  j["sample"] = r.sample;
  j["model_a"] = r.model_a;
  j["model_b"] = r.model_b;
  j["judge"] = r.judge;
  j["direction"] = to_string(r.direction);
  j["run"] = r.run;
  j["label"] = to_string(r.label);
  j["elapsed_ms"] = r.elapsed_ms ? json(*r.elapsed_ms) : json(nullptr);
  j["ts"] = format_timestamp(r.ts);
  return j;
}

namespace {

const std::vector<std::string>& record_fields() {
  static const std::vector<std::string> fields = {
      "pair_id", "sample", "model_a", "model_b", "judge",
      "direction", "run", "label", "elapsed_ms", "ts"};
  return fields;
}

std::string string_field(const json& j, const char* name) {
  const auto& v = j.at(name);
  if (!v.is_string())
    throw ValidationError(std::string("field '") + name + "' must be a string");
  return v.get<std::string>();
}

}  // namespace

JudgmentRecord record_from_json(const json& j) {
  if (!j.is_object()) throw ValidationError("record must be a JSON object");
  for (const auto& f : record_fields())
    if (!j.contains(f)) throw ValidationError("missing field '" + f + "'");
  if (j.size() != record_fields().size()) {
    for (const auto& [k, v] : j.items())
      if (std::find(record_fields().begin(), record_fields().end(), k) ==
          record_fields().end())
        throw ValidationError("unknown field '" + k + "'");
  }
  JudgmentRecord r;
  r.pair_id = string_field(j, "pair_id");
  r.sample = string_field(j, "sample");
  r.model_a = string_field(j, "model_a");
  r.model_b = string_field(j, "model_b");
  r.judge = string_field(j, "judge");
  const auto dir = string_field(j, "direction");
  auto d = parse_direction(dir);
  if (!d) throw ValidationError("unknown direction '" + dir + "'");
  r.direction = *d;
  if (!j["run"].is_number_unsigned())
    throw ValidationError("run must be a nonnegative integer");
  r.run = j["run"].get<std::uint32_t>();
  const auto lab = string_field(j, "label");
  auto l = parse_label(lab);
  if (!l) throw ValidationError("unknown label '" + lab + "'");
  r.label = *l;
  if (!j["elapsed_ms"].is_null()) {
    if (!j["elapsed_ms"].is_number_integer())
      throw ValidationError("elapsed_ms must be an integer or null");
    r.elapsed_ms = j["elapsed_ms"].get<std::int64_t>();
  }
  const auto ts = string_field(j, "ts");
  auto t = parse_timestamp(ts);
  if (!t) throw ValidationError("bad timestamp '" + ts + "'");
  r.ts = *t;
  r.validate();
  return r;
}

std::string serialize_record(const JudgmentRecord& record) {
  return to_json(record).dump();
}

namespace {

void check_against_manifest(const JudgmentRecord& r,
                            const CampaignManifest& m) {
  if (!m.model_index(r.model_a))
    throw ValidationError("unknown model '" + r.model_a + "'");
  if (!m.model_index(r.model_b))
    throw ValidationError("unknown model '" + r.model_b + "'");
  if (!m.find_sample(r.sample))
    throw ValidationError("unknown sample '" + r.sample + "'");
  if (m.is_human(r.judge) && r.label == PreferenceLabel::kAbstain)
    throw ValidationError("human annotator '" + r.judge + "' cannot abstain");
}

}  // namespace

std::vector<JudgmentRecord> load_records(const std::filesystem::path& path,
                                         const CampaignManifest* manifest) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<JudgmentRecord> out;
  std::map<RecordKey, std::size_t> seen;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    JudgmentRecord r;
    try {
      r = record_from_json(json::parse(line));
      if (manifest) check_against_manifest(r, *manifest);
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    } catch (const ValidationError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    auto [it, inserted] = seen.emplace(key_of(r), lineno);
    if (!inserted) {
      throw DuplicateKeyError(path.string() + ":" + std::to_string(lineno) +
                              ": duplicate record key (first seen on line " +
                              std::to_string(it->second) + ")");
    }
    out.push_back(std::move(r));
  }
  return out;
}

void save_records(const std::filesystem::path& path,
                  std::span<const JudgmentRecord> records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& r : records) out << serialize_record(r) << '\n';
}

// ---------------------------------------------------------------------------
// Pairs

json to_json(const DescriptionPair& p) {
  return json{{"pair_id", p.pair_id}, {"sample", p.sample},
              {"model_a", p.model_a}, {"model_b", p.model_b},
              {"text_a", p.text_a},   {"text_b", p.text_b}};
}

DescriptionPair pair_from_json(const json& j) {
  DescriptionPair p;
  try {
    p.pair_id = j.at("pair_id").get<std::string>();
    p.sample = j.at("sample").get<std::string>();
    p.model_a = j.at("model_a").get<std::string>();
    p.model_b = j.at("model_b").get<std::string>();
    p.text_a = j.at("text_a").get<std::string>();
    p.text_b = j.at("text_b").get<std::string>();
  } catch (const json::exception& e) {
    throw ValidationError(e.what());
  }
  p.validate();
  return p;
}

std::vector<DescriptionPair> load_pairs(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open " + path.string());
  std::vector<DescriptionPair> out;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(pair_from_json(json::parse(line)));
    } catch (const json::exception& e) {
      throw ParseError(path.string(), lineno, e.what());
    } catch (const ValidationError& e) {
      throw ParseError(path.string(), lineno, e.what());
    }
    if (!ids.insert(out.back().pair_id).second)
      throw DuplicateKeyError(path.string() + ":" + std::to_string(lineno) +
                              ": duplicate pair_id '" + out.back().pair_id +
                              "'");
  }
  return out;
}

void save_pairs(const std::filesystem::path& path,
                std::span<const DescriptionPair> pairs) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  for (const auto& p : pairs) out << to_json(p).dump() << '\n';
}

// ---------------------------------------------------------------------------
// Unanimity

UnanimityReport unanimity_filter(std::span<const JudgmentRecord> records,
                                 std::size_t min_annotators) {
  if (min_annotators == 0)
    throw ValidationError("min_annotators must be at least 1");
  const auto latest =
      latest_human_votes(records, [](std::string_view) { return true; });
  std::map<std::string, std::vector<PreferenceLabel>> by_pair;
  for (const auto& r : latest) by_pair[r.pair_id].push_back(canonical_label(r));

  UnanimityReport report;
  for (const auto& [pair_id, labels] : by_pair) {
    if (labels.size() < min_annotators) {
      throw ValidationError("pair '" + pair_id + "' has " +
                            std::to_string(labels.size()) +
                            " annotators, need " +
                            std::to_string(min_annotators));
    }
    const auto first = labels.front();
    const bool unanimous =
        first != PreferenceLabel::kAbstain &&
        std::all_of(labels.begin(), labels.end(),
                    [&](PreferenceLabel l) { return l == first; });
    if (unanimous) {
      report.consensus.emplace(pair_id, first);
    } else {
      report.dropped.push_back(pair_id);
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// RecordStore

RecordStore::RecordStore(std::filesystem::path path) : path_(std::move(path)) {
  if (path_.has_parent_path())
    std::filesystem::create_directories(path_.parent_path());
  std::ifstream in(path_, std::ios::binary);
  if (in) {
    std::string content((std::istreambuf_iterator<char>(in)),
                        std::istreambuf_iterator<char>());
    // A write interrupted before its newline never committed; drop it.
    const auto last_nl = content.rfind('\n');
    const std::size_t committed =
        last_nl == std::string::npos ? 0 : last_nl + 1;
    if (committed != content.size()) {
      in.close();
      std::filesystem::resize_file(path_, committed);
      content.resize(committed);
    }
    std::istringstream lines(content);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(lines, line)) {
      ++lineno;
      if (line.empty()) continue;
      JudgmentRecord r;
      try {
        r = record_from_json(json::parse(line));
      } catch (const std::exception& e) {
        throw ParseError(path_.string(), lineno, e.what());
      }
      if (!index_.emplace(key_of(r), records_.size()).second)
        throw DuplicateKeyError(path_.string() + ":" + std::to_string(lineno) +
                                ": duplicate record key");
      records_.push_back(std::move(r));
    }
  }
}

RecordStore::AppendResult RecordStore::append(const JudgmentRecord& record) {
  record.validate();
  std::lock_guard lock(mu_);
  auto key = key_of(record);
  if (auto it = index_.find(key); it != index_.end()) {
    if (records_[it->second] == record) return AppendResult::kDuplicate;
    throw DuplicateKeyError("record key already stored for pair '" +
                            record.pair_id + "', judge '" + record.judge + "'");
  }
  const std::string line = serialize_record(record) + "\n";
  const int fd = ::open(path_.c_str(), O_WRONLY | O_APPEND | O_CREAT, 0644);
  if (fd < 0) throw Error("cannot open " + path_.string() + " for append");
  std::size_t written = 0;
  while (written < line.size()) {
    const auto n = ::write(fd, line.data() + written, line.size() - written);
    if (n < 0) {
      ::close(fd);
      throw Error("write failed on " + path_.string());
    }
    written += static_cast<std::size_t>(n);
  }
  ::fsync(fd);
  ::close(fd);
  index_.emplace(std::move(key), records_.size());
  records_.push_back(record);
  snapshot_.reset();
  return AppendResult::kAppended;
}

std::optional<JudgmentRecord> RecordStore::find(const RecordKey& key) const {
  std::lock_guard lock(mu_);
  auto it = index_.find(key);
  if (it == index_.end()) return std::nullopt;
  return records_[it->second];
}

std::shared_ptr<const std::vector<JudgmentRecord>> RecordStore::snapshot()
    const {
  std::lock_guard lock(mu_);
  if (!snapshot_)
    snapshot_ = std::make_shared<const std::vector<JudgmentRecord>>(records_);
  return snapshot_;
}

std::size_t RecordStore::size() const {
  std::lock_guard lock(mu_);
  return records_.size();
}

}  // namespace prefarena
