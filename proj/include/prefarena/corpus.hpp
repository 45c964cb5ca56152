#pragma once

// Data model and persistence for preference campaigns: models, samples,
// description pairs, judgment records and the unanimity filter used to
// build a gold preference set from human annotations.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

namespace prefarena {

enum class PreferenceLabel { kFirst, kSecond, kTie, kAbstain };
enum class Direction { kForward, kReversed };

std::string_view to_string(PreferenceLabel label);
std::string_view to_string(Direction direction);
std::optional<PreferenceLabel> parse_label(std::string_view text);
std::optional<Direction> parse_direction(std::string_view text);

// First <-> Second; Tie and Abstain are order-invariant.
PreferenceLabel mirror(PreferenceLabel label);
Direction flip(Direction direction);

using Timestamp = std::chrono::sys_time<std::chrono::milliseconds>;

// ISO-8601 UTC with millisecond precision: 2026-10-16T08:30:00.123Z
std::string format_timestamp(Timestamp ts);
std::optional<Timestamp> parse_timestamp(std::string_view text);
Timestamp now_utc();

// Identifiers are whitespace-free tokens. '|' and ',' are reserved by the
// tally and matrix file formats.
bool is_valid_token(std::string_view id);

struct Sample {
  std::string id;
  std::optional<std::string> media_ref;

  bool operator==(const Sample&) const = default;
};

struct DescriptionPair {
  std::string pair_id;
  std::string sample;
  std::string model_a;
  std::string model_b;
  std::string text_a;
  std::string text_b;

  void validate() const;
  bool operator==(const DescriptionPair&) const = default;
};

// Deterministic pair id used by generated campaigns.
std::string make_pair_id(std::string_view sample, std::string_view model_a,
                         std::string_view model_b);

struct JudgmentRecord {
  std::string pair_id;
  std::string sample;
  std::string model_a;
  std::string model_b;
  std::string judge;
  Direction direction = Direction::kForward;
  std::uint32_t run = 0;
  // Expressed in presented order: for a reversed record kFirst means text_b.
  PreferenceLabel label = PreferenceLabel::kAbstain;
  std::optional<std::int64_t> elapsed_ms;
  Timestamp ts{};

  void validate() const;
  bool operator==(const JudgmentRecord&) const = default;
};

// Uniqueness key within a record store.
struct RecordKey {
  std::string pair_id;
  std::string judge;
  Direction direction;
  std::uint32_t run;

  auto operator<=>(const RecordKey&) const = default;
};

RecordKey key_of(const JudgmentRecord& record);

// Re-expresses a record as if both descriptions had been shown in forward
// order.
JudgmentRecord canonicalize(JudgmentRecord record);

// Canonical (forward-order) label of a record.
PreferenceLabel canonical_label(const JudgmentRecord& record);

struct CampaignManifest {
  std::vector<std::string> models;
  std::vector<Sample> samples;
  // Human annotators. Machine judges are not listed here.
  std::vector<std::string> judges;
  std::filesystem::path media_root;
  std::uint64_t seed = 0;
  std::uint32_t votes_per_task = 3;
  std::int64_t lease_seconds = 600;

  void validate() const;
  std::optional<std::size_t> model_index(std::string_view id) const;
  const Sample* find_sample(std::string_view id) const;
  bool is_human(std::string_view judge) const;
};

nlohmann::json to_json(const CampaignManifest& manifest);
CampaignManifest manifest_from_json(const nlohmann::json& j);
CampaignManifest load_manifest(const std::filesystem::path& path);
void save_manifest(const std::filesystem::path& path,
                   const CampaignManifest& manifest);

nlohmann::json to_json(const JudgmentRecord& record);
JudgmentRecord record_from_json(const nlohmann::json& j);
// One compact JSON object, no trailing newline.
std::string serialize_record(const JudgmentRecord& record);

// Reads a records.jsonl file. With a manifest, model and sample ids are
// checked against it and human annotators may not abstain.
std::vector<JudgmentRecord> load_records(
    const std::filesystem::path& path,
    const CampaignManifest* manifest = nullptr);
void save_records(const std::filesystem::path& path,
                  std::span<const JudgmentRecord> records);

nlohmann::json to_json(const DescriptionPair& pair);
DescriptionPair pair_from_json(const nlohmann::json& j);
std::vector<DescriptionPair> load_pairs(const std::filesystem::path& path);
void save_pairs(const std::filesystem::path& path,
                std::span<const DescriptionPair> pairs);

// Human votes are immutable; a correction is a new record with a higher run
// index. Keeps only the highest run per (pair, judge) for judges accepted by
// `is_human`, passes every other record through unchanged.
template <typename IsHuman>
std::vector<JudgmentRecord> latest_human_votes(
    std::span<const JudgmentRecord> records, IsHuman&& is_human);

struct UnanimityReport {
  std::map<std::string, PreferenceLabel> consensus;  // kept pair -> label
  std::vector<std::string> dropped;
  std::size_t kept_count() const { return consensus.size(); }
  std::size_t dropped_count() const { return dropped.size(); }
};

// Keeps the pairs whose annotators all gave the same canonical non-abstain
// label. Every pair needs at least `min_annotators` distinct annotators.
UnanimityReport unanimity_filter(std::span<const JudgmentRecord> records,
                                 std::size_t min_annotators);

// Append-only judgment log backed by a records.jsonl file. One writer at a
// time (serialized internally); readers take immutable snapshots.
class RecordStore {
 public:
  enum class AppendResult { kAppended, kDuplicate };

  explicit RecordStore(std::filesystem::path path);

  // Appends and fsyncs. An identical record already present is a no-op;
  // a different record under the same key raises DuplicateKeyError.
  AppendResult append(const JudgmentRecord& record);

  std::optional<JudgmentRecord> find(const RecordKey& key) const;
  std::shared_ptr<const std::vector<JudgmentRecord>> snapshot() const;
  std::size_t size() const;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
  mutable std::mutex mu_;
  std::vector<JudgmentRecord> records_;
  std::map<RecordKey, std::size_t> index_;
  mutable std::shared_ptr<const std::vector<JudgmentRecord>> snapshot_;
};

// ---------------------------------------------------------------------------

template <typename IsHuman>
std::vector<JudgmentRecord> latest_human_votes(
    std::span<const JudgmentRecord> records, IsHuman&& is_human) {
  std::map<std::pair<std::string, std::string>, std::size_t> latest;
  std::vector<JudgmentRecord> out;
  for (const auto& r : records) {
    if (!is_human(r.judge)) {
      out.push_back(r);
      continue;
    }
    auto key = std::make_pair(r.pair_id, r.judge);
    auto it = latest.find(key);
    if (it == latest.end()) {
      latest.emplace(std::move(key), out.size());
      out.push_back(r);
    } else if (out[it->second].run < r.run) {
      out[it->second] = r;
    }
  }
  return out;
}

}  // namespace prefarena
