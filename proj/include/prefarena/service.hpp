#pragma once

// Annotation service: hands out blinded comparison tasks to human
// annotators under time-limited leases, records their votes in the
// append-only store and reports progress, agreement and live rankings.
//
// Everything an annotator sees (task ids, media URLs, description texts,
// choices) is free of model ids and presentation order.

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/corpus.hpp"
#include "prefarena/pipeline.hpp"

namespace prefarena {

enum class Choice { kDescription1, kDescription2, kTie };

std::string_view to_string(Choice choice);
std::optional<Choice> parse_choice(std::string_view text);

struct AnnotationTask {
  std::string task_id;
  std::string sample;
  std::string media_url;
  std::string description_1;  // presented order
  std::string description_2;
};

nlohmann::json to_json(const AnnotationTask& task);

struct VoteSubmission {
  std::string task_id;
  std::string annotator;
  Choice choice = Choice::kTie;
  std::optional<std::int64_t> elapsed_ms;
};

VoteSubmission vote_from_json(const nlohmann::json& j);

struct SubmitResult {
  JudgmentRecord record;
  bool duplicate = false;
};

class AnnotationService {
 public:
  using Clock = std::function<Timestamp()>;

  // Replays `store_path` (created if missing). Every pair must name
  // manifest models and samples.
  AnnotationService(CampaignManifest manifest,
                    std::vector<DescriptionPair> pairs,
                    std::filesystem::path store_path, Clock clock = now_utc);

  // An annotator's outstanding task, else the next open task on a pair
  // the annotator has not voted on; nullopt when none is left for them.
  // ServiceError 404 for an annotator outside the manifest.
  std::optional<AnnotationTask> next_task(const std::string& annotator);

  // ServiceError: 404 unknown task or annotator, 409 conflicting vote or a
  // lease held by someone else / never granted, 410 expired lease (the task
  // goes back to the queue).
  SubmitResult submit_vote(const VoteSubmission& vote);

  // Without an annotator: votes per pair and per annotator. With one: only
  // that annotator's counts.
  nlohmann::json progress(const std::optional<std::string>& annotator = {}) const;
  nlohmann::json consistency() const;
  // {"complete", "banner", "complete_pairs", "total_pairs", "ranking"};
  // "ranking" is the ranking.json document over the complete pairs.
  nlohmann::json rankings() const;

  // One single-phase task per pair, oriented in manifest model order.
  const ComparisonSchedule& schedule() const { return schedule_; }
  const CampaignManifest& manifest() const { return manifest_; }
  std::shared_ptr<const std::vector<JudgmentRecord>> records() const {
    return store_.snapshot();
  }
  // Resolves a media path for a sample, confined to the media root.
  std::optional<std::filesystem::path> media_path(const std::string& sample) const;

 private:
  struct Slot {
    std::size_t pair;
    std::uint32_t index;
    Direction direction;
    std::string task_id;
    std::optional<std::string> holder;
    Timestamp lease_expiry{};
    std::optional<std::string> voter;
  };

  void build_slots();
  void replay();
  AnnotationTask view(const Slot& slot) const;
  std::size_t votes_on(std::size_t pair) const;

  CampaignManifest manifest_;
  std::vector<DescriptionPair> pairs_;
  ComparisonSchedule schedule_;
  Clock clock_;
  RecordStore store_;

  mutable std::mutex mu_;
  std::vector<Slot> slots_;  // dispatch order
  std::map<std::string, std::size_t> by_task_id_;
  std::map<std::string, std::size_t> pair_index_;
  std::vector<std::vector<std::size_t>> pair_slots_;  // pair -> slot indices
  std::vector<std::size_t> pair_votes_;
  // (pair index, annotator) -> slot voted on or currently leased
  std::map<std::pair<std::size_t, std::string>, std::size_t> engaged_;
};

struct ServerOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::optional<std::filesystem::path> static_dir;
};

// JSON API over httplib. Routes: GET /api/tasks/next?annotator=,
// POST /api/votes, GET /api/progress[?annotator=], GET /api/consistency,
// GET /api/rankings, GET /media/<sample>, and the optional static UI at /.
class HttpServer {
 public:
  HttpServer(AnnotationService& service, ServerOptions options);
  ~HttpServer();

  // Binds and serves on a background thread; returns the bound port.
  int start();
  // Binds and serves on the calling thread until stop().
  void run();
  void stop();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace prefarena
