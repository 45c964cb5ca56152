#include "prefarena/service.hpp"

#include <algorithm>
#include <fstream>
#include <sstream>

#include <httplib.h>
#include <openssl/evp.h>

#include "prefarena/judging/backend.hpp"
#include "prefarena/metrics.hpp"

namespace prefarena {

using nlohmann::json;

std::string_view to_string(Choice choice) {
  switch (choice) {
    case Choice::kDescription1:
      return "description_1";
    case Choice::kDescription2:
      return "description_2";
    case Choice::kTie:
      return "tie";
  }
  return "tie";
}

std::optional<Choice> parse_choice(std::string_view text) {
  for (auto c : {Choice::kDescription1, Choice::kDescription2, Choice::kTie})
    if (to_string(c) == text) return c;
  return std::nullopt;
}

json to_json(const AnnotationTask& t) {
  return json{{"task_id", t.task_id},
              {"sample", t.sample},
              {"media_url", t.media_url},
              {"description_1", t.description_1},
              {"description_2", t.description_2}};
}

VoteSubmission vote_from_json(const json& j) {
  VoteSubmission v;
  try {
    v.task_id = j.at("task_id").get<std::string>();
    v.annotator = j.at("annotator").get<std::string>();
    const auto choice = parse_choice(j.at("choice").get<std::string>());
    if (!choice)
      throw ServiceError(400, "choice must be description_1, description_2 or tie");
    v.choice = *choice;
    if (j.contains("elapsed_ms") && !j.at("elapsed_ms").is_null()) {
      const auto ms = j.at("elapsed_ms").get<std::int64_t>();
      if (ms < 0) throw ServiceError(400, "elapsed_ms must be nonnegative");
      v.elapsed_ms = ms;
    }
  } catch (const json::exception& e) {
    throw ServiceError(400, std::string("bad vote: ") + e.what());
  }
  return v;
}

namespace {

std::string sha256_hex(const std::string& data) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1)
    throw Error("SHA-256 failed");
  static const char* hex = "0123456789abcdef";
  std::string out;
  for (unsigned k = 0; k < len; ++k) {
    out += hex[digest[k] >> 4];
    out += hex[digest[k] & 15];
  }
  return out;
}

PreferenceLabel label_of(Choice c) {
  switch (c) {
    case Choice::kDescription1:
      return PreferenceLabel::kFirst;
    case Choice::kDescription2:
      return PreferenceLabel::kSecond;
    case Choice::kTie:
      return PreferenceLabel::kTie;
  }
  return PreferenceLabel::kTie;
}

Choice choice_of(PreferenceLabel l) {
  if (l == PreferenceLabel::kFirst) return Choice::kDescription1;
  if (l == PreferenceLabel::kSecond) return Choice::kDescription2;
  return Choice::kTie;
}

}  // namespace

AnnotationService::AnnotationService(CampaignManifest manifest,
                                     std::vector<DescriptionPair> pairs,
                                     std::filesystem::path store_path,
                                     Clock clock)
    : manifest_(std::move(manifest)),
      pairs_(std::move(pairs)),
      clock_(std::move(clock)),
      store_(std::move(store_path)) {
  manifest_.validate();
  if (manifest_.judges.empty())
    throw ConfigError("manifest lists no annotators");
  if (manifest_.votes_per_task == 0)
    throw ConfigError("votes_per_task must be at least 1");
  for (std::size_t k = 0; k < pairs_.size(); ++k) {
    const auto& p = pairs_[k];
    p.validate();
    if (!manifest_.model_index(p.model_a) || !manifest_.model_index(p.model_b))
      throw ValidationError("pair '" + p.pair_id + "' names an unknown model");
    if (!manifest_.find_sample(p.sample))
      throw ValidationError("pair '" + p.pair_id + "' names an unknown sample");
    if (!pair_index_.emplace(p.pair_id, k).second)
      throw DuplicateKeyError("duplicate pair '" + p.pair_id + "'");
    ComparisonTask t{Phase::kSingle, p.model_a, p.model_b, p.sample};
    if (*manifest_.model_index(t.model_i) > *manifest_.model_index(t.model_j))
      std::swap(t.model_i, t.model_j);
    schedule_.tasks.push_back(std::move(t));
  }
  schedule_.seed = manifest_.seed;
  build_slots();
  replay();
}

void AnnotationService::build_slots() {
  const auto votes = manifest_.votes_per_task;
  const auto seed = manifest_.seed;
  for (std::size_t p = 0; p < pairs_.size(); ++p) {
    const auto& id = pairs_[p].pair_id;
    // Stratified order: floor or ceil of half the slots forward, the rest
    // reversed, assigned to slots in a seeded order.
    std::uint32_t forward = votes / 2;
    if (votes % 2 && judging::keyed_uniform(seed, "dir|" + id) < 0.5) ++forward;
    std::vector<std::pair<double, std::uint32_t>> order;
    for (std::uint32_t k = 0; k < votes; ++k)
      order.emplace_back(
          judging::keyed_uniform(seed, "slot|" + id + "|" + std::to_string(k)), k);
    std::sort(order.begin(), order.end());
    std::vector<Direction> dirs(votes, Direction::kReversed);
    for (std::uint32_t r = 0; r < forward; ++r)
      dirs[order[r].second] = Direction::kForward;
    for (std::uint32_t k = 0; k < votes; ++k) {
      Slot s;
      s.pair = p;
      s.index = k;
      s.direction = dirs[k];
      s.task_id = sha256_hex("task|" + std::to_string(seed) + "|" + id + "|" +
                             std::to_string(k))
                      .substr(0, 24);
      slots_.push_back(std::move(s));
    }
  }
  // Dispatch breadth-first: every pair's first slot before any second slot,
  // pairs in a seeded order.
  std::vector<double> pair_rank(pairs_.size());
  for (std::size_t p = 0; p < pairs_.size(); ++p)
    pair_rank[p] = judging::keyed_uniform(seed, "queue|" + pairs_[p].pair_id);
  std::stable_sort(slots_.begin(), slots_.end(),
                   [&](const Slot& a, const Slot& b) {
                     if (a.index != b.index) return a.index < b.index;
                     return pair_rank[a.pair] < pair_rank[b.pair];
                   });
  pair_slots_.assign(pairs_.size(), {});
  pair_votes_.assign(pairs_.size(), 0);
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    by_task_id_.emplace(slots_[k].task_id, k);
    pair_slots_[slots_[k].pair].push_back(k);
  }
}

void AnnotationService::replay() {
  const auto records = store_.snapshot();
  for (const auto& r : *records) {
    if (!manifest_.is_human(r.judge)) continue;
    auto pit = pair_index_.find(r.pair_id);
    if (pit == pair_index_.end()) continue;
    const auto key = std::pair(pit->second, r.judge);
    if (engaged_.count(key)) continue;  // a superseding run of the same vote
    std::optional<std::size_t> chosen;
    for (auto k : pair_slots_[pit->second]) {
      const auto& s = slots_[k];
      if (s.voter) continue;
      if (s.direction == r.direction) {
        chosen = k;
        break;
      }
      if (!chosen) chosen = k;
    }
    if (!chosen) continue;  // more votes than slots; kept in the store only
    slots_[*chosen].voter = r.judge;
    engaged_[key] = *chosen;
    ++pair_votes_[pit->second];
  }
}

AnnotationTask AnnotationService::view(const Slot& slot) const {
  const auto& p = pairs_[slot.pair];
  const bool forward = slot.direction == Direction::kForward;
  return {slot.task_id, p.sample, "/media/" + p.sample,
          forward ? p.text_a : p.text_b, forward ? p.text_b : p.text_a};
}

std::size_t AnnotationService::votes_on(std::size_t pair) const {
  return pair_votes_[pair];
}

std::optional<AnnotationTask> AnnotationService::next_task(
    const std::string& annotator) {
  if (!manifest_.is_human(annotator))
    throw ServiceError(404, "unknown annotator '" + annotator + "'");
  std::lock_guard lock(mu_);
  const auto now = clock_();
  // Expired leases go back to the queue.
  for (auto& s : slots_) {
    if (s.holder && !s.voter && s.lease_expiry <= now) {
      engaged_.erase({s.pair, *s.holder});
      s.holder.reset();
    }
  }
  for (const auto& s : slots_)
    if (s.holder == annotator && !s.voter) return view(s);
  for (std::size_t k = 0; k < slots_.size(); ++k) {
    auto& s = slots_[k];
    if (s.voter || s.holder) continue;
    if (engaged_.count({s.pair, annotator})) continue;
    s.holder = annotator;
    s.lease_expiry = now + std::chrono::seconds(manifest_.lease_seconds);
    engaged_[{s.pair, annotator}] = k;
    return view(s);
  }
  return std::nullopt;
}

SubmitResult AnnotationService::submit_vote(const VoteSubmission& vote) {
  if (!manifest_.is_human(vote.annotator))
    throw ServiceError(404, "unknown annotator '" + vote.annotator + "'");
  std::lock_guard lock(mu_);
  auto it = by_task_id_.find(vote.task_id);
  if (it == by_task_id_.end())
    throw ServiceError(404, "unknown task '" + vote.task_id + "'");
  auto& slot = slots_[it->second];
  const auto& pair = pairs_[slot.pair];

  // Already voted on this pair: identical resubmission is a no-op.
  auto engaged = engaged_.find({slot.pair, vote.annotator});
  if (engaged != engaged_.end() &&
      slots_[engaged->second].voter == vote.annotator) {
    const auto& voted = slots_[engaged->second];
    const auto stored = store_.find(
        {pair.pair_id, vote.annotator, voted.direction, 0});
    if (!stored) throw Error("vote missing from the store");
    // Compared by presentation order, not task id: after a restart the vote
    // may be replayed onto a different slot of the same order.
    if (slot.direction == voted.direction && stored->label == label_of(vote.choice))
      return {*stored, true};
    throw ServiceError(409, "already voted " +
                                std::string(to_string(choice_of(stored->label))) +
                                " on this comparison");
  }
  if (slot.voter)
    throw ServiceError(409, "task already completed by another annotator");
  if (slot.holder != vote.annotator)
    throw ServiceError(409, "no outstanding lease on this task");
  const auto now = clock_();
  if (slot.lease_expiry <= now) {
    engaged_.erase({slot.pair, vote.annotator});
    slot.holder.reset();
    throw ServiceError(410, "lease expired; the task has been re-queued");
  }

  JudgmentRecord r;
  r.pair_id = pair.pair_id;
  r.sample = pair.sample;
  r.model_a = pair.model_a;
  r.model_b = pair.model_b;
  r.judge = vote.annotator;
  r.direction = slot.direction;
  r.run = 0;
  r.label = label_of(vote.choice);
  r.elapsed_ms = vote.elapsed_ms;
  r.ts = now;
  store_.append(r);
  slot.voter = vote.annotator;
  slot.holder.reset();
  ++pair_votes_[slot.pair];
  return {r, false};
}

json AnnotationService::progress(
    const std::optional<std::string>& annotator) const {
  std::lock_guard lock(mu_);
  if (annotator) {
    if (!manifest_.is_human(*annotator))
      throw ServiceError(404, "unknown annotator '" + *annotator + "'");
    std::size_t voted = 0;
    std::set<std::size_t> done;
    for (const auto& [key, k] : engaged_)
      if (key.second == *annotator && slots_[k].voter == *annotator) {
        ++voted;
        done.insert(key.first);
      }
    std::size_t remaining = 0;
    for (std::size_t p = 0; p < pairs_.size(); ++p)
      if (!done.count(p) && votes_on(p) < manifest_.votes_per_task) ++remaining;
    return json{{"annotator", *annotator},
                {"votes", voted},
                {"remaining", remaining}};
  }
  const std::size_t total = slots_.size();
  std::size_t completed = 0;
  std::map<std::string, std::size_t> per_annotator;
  for (const auto& a : manifest_.judges) per_annotator[a] = 0;
  for (const auto& s : slots_)
    if (s.voter) {
      ++completed;
      ++per_annotator[*s.voter];
    }
  json pairs = json::array();
  for (std::size_t p = 0; p < pairs_.size(); ++p)
    pairs.push_back({{"pair_id", pairs_[p].pair_id},
                     {"votes", votes_on(p)},
                     {"needed", manifest_.votes_per_task}});
  return json{{"total_tasks", total},
              {"completed", completed},
              {"fraction", total ? double(completed) / double(total) : 0.0},
              {"pairs", std::move(pairs)},
              {"annotators", per_annotator}};
}

json AnnotationService::consistency() const {
  const auto records = store_.snapshot();
  std::vector<JudgmentRecord> human;
  for (const auto& r : *records)
    if (manifest_.is_human(r.judge)) human.push_back(r);
  json out;
  for (bool ties : {true, false}) {
    const char* name = ties ? "with_ties" : "without_ties";
    try {
      out[name] = to_json(inter_annotator_consistency(human, ties));
    } catch (const ValidationError&) {
      out[name] = json{{"include_ties", ties},
                       {"pairs", json::array()},
                       {"weighted_mean", 0.0},
                       {"unweighted_mean", 0.0}};
    }
  }
  return out;
}

json AnnotationService::rankings() const {
  std::set<std::string> complete;
  {
    std::lock_guard lock(mu_);
    for (std::size_t p = 0; p < pairs_.size(); ++p)
      if (votes_on(p) >= manifest_.votes_per_task)
        complete.insert(pairs_[p].pair_id);
  }
  const auto records = store_.snapshot();
  std::vector<JudgmentRecord> used;
  for (const auto& r : *records)
    if (manifest_.is_human(r.judge) && complete.count(r.pair_id))
      used.push_back(r);

  json out{{"complete", complete.size() == pairs_.size() && !pairs_.empty()},
           {"complete_pairs", complete.size()},
           {"total_pairs", pairs_.size()},
           {"banner", nullptr},
           {"ranking", nullptr}};
  if (complete.size() < pairs_.size())
    out["banner"] = "INCOMPLETE: " + std::to_string(complete.size()) + " of " +
                    std::to_string(pairs_.size()) +
                    " comparisons have all their votes; the ranking covers "
                    "those only.";
  if (complete.empty()) return out;
  PipelineOptions options;
  options.allow_incomplete = true;
  try {
    const auto result = run_pipeline(manifest_, schedule_, used, options);
    out["ranking"] = json::parse(ranking_document(result));
  } catch (const Error& e) {
    out["error"] = e.what();
  }
  return out;
}

std::optional<std::filesystem::path> AnnotationService::media_path(
    const std::string& sample) const {
  const auto* s = manifest_.find_sample(sample);
  if (!s || !s->media_ref || manifest_.media_root.empty()) return std::nullopt;
  namespace fs = std::filesystem;
  const auto root = fs::weakly_canonical(manifest_.media_root);
  const auto path = fs::weakly_canonical(root / *s->media_ref);
  auto [r, p] = std::mismatch(root.begin(), root.end(), path.begin(), path.end());
  if (r != root.end()) return std::nullopt;
  if (!fs::is_regular_file(path)) return std::nullopt;
  return path;
}

// ---------------------------------------------------------------------------
// HTTP

struct HttpServer::Impl {
  Impl(AnnotationService& s, ServerOptions o)
      : service(s), options(std::move(o)) {}

  AnnotationService& service;
  ServerOptions options;
  httplib::Server server;
  std::thread thread;
};

namespace {

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

template <typename F>
void guarded(httplib::Response& res, F&& body) {
  try {
    body();
  } catch (const ServiceError& e) {
    send_json(res, e.code(), {{"error", e.what()}});
  } catch (const Error& e) {
    send_json(res, 400, {{"error", e.what()}});
  } catch (const std::exception& e) {
    send_json(res, 500, {{"error", e.what()}});
  }
}

std::string content_type_for(const std::filesystem::path& p) {
  const auto ext = p.extension().string();
  if (ext == ".mp4") return "video/mp4";
  if (ext == ".webm") return "video/webm";
  if (ext == ".ogg" || ext == ".ogv") return "video/ogg";
  if (ext == ".mov") return "video/quicktime";
  return "application/octet-stream";
}

}  // namespace

HttpServer::HttpServer(AnnotationService& service, ServerOptions options)
    : impl_(std::make_unique<Impl>(service, std::move(options))) {
  auto& svr = impl_->server;
  auto& svc = impl_->service;

  svr.Get("/api/tasks/next", [&svc](const httplib::Request& req,
                                    httplib::Response& res) {
    guarded(res, [&] {
      if (!req.has_param("annotator"))
        throw ServiceError(400, "missing annotator parameter");
      const auto annotator = req.get_param_value("annotator");
      auto task = svc.next_task(annotator);
      if (!task) {
        send_json(res, 200, {{"done", true}, {"progress", svc.progress(annotator)}});
        return;
      }
      send_json(res, 200, {{"done", false}, {"task", to_json(*task)}});
    });
  });

  svr.Post("/api/votes", [&svc](const httplib::Request& req,
                                httplib::Response& res) {
    guarded(res, [&] {
      json body;
      try {
        body = json::parse(req.body);
      } catch (const json::parse_error& e) {
        throw ServiceError(400, std::string("bad JSON: ") + e.what());
      }
      const auto vote = vote_from_json(body);
      const auto result = svc.submit_vote(vote);
      send_json(res, 200,
                {{"status", result.duplicate ? "duplicate" : "stored"},
                 {"task_id", vote.task_id},
                 {"choice", to_string(vote.choice)}});
    });
  });

  svr.Get("/api/progress", [&svc](const httplib::Request& req,
                                  httplib::Response& res) {
    guarded(res, [&] {
      std::optional<std::string> annotator;
      if (req.has_param("annotator"))
        annotator = req.get_param_value("annotator");
      send_json(res, 200, svc.progress(annotator));
    });
  });

  svr.Get("/api/consistency",
          [&svc](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { send_json(res, 200, svc.consistency()); });
          });

  svr.Get("/api/rankings",
          [&svc](const httplib::Request&, httplib::Response& res) {
            guarded(res, [&] { send_json(res, 200, svc.rankings()); });
          });

  svr.Get(R"(/media/([^/]+))", [&svc](const httplib::Request& req,
                                      httplib::Response& res) {
    guarded(res, [&] {
      const auto path = svc.media_path(req.matches[1]);
      if (!path) throw ServiceError(404, "no media for this sample");
      std::ifstream in(*path, std::ios::binary);
      if (!in) throw ServiceError(404, "media unreadable");
      std::ostringstream buf;
      buf << in.rdbuf();
      res.status = 200;
      res.set_content(buf.str(), content_type_for(*path).c_str());
    });
  });

  if (impl_->options.static_dir) {
    if (!svr.set_mount_point("/", impl_->options.static_dir->string()))
      throw ConfigError("static dir " + impl_->options.static_dir->string() +
                        " does not exist");
  }
}

HttpServer::~HttpServer() { stop(); }

int HttpServer::start() {
  auto& svr = impl_->server;
  int port = impl_->options.port;
  if (port == 0) {
    port = svr.bind_to_any_port(impl_->options.host);
  } else if (!svr.bind_to_port(impl_->options.host, port)) {
    port = -1;
  }
  if (port < 0)
    throw ConfigError("cannot bind " + impl_->options.host + ":" +
                      std::to_string(impl_->options.port));
  impl_->thread = std::thread([&svr] { svr.listen_after_bind(); });
  svr.wait_until_ready();
  return port;
}

void HttpServer::run() {
  if (!impl_->server.listen(impl_->options.host, impl_->options.port))
    throw ConfigError("cannot listen on " + impl_->options.host + ":" +
                      std::to_string(impl_->options.port));
}

void HttpServer::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace prefarena
