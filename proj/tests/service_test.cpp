#include <gtest/gtest.h>

#include <httplib.h>

#include <algorithm>
#include <map>
#include <set>
#include <thread>

#include "prefarena/error.hpp"
#include "prefarena/pipeline.hpp"
#include "prefarena/service.hpp"
#include "test_support.hpp"

using namespace prefarena;
using namespace prefarena::test;
using nlohmann::json;

namespace {

// Three models with ids that never appear in the description texts.
CampaignManifest small_manifest(std::uint32_t votes = 3) {
  CampaignManifest m;
  m.models = {"alpha-net", "beta-net", "gamma-net"};
  m.samples = {{"clip0", std::nullopt}, {"clip1", std::nullopt},
               {"clip2", std::nullopt}};
  m.judges = {"ann0", "ann1", "ann2"};
  m.seed = 11;
  m.votes_per_task = votes;
  m.lease_seconds = 600;
  return m;
}

std::vector<DescriptionPair> all_pairs(const CampaignManifest& m) {
  std::vector<DescriptionPair> out;
  int text = 0;
  for (const auto& s : m.samples)
    for (std::size_t i = 0; i < m.models.size(); ++i)
      for (std::size_t j = i + 1; j < m.models.size(); ++j) {
        DescriptionPair p;
        p.sample = s.id;
        p.model_a = m.models[i];
        p.model_b = m.models[j];
        p.pair_id = make_pair_id(s.id, p.model_a, p.model_b);
        p.text_a = "description text " + std::to_string(text++);
        p.text_b = "description text " + std::to_string(text++);
        out.push_back(p);
      }
  return out;
}

struct FakeClock {
  Timestamp now = fixed_ts();
  AnnotationService::Clock fn() {
    return [this] { return now; };
  }
};

// Which pair a task shows, and whether it is shown in stored order.
struct Shown {
  const DescriptionPair* pair = nullptr;
  bool forward = true;
};

Shown locate(const std::vector<DescriptionPair>& pairs, const AnnotationTask& t) {
  for (const auto& p : pairs) {
    if (p.sample != t.sample) continue;
    if (p.text_a == t.description_1 && p.text_b == t.description_2)
      return {&p, true};
    if (p.text_b == t.description_1 && p.text_a == t.description_2)
      return {&p, false};
  }
  return {};
}

// The presented choice that means `canonical` (First = model_a preferred).
Choice choose(const Shown& shown, PreferenceLabel canonical) {
  if (canonical == PreferenceLabel::kTie) return Choice::kTie;
  const bool first = (canonical == PreferenceLabel::kFirst) == shown.forward;
  return first ? Choice::kDescription1 : Choice::kDescription2;
}

VoteSubmission vote(const AnnotationTask& t, const std::string& who, Choice c) {
  return {t.task_id, who, c, std::nullopt};
}

int error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.code();
  }
  return 0;
}

}  // namespace

TEST(Service, ChoiceStrings) {
  for (auto c : {Choice::kDescription1, Choice::kDescription2, Choice::kTie})
    EXPECT_EQ(parse_choice(to_string(c)), c);
  EXPECT_FALSE(parse_choice("model_a"));
}

TEST(Service, VoteFromJson) {
  auto v = vote_from_json(
      json{{"task_id", "t"}, {"annotator", "a"}, {"choice", "tie"}});
  EXPECT_EQ(v.choice, Choice::kTie);
  EXPECT_EQ(error_code([] { vote_from_json(json{{"task_id", "t"}}); }), 400);
  EXPECT_EQ(error_code([] {
              vote_from_json(json{{"task_id", "t"}, {"annotator", "a"},
                                  {"choice", "First"}});
            }),
            400);
}

TEST(Service, RejectsBadPairs) {
  TempDir dir;
  auto m = small_manifest();
  auto pairs = all_pairs(m);
  pairs.push_back(pairs.front());
  EXPECT_THROW(AnnotationService(m, pairs, dir / "r.jsonl"), DuplicateKeyError);
  pairs.pop_back();
  pairs[0].model_b = "delta-net";
  EXPECT_THROW(AnnotationService(m, pairs, dir / "r.jsonl"), ValidationError);
}

TEST(Service, HandsOutEveryPairOncePerAnnotator) {
  TempDir dir;
  FakeClock clock;
  auto m = small_manifest();
  auto pairs = all_pairs(m);
  AnnotationService svc(m, pairs, dir / "r.jsonl", clock.fn());
  EXPECT_EQ(error_code([&] { svc.next_task("stranger"); }), 404);

  std::set<std::string> seen;
  while (auto t = svc.next_task("ann0")) {
    // The outstanding task is handed out again until voted on.
    EXPECT_EQ(svc.next_task("ann0")->task_id, t->task_id);
    auto shown = locate(pairs, *t);
    ASSERT_TRUE(shown.pair);
    EXPECT_TRUE(seen.insert(shown.pair->pair_id).second);
    svc.submit_vote(vote(*t, "ann0", Choice::kTie));
  }
  EXPECT_EQ(seen.size(), pairs.size());
  EXPECT_EQ(svc.progress("ann0")["votes"], pairs.size());
  EXPECT_EQ(svc.progress("ann0")["remaining"], 0u);
  EXPECT_EQ(svc.progress()["completed"], pairs.size());
  EXPECT_EQ(svc.progress()["total_tasks"], 3 * pairs.size());
}

TEST(Service, TranslatesPresentedChoice) {
  TempDir dir;
  auto m = small_manifest();
  auto pairs = all_pairs(m);
  AnnotationService svc(m, pairs, dir / "r.jsonl");
  bool saw_reversed = false, saw_forward = false;
  while (auto t = svc.next_task("ann1")) {
    auto shown = locate(pairs, *t);
    auto res = svc.submit_vote(vote(*t, "ann1", Choice::kDescription2));
    EXPECT_EQ(res.record.label, S);
    EXPECT_EQ(res.record.pair_id, shown.pair->pair_id);
    if (shown.forward) {
      saw_forward = true;
      EXPECT_EQ(res.record.direction, Fwd);
      EXPECT_EQ(canonicalize(res.record).label, S);
    } else {
      saw_reversed = true;
      EXPECT_EQ(res.record.direction, Rev);
      EXPECT_EQ(canonicalize(res.record).label, F);
    }
  }
  EXPECT_TRUE(saw_forward);
  EXPECT_TRUE(saw_reversed);
}

TEST(Service, DuplicateAndConflictingVotes) {
  TempDir dir;
  auto m = small_manifest();
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl");
  auto t = *svc.next_task("ann0");
  EXPECT_FALSE(svc.submit_vote(vote(t, "ann0", Choice::kDescription1)).duplicate);
  EXPECT_TRUE(svc.submit_vote(vote(t, "ann0", Choice::kDescription1)).duplicate);
  EXPECT_EQ(svc.records()->size(), 1u);
  EXPECT_EQ(error_code([&] { svc.submit_vote(vote(t, "ann0", Choice::kTie)); }),
            409);
  // Someone else cannot vote on a task they never leased.
  EXPECT_EQ(error_code([&] { svc.submit_vote(vote(t, "ann1", Choice::kTie)); }),
            409);
  EXPECT_EQ(error_code([&] {
              svc.submit_vote({"nope", "ann0", Choice::kTie, std::nullopt});
            }),
            404);
  EXPECT_EQ(svc.records()->size(), 1u);
}

TEST(Service, LeaseExpiryRequeues) {
  TempDir dir;
  FakeClock clock;
  auto m = small_manifest(1);
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl", clock.fn());
  auto t = *svc.next_task("ann0");
  clock.now += std::chrono::seconds(m.lease_seconds + 1);
  EXPECT_EQ(
      error_code([&] { svc.submit_vote(vote(t, "ann0", Choice::kTie)); }), 410);
  // With one vote per pair the expired slot is the first one open again.
  auto again = svc.next_task("ann1");
  ASSERT_TRUE(again);
  EXPECT_EQ(again->task_id, t.task_id);
  svc.submit_vote(vote(*again, "ann1", Choice::kTie));
  EXPECT_EQ(svc.records()->size(), 1u);
}

TEST(Service, LeaseWithinTimeIsKept) {
  TempDir dir;
  FakeClock clock;
  auto m = small_manifest(1);
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl", clock.fn());
  auto t = *svc.next_task("ann0");
  clock.now += std::chrono::seconds(m.lease_seconds - 1);
  EXPECT_NE(svc.next_task("ann1")->task_id, t.task_id);
  EXPECT_FALSE(svc.submit_vote(vote(t, "ann0", Choice::kTie)).duplicate);
}

TEST(Service, DirectionsBalancedPerPair) {
  for (std::uint32_t votes : {1u, 2u, 3u}) {
    TempDir dir;
    auto m = small_manifest(votes);
    auto pairs = all_pairs(m);
    AnnotationService svc(m, pairs, dir / "r.jsonl");
    for (const auto& a : m.judges)
      while (auto t = svc.next_task(a)) svc.submit_vote(vote(*t, a, Choice::kTie));
    std::map<std::string, std::pair<int, int>> dirs;
    for (const auto& r : *svc.records())
      (r.direction == Fwd ? dirs[r.pair_id].first : dirs[r.pair_id].second)++;
    ASSERT_EQ(dirs.size(), pairs.size());
    int forward = 0;
    for (const auto& [id, fr] : dirs) {
      EXPECT_EQ(std::size_t(fr.first + fr.second), votes);
      EXPECT_LE(std::abs(fr.first - fr.second), 1) << id;
      forward += fr.first;
    }
    if (votes == 1) {
      // Odd slot counts break towards either order.
      EXPECT_GT(forward, 0);
      EXPECT_LT(forward, int(pairs.size()));
    }
  }
}

TEST(Service, ConcurrentAnnotatorsGetDisjointLeases) {
  TempDir dir;
  auto m = small_manifest();
  m.judges = {"ann0", "ann1", "ann2", "ann3", "ann4", "ann5"};
  auto pairs = all_pairs(m);
  AnnotationService svc(m, pairs, dir / "r.jsonl");
  std::vector<std::thread> threads;
  for (const auto& a : m.judges)
    threads.emplace_back([&svc, a] {
      while (auto t = svc.next_task(a)) svc.submit_vote(vote(*t, a, Choice::kTie));
    });
  for (auto& t : threads) t.join();
  const auto records = svc.records();
  EXPECT_EQ(records->size(), 3 * pairs.size());
  std::set<std::pair<std::string, std::string>> keys;
  std::map<std::string, int> per_pair;
  for (const auto& r : *records) {
    EXPECT_TRUE(keys.insert({r.pair_id, r.judge}).second);
    ++per_pair[r.pair_id];
  }
  for (const auto& [id, n] : per_pair) EXPECT_EQ(n, 3) << id;
}

TEST(Service, ReplaysStoreAfterRestart) {
  TempDir dir;
  auto m = small_manifest();
  auto pairs = all_pairs(m);
  std::vector<AnnotationTask> voted;
  json before;
  {
    AnnotationService svc(m, pairs, dir / "r.jsonl");
    for (int k = 0; k < 4; ++k) {
      auto t = *svc.next_task("ann0");
      svc.submit_vote(vote(t, "ann0", Choice::kDescription1));
      voted.push_back(t);
    }
    for (int k = 0; k < 2; ++k) {
      auto t = *svc.next_task("ann1");
      svc.submit_vote(vote(t, "ann1", Choice::kDescription2));
    }
    before = svc.progress();
  }
  AnnotationService svc(m, pairs, dir / "r.jsonl");
  EXPECT_EQ(svc.progress(), before);
  EXPECT_EQ(svc.records()->size(), 6u);
  // Resubmitting survives the restart; a changed mind does not.
  for (const auto& t : voted) {
    EXPECT_TRUE(svc.submit_vote(vote(t, "ann0", Choice::kDescription1)).duplicate);
    EXPECT_EQ(error_code([&] {
                svc.submit_vote(vote(t, "ann0", Choice::kDescription2));
              }),
              409);
  }
  // ann0 is not handed a pair it already voted on.
  std::set<std::string> done;
  for (const auto& t : voted) done.insert(locate(pairs, t).pair->pair_id);
  std::size_t remaining = 0;
  while (auto t = svc.next_task("ann0")) {
    EXPECT_FALSE(done.count(locate(pairs, *t).pair->pair_id));
    svc.submit_vote(vote(*t, "ann0", Choice::kTie));
    ++remaining;
  }
  EXPECT_EQ(remaining, pairs.size() - voted.size());
}

TEST(Service, RankingsMatchOfflinePipeline) {
  SimulationConfig config;
  config.models = 5;
  config.samples = 6;
  config.seed = 21;
  for (int k = 0; k < 3; ++k)
    config.annotators.push_back({"h" + std::to_string(k), {0.85, 0.1, 0.2, 0}});
  auto c = simulate_campaign(config);
  std::map<std::pair<std::string, std::string>, PreferenceLabel> planned;
  for (const auto& r : c.records)
    planned[{r.pair_id, r.judge}] = canonicalize(r).label;

  TempDir dir;
  FakeClock clock;
  AnnotationService svc(c.manifest, c.pairs, dir / "r.jsonl", clock.fn());
  EXPECT_EQ(svc.rankings()["ranking"], json());
  EXPECT_FALSE(svc.rankings()["complete"].get<bool>());
  bool saw_partial = false;
  bool any = true;
  while (any) {
    any = false;
    for (const auto& a : c.manifest.judges) {
      auto t = svc.next_task(a);
      if (!t) continue;
      any = true;
      auto shown = locate(c.pairs, *t);
      ASSERT_TRUE(shown.pair);
      svc.submit_vote(vote(*t, a, choose(shown, planned.at({shown.pair->pair_id, a}))));
      clock.now += std::chrono::seconds(1);
    }
    auto live = svc.rankings();
    if (!live["complete"].get<bool>() && live["complete_pairs"].get<int>() > 0) {
      saw_partial = true;
      EXPECT_TRUE(live["banner"].get<std::string>().starts_with("INCOMPLETE"));
    }
  }
  EXPECT_TRUE(saw_partial);
  auto live = svc.rankings();
  EXPECT_TRUE(live["complete"].get<bool>());
  EXPECT_EQ(live["banner"], json());

  // Same canonical votes, possibly different presentation orders.
  auto offline = run_pipeline(c.manifest, c.schedule, c.records, {});
  EXPECT_EQ(live["ranking"], json::parse(ranking_document(offline)));
  auto replayed = run_pipeline(c.manifest, svc.schedule(), *svc.records(), {});
  EXPECT_EQ(live["ranking"].dump(2) + "\n", ranking_document(replayed));
}

TEST(Service, ConsistencyMatchesHandComputed) {
  TempDir dir;
  CampaignManifest m;
  m.models = {"alpha-net", "beta-net"};
  m.samples = {{"clip0", std::nullopt}, {"clip1", std::nullopt},
               {"clip2", std::nullopt}};
  m.judges = {"A", "B", "C"};
  m.votes_per_task = 3;
  auto pairs = all_pairs(m);
  const std::map<std::string, std::vector<PreferenceLabel>> labels{
      {"A", {F, S, T}}, {"B", {F, F, T}}, {"C", {F, S, F}}};
  AnnotationService svc(m, pairs, dir / "r.jsonl");
  for (const auto& [who, ls] : labels)
    while (auto t = svc.next_task(who)) {
      auto shown = locate(pairs, *t);
      const auto k = std::size_t(shown.pair - pairs.data());
      svc.submit_vote(vote(*t, who, choose(shown, ls[k])));
    }
  auto j = svc.consistency();
  EXPECT_NEAR(j["with_ties"]["weighted_mean"].get<double>(), 5.0 / 9.0, 1e-12);
  EXPECT_NEAR(j["with_ties"]["unweighted_mean"].get<double>(), 5.0 / 9.0, 1e-12);
  EXPECT_NEAR(j["without_ties"]["weighted_mean"].get<double>(), 4.0 / 6.0, 1e-12);
  EXPECT_NEAR(j["without_ties"]["unweighted_mean"].get<double>(), 2.0 / 3.0,
              1e-12);
  for (const auto& p : j["with_ties"]["pairs"])
    if (p["annotator_a"] == "A" && p["annotator_b"] == "B") {
      EXPECT_NEAR(p["agreement"].get<double>(), 2.0 / 3.0, 1e-12);
    }
  for (const auto& p : j["without_ties"]["pairs"])
    if (p["annotator_a"] == "A" && p["annotator_b"] == "B") {
      EXPECT_NEAR(p["agreement"].get<double>(), 0.5, 1e-12);
    }
}

TEST(Service, ConsistencyBeforeVotes) {
  TempDir dir;
  auto m = small_manifest();
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl");
  auto j = svc.consistency();
  EXPECT_EQ(j["with_ties"]["weighted_mean"], 0.0);
  EXPECT_TRUE(j["without_ties"]["pairs"].empty());
}

TEST(Service, MediaConfinedToRoot) {
  TempDir dir;
  std::filesystem::create_directories(dir / "media");
  write_file(dir / "media" / "clip0.mp4", "VIDEO0");
  write_file(dir / "secret.mp4", "SECRET");
  std::filesystem::create_symlink(dir / "secret.mp4", dir / "media" / "link.mp4");
  auto m = small_manifest();
  m.media_root = dir / "media";
  m.samples[0].media_ref = "clip0.mp4";
  m.samples[1].media_ref = "link.mp4";
  m.samples[2].media_ref = "missing.mp4";
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl");
  ASSERT_TRUE(svc.media_path("clip0"));
  EXPECT_EQ(read_file(*svc.media_path("clip0")), "VIDEO0");
  EXPECT_FALSE(svc.media_path("clip1"));
  EXPECT_FALSE(svc.media_path("clip2"));
  EXPECT_FALSE(svc.media_path("nope"));
}

TEST(Http, RoundTripIsBlinded) {
  TempDir dir;
  std::filesystem::create_directories(dir / "media");
  write_file(dir / "media" / "clip0.mp4", "VIDEO0");
  auto m = small_manifest(2);
  m.media_root = dir / "media";
  m.samples[0].media_ref = "clip0.mp4";
  auto pairs = all_pairs(m);
  AnnotationService svc(m, pairs, dir / "r.jsonl");
  HttpServer server(svc, {"127.0.0.1", 0, std::nullopt});
  const int port = server.start();
  httplib::Client cli("127.0.0.1", port);

  auto bad = cli.Get("/api/tasks/next");
  ASSERT_TRUE(bad);
  EXPECT_EQ(bad->status, 400);
  auto unknown = cli.Get("/api/tasks/next?annotator=stranger");
  ASSERT_TRUE(unknown);
  EXPECT_EQ(unknown->status, 404);

  const std::vector<std::string> leaks{"alpha", "beta", "gamma", "forward",
                                       "reversed", "Forward", "Reversed"};
  std::size_t votes = 0;
  for (const auto& a : {std::string("ann0"), std::string("ann1")}) {
    while (true) {
      auto res = cli.Get("/api/tasks/next?annotator=" + a);
      ASSERT_TRUE(res);
      ASSERT_EQ(res->status, 200);
      auto body = json::parse(res->body);
      if (body["done"].get<bool>()) break;
      for (const auto& word : leaks)
        EXPECT_EQ(res->body.find(word), std::string::npos) << res->body;
      const auto& task = body["task"];
      std::set<std::string> keys;
      for (auto it = task.begin(); it != task.end(); ++it) keys.insert(it.key());
      EXPECT_EQ(keys, (std::set<std::string>{"task_id", "sample", "media_url",
                                             "description_1", "description_2"}));
      json v{{"task_id", task["task_id"]}, {"annotator", a},
             {"choice", "description_1"}};
      auto posted = cli.Post("/api/votes", v.dump(), "application/json");
      ASSERT_TRUE(posted);
      EXPECT_EQ(posted->status, 200);
      EXPECT_EQ(json::parse(posted->body)["status"], "stored");
      for (const auto& word : leaks)
        EXPECT_EQ(posted->body.find(word), std::string::npos);
      auto again = cli.Post("/api/votes", v.dump(), "application/json");
      EXPECT_EQ(json::parse(again->body)["status"], "duplicate");
      v["choice"] = "tie";
      EXPECT_EQ(cli.Post("/api/votes", v.dump(), "application/json")->status, 409);
      ++votes;
    }
  }
  EXPECT_EQ(votes, 2 * pairs.size());
  EXPECT_EQ(cli.Post("/api/votes", "{not json", "application/json")->status, 400);

  auto progress = json::parse(cli.Get("/api/progress")->body);
  EXPECT_EQ(progress["completed"], 2 * pairs.size());
  EXPECT_EQ(json::parse(cli.Get("/api/progress?annotator=ann1")->body)["votes"],
            pairs.size());
  auto rankings = json::parse(cli.Get("/api/rankings")->body);
  EXPECT_TRUE(rankings["complete"].get<bool>());
  EXPECT_EQ(rankings, svc.rankings());
  EXPECT_EQ(json::parse(cli.Get("/api/consistency")->body), svc.consistency());

  auto media = cli.Get("/media/clip0");
  ASSERT_TRUE(media);
  EXPECT_EQ(media->status, 200);
  EXPECT_EQ(media->body, "VIDEO0");
  EXPECT_EQ(media->get_header_value("Content-Type"), "video/mp4");
  EXPECT_EQ(cli.Get("/media/clip1")->status, 404);
  EXPECT_EQ(cli.Get("/media/..%2Fr.jsonl")->status, 404);
  server.stop();
}

TEST(Http, ServesStaticUi) {
  TempDir dir;
  std::filesystem::create_directories(dir / "ui");
  write_file(dir / "ui" / "index.html", "<html>ui</html>");
  auto m = small_manifest();
  AnnotationService svc(m, all_pairs(m), dir / "r.jsonl");
  HttpServer server(svc, {"127.0.0.1", 0, dir / "ui"});
  httplib::Client cli("127.0.0.1", server.start());
  auto res = cli.Get("/index.html");
  ASSERT_TRUE(res);
  EXPECT_EQ(res->body, "<html>ui</html>");
  EXPECT_THROW(HttpServer(svc, {"127.0.0.1", 0, dir / "absent"}), ConfigError);
}
