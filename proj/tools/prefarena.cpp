// prefarena: command-line front end for campaigns, judging, ranking and the
// annotation service.

#include <csignal>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>

#include "prefarena/aggregate.hpp"
#include "prefarena/btrank.hpp"
#include "prefarena/corpus.hpp"
#include "prefarena/judging/config.hpp"
#include "prefarena/judging/ensemble.hpp"
#include "prefarena/judging/strategy.hpp"
#include "prefarena/metrics.hpp"
#include "prefarena/pipeline.hpp"
#include "prefarena/service.hpp"
#include "prefarena/simd/pair_kernels.hpp"
#include "prefarena/tournament.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace prefarena;

namespace {

void write_text(const fs::path& path, const std::string& body) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error("cannot write " + path.string());
  out << body;
}

std::optional<std::string> env(const char* name) {
  const char* v = std::getenv(name);
  if (!v || !*v) return std::nullopt;
  return std::string(v);
}

CampaignManifest manifest_with_env(const fs::path& path) {
  auto m = load_manifest(path);
  if (auto seed = env("PREF_ARENA_SEED")) m.seed = std::stoull(*seed);
  return m;
}

struct FitFlags {
  std::string mode = "binary";
  double lambda = FitConfig{}.pseudo_count;
  double lr = FitConfig{}.learning_rate;
  std::uint32_t max_iters = FitConfig{}.max_iters;
  double grad_tol = FitConfig{}.grad_tol;

  void add(CLI::App* app) {
    app->add_option("--mode", mode, "binary | counts")->capture_default_str();
    app->add_option("--lambda", lambda, "pseudo-count")->capture_default_str();
    app->add_option("--lr", lr, "learning rate")->capture_default_str();
    app->add_option("--max-iters", max_iters)->capture_default_str();
    app->add_option("--grad-tol", grad_tol)->capture_default_str();
  }
  FitConfig config() const {
    FitConfig c;
    const auto m = parse_fit_mode(mode);
    if (!m) throw ConfigError("unknown fit mode '" + mode + "'");
    c.mode = *m;
    c.pseudo_count = lambda;
    c.learning_rate = lr;
    c.max_iters = max_iters;
    c.grad_tol = grad_tol;
    c.validate();
    return c;
  }
};

std::function<bool(std::string_view)> humans_of(const CampaignManifest& m) {
  return [&m](std::string_view j) { return m.is_human(j); };
}

std::vector<JudgmentRecord> select_judges(std::vector<JudgmentRecord> records,
                                          const std::vector<std::string>& judges,
                                          const CampaignManifest& m) {
  std::set<std::string> keep(judges.begin(), judges.end());
  if (keep.empty()) keep.insert(m.judges.begin(), m.judges.end());
  std::erase_if(records, [&](const auto& r) { return !keep.count(r.judge); });
  return records;
}

ComparisonSchedule schedule_for(const CampaignManifest& m,
                                const std::optional<fs::path>& schedule,
                                const std::optional<fs::path>& pairs) {
  if (schedule) return load_schedule(*schedule);
  if (pairs) {
    ComparisonSchedule s;
    s.seed = m.seed;
    for (const auto& p : load_pairs(*pairs)) {
      ComparisonTask t{Phase::kSingle, p.model_a, p.model_b, p.sample};
      const auto i = m.model_index(t.model_i), j = m.model_index(t.model_j);
      if (!i || !j) throw ValidationError("pair '" + p.pair_id + "' names an unknown model");
      if (*i > *j) std::swap(t.model_i, t.model_j);
      s.tasks.push_back(std::move(t));
    }
    return s;
  }
  std::vector<std::string> samples;
  for (const auto& s : m.samples) samples.push_back(s.id);
  return round_robin(m.models, samples);
}

HttpServer* g_server = nullptr;

void on_signal(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Pairwise preference ranking and annotation toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", "prefarena 1.0.0");

  // serve ------------------------------------------------------------------
  auto* serve = app.add_subcommand("serve", "Run the annotation HTTP service");
  fs::path serve_manifest, serve_pairs;
  std::optional<fs::path> serve_store, serve_static;
  std::string serve_host = "127.0.0.1";
  int serve_port = 8080;
  serve->add_option("--manifest", serve_manifest)->required()->check(CLI::ExistingFile);
  serve->add_option("--pairs", serve_pairs, "pairs.jsonl with the texts to compare")
      ->required()->check(CLI::ExistingFile);
  serve->add_option("--store", serve_store,
                    "records.jsonl (default: $PREF_ARENA_DATA_DIR/records.jsonl)");
  serve->add_option("--host", serve_host)->capture_default_str();
  serve->add_option("--port", serve_port)->capture_default_str();
  serve->add_option("--static", serve_static, "directory with the annotation UI");

  // ingest -----------------------------------------------------------------
  auto* ingest = app.add_subcommand("ingest", "Validate records and append them to a store");
  fs::path ingest_manifest, ingest_in, ingest_store;
  ingest->add_option("--manifest", ingest_manifest)->required()->check(CLI::ExistingFile);
  ingest->add_option("--in", ingest_in)->required()->check(CLI::ExistingFile);
  ingest->add_option("--store", ingest_store)->required();

  // unanimity --------------------------------------------------------------
  auto* unan = app.add_subcommand("unanimity", "Keep pairs all annotators agree on");
  fs::path unan_manifest, unan_records, unan_out;
  std::size_t unan_min = 0;
  unan->add_option("--manifest", unan_manifest)->required()->check(CLI::ExistingFile);
  unan->add_option("--records", unan_records)->required()->check(CLI::ExistingFile);
  unan->add_option("--min-annotators", unan_min)->required();
  unan->add_option("--out", unan_out, "truth.jsonl")->required();

  // tally ------------------------------------------------------------------
  auto* tally_cmd = app.add_subcommand("tally", "Per-pair tallies and the W matrix");
  fs::path tally_manifest, tally_records, tally_out;
  std::optional<fs::path> tally_matrix;
  std::vector<std::string> tally_judges;
  tally_cmd->add_option("--manifest", tally_manifest)->required()->check(CLI::ExistingFile);
  tally_cmd->add_option("--records", tally_records)->required()->check(CLI::ExistingFile);
  tally_cmd->add_option("--judge", tally_judges, "verdict sources (default: annotators)");
  tally_cmd->add_option("--out", tally_out, "tallies.json")->required();
  tally_cmd->add_option("--matrix", tally_matrix, "also write W.csv");

  // rank -------------------------------------------------------------------
  auto* rank_cmd = app.add_subcommand("rank", "Fit Bradley-Terry strengths");
  std::optional<fs::path> rank_matrix, rank_tallies, rank_out;
  FitFlags rank_fit;
  auto* rm = rank_cmd->add_option("--matrix", rank_matrix, "W.csv")->check(CLI::ExistingFile);
  auto* rt = rank_cmd->add_option("--tallies", rank_tallies, "tallies.json")
                 ->check(CLI::ExistingFile);
  rm->excludes(rt);
  rank_fit.add(rank_cmd);
  rank_cmd->add_option("--out", rank_out, "ranking.json (default: stdout)");

  // metrics ----------------------------------------------------------------
  auto* metrics_cmd = app.add_subcommand("metrics", "Score judges against truth");
  fs::path metrics_records, metrics_truth;
  std::vector<std::string> metrics_judges;
  std::optional<fs::path> metrics_out;
  metrics_cmd->add_option("--records", metrics_records)->required()->check(CLI::ExistingFile);
  metrics_cmd->add_option("--truth", metrics_truth)->required()->check(CLI::ExistingFile);
  metrics_cmd->add_option("--judge", metrics_judges, "judges to score (default: all)");
  metrics_cmd->add_option("--out", metrics_out, "metrics.json (default: stdout)");

  // schedule ---------------------------------------------------------------
  auto* sched = app.add_subcommand("schedule", "Plan comparisons and report cost");
  fs::path sched_manifest, sched_out;
  std::string sched_mode = "round-robin";
  std::optional<std::uint64_t> sched_seed;
  sched->add_option("--manifest", sched_manifest)->required()->check(CLI::ExistingFile);
  sched->add_option("--mode", sched_mode)
      ->check(CLI::IsMember({"round-robin", "hierarchical"}))
      ->capture_default_str();
  sched->add_option("--seed", sched_seed, "default: manifest seed");
  sched->add_option("--out", sched_out, "schedule.jsonl")->required();

  // judge ------------------------------------------------------------------
  auto* judge = app.add_subcommand("judge", "Automated preference judging");
  judge->require_subcommand(1);
  auto* judge_run = judge->add_subcommand("run", "Run one strategy over pairs");
  fs::path jr_config, jr_pairs, jr_out;
  std::optional<std::string> jr_strategy;
  std::optional<fs::path> jr_trace;
  std::uint32_t jr_fwd = 1, jr_rev = 1;
  judge_run->add_option("--config", jr_config, "strategy.json")->required()->check(CLI::ExistingFile);
  judge_run->add_option("--pairs", jr_pairs)->required()->check(CLI::ExistingFile);
  judge_run->add_option("--out", jr_out, "records.jsonl")->required();
  judge_run->add_option("--strategy", jr_strategy, "s1..s4 (overrides config)");
  judge_run->add_option("--forward-runs", jr_fwd)->capture_default_str();
  judge_run->add_option("--reversed-runs", jr_rev)->capture_default_str();
  judge_run->add_option("--trace", jr_trace, "per-step trace JSONL");

  auto* judge_sweep = judge->add_subcommand("sweep", "Run S1-S4 and pick the best");
  fs::path js_config, js_pairs, js_truth, js_out;
  std::optional<fs::path> js_records;
  judge_sweep->add_option("--config", js_config)->required()->check(CLI::ExistingFile);
  judge_sweep->add_option("--pairs", js_pairs)->required()->check(CLI::ExistingFile);
  judge_sweep->add_option("--truth", js_truth)->required()->check(CLI::ExistingFile);
  judge_sweep->add_option("--out", js_out, "sweep.json")->required();
  judge_sweep->add_option("--records-out", js_records, "records of every strategy");

  // ensemble ---------------------------------------------------------------
  auto* ens = app.add_subcommand("ensemble", "Filter judges and majority-vote the best");
  fs::path ens_records, ens_truth, ens_out;
  std::optional<std::size_t> ens_top;
  std::string ens_id = "ensemble";
  judging::EnsembleConfig ens_cfg;
  ens->add_option("--records", ens_records)->required()->check(CLI::ExistingFile);
  ens->add_option("--truth", ens_truth, "gold labels used for filtering")
      ->required()->check(CLI::ExistingFile);
  ens->add_option("--top-n", ens_top);
  ens->add_option("--recognition-threshold", ens_cfg.recognition_threshold)
      ->capture_default_str();
  ens->add_option("--flip-threshold", ens_cfg.flip_threshold)->capture_default_str();
  ens->add_flag("--inclusive", ens_cfg.inclusive, "accept values equal to a threshold");
  ens->add_option("--id", ens_id)->capture_default_str();
  ens->add_option("--out", ens_out, "records.jsonl")->required();

  // pipeline ---------------------------------------------------------------
  auto* pipe = app.add_subcommand("pipeline", "End-to-end ranking");
  pipe->require_subcommand(1);
  auto* pipe_run = pipe->add_subcommand("run", "Tallies, W, ranking and report");
  fs::path pr_manifest, pr_records, pr_out;
  std::optional<fs::path> pr_schedule, pr_pairs;
  PipelineOptions pr_opts;
  FitFlags pr_fit;
  pipe_run->add_option("--manifest", pr_manifest)->required()->check(CLI::ExistingFile);
  pipe_run->add_option("--records", pr_records)->required()->check(CLI::ExistingFile);
  pipe_run->add_option("--schedule", pr_schedule, "default: pairs, else full round robin")
      ->check(CLI::ExistingFile);
  pipe_run->add_option("--pairs", pr_pairs)->check(CLI::ExistingFile);
  pipe_run->add_option("--judge", pr_opts.judges, "verdict sources (default: annotators)");
  pipe_run->add_flag("--allow-overlap", pr_opts.allow_overlap);
  pipe_run->add_flag("--allow-incomplete", pr_opts.allow_incomplete);
  pr_fit.add(pipe_run);
  pipe_run->add_option("--out-dir", pr_out)->required();

  // simulate ---------------------------------------------------------------
  auto* sim = app.add_subcommand("simulate", "Generate a synthetic campaign");
  SimulationConfig sim_cfg;
  fs::path sim_out;
  std::size_t sim_annotators = 3;
  judging::SimulatedJudgeParams sim_params;
  sim_params.accuracy = 0.8;
  bool sim_deterministic = false;
  sim->add_option("--models", sim_cfg.models)->capture_default_str();
  sim->add_option("--samples", sim_cfg.samples)->capture_default_str();
  sim->add_option("--ratio", sim_cfg.ratio, "strength ratio between ranks")->capture_default_str();
  sim->add_option("--annotators", sim_annotators)->capture_default_str();
  sim->add_option("--accuracy", sim_params.accuracy)->capture_default_str();
  sim->add_option("--position-bias", sim_params.position_bias)->capture_default_str();
  sim->add_option("--tie-rate", sim_params.tie_rate)->capture_default_str();
  sim->add_option("--seed", sim_cfg.seed)->capture_default_str();
  sim->add_flag("--hierarchical", sim_cfg.hierarchical);
  sim->add_flag("--deterministic", sim_deterministic,
                "stronger model always wins the planted outcome");
  sim->add_option("--out-dir", sim_out)->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*serve) {
      auto manifest = manifest_with_env(serve_manifest);
      fs::path store = serve_store
                           ? *serve_store
                           : fs::path(env("PREF_ARENA_DATA_DIR").value_or("data")) /
                                 "records.jsonl";
      AnnotationService service(std::move(manifest), load_pairs(serve_pairs), store);
      HttpServer server(service, {serve_host, serve_port, serve_static});
      g_server = &server;
      std::signal(SIGINT, on_signal);
      std::signal(SIGTERM, on_signal);
      std::cerr << "serving on http://" << serve_host << ":" << serve_port
                << " (store " << store.string() << ")\n";
      server.run();
      g_server = nullptr;
    } else if (*ingest) {
      const auto manifest = manifest_with_env(ingest_manifest);
      const auto records = load_records(ingest_in, &manifest);
      RecordStore store(ingest_store);
      std::size_t added = 0, dup = 0;
      for (const auto& r : records) {
        if (store.append(r) == RecordStore::AppendResult::kAppended) ++added;
        else ++dup;
      }
      std::cout << "appended " << added << ", already present " << dup << "\n";
    } else if (*unan) {
      const auto manifest = manifest_with_env(unan_manifest);
      auto records = select_judges(load_records(unan_records, &manifest), {}, manifest);
      const auto latest = latest_human_votes(std::span<const JudgmentRecord>(records),
                                             humans_of(manifest));
      const auto report = unanimity_filter(latest, unan_min);
      save_truth(unan_out, report.consensus);
      std::cout << "kept " << report.kept_count() << ", dropped "
                << report.dropped_count() << "\n";
    } else if (*tally_cmd) {
      const auto manifest = manifest_with_env(tally_manifest);
      const auto records = select_judges(load_records(tally_records, &manifest),
                                         tally_judges, manifest);
      const auto collected = collect_verdicts(records, humans_of(manifest));
      const auto tallies = tally_all(collected.verdicts, manifest.models);
      write_text(tally_out, tallies_to_json(tallies, manifest.models).dump(2) + "\n");
      if (tally_matrix)
        write_text(*tally_matrix, to_csv(build_matrix(tallies, manifest.models)));
      if (!collected.undecided.empty())
        std::cerr << collected.undecided.size()
                  << " pair(s) had only abstentions and were left out\n";
    } else if (*rank_cmd) {
      if (!rank_matrix && !rank_tallies)
        throw ConfigError("give --matrix or --tallies");
      const auto config = rank_fit.config();
      Observations obs;
      if (rank_matrix) {
        if (config.mode != FitMode::kBinary)
          throw ConfigError("a W matrix only supports --mode binary");
        obs = Observations::from_matrix(load_matrix(*rank_matrix));
      } else {
        const auto file = load_tallies(*rank_tallies);
        if (config.mode == FitMode::kBinary)
          obs = Observations::from_matrix(build_matrix(file.tallies, file.models));
        else
          obs = Observations::from_tallies(file.tallies, file.models);
      }
      const auto result = fit(obs, config);
      const auto body = ranking_to_json(result).dump(2) + "\n";
      if (rank_out) write_text(*rank_out, body);
      else std::cout << body;
      if (!result.converged)
        std::cerr << "warning: iteration cap reached (gradient norm "
                  << result.grad_norm << ")\n";
    } else if (*metrics_cmd) {
      const auto records = load_records(metrics_records);
      const auto truth = load_truth(metrics_truth);
      std::set<std::string> judges(metrics_judges.begin(), metrics_judges.end());
      if (judges.empty())
        for (const auto& r : records) judges.insert(r.judge);
      json out = json::array();
      for (const auto& j : judges) {
        std::vector<JudgmentRecord> own;
        for (const auto& r : records)
          if (r.judge == j) own.push_back(r);
        out.push_back(to_json(evaluate_judge(j, own, truth)));
      }
      const auto body = out.dump(2) + "\n";
      if (metrics_out) write_text(*metrics_out, body);
      else std::cout << body;
    } else if (*sched) {
      const auto manifest = manifest_with_env(sched_manifest);
      std::vector<std::string> samples;
      for (const auto& s : manifest.samples) samples.push_back(s.id);
      const auto seed = sched_seed.value_or(manifest.seed);
      const auto schedule = sched_mode == "round-robin"
                                ? round_robin(manifest.models, samples)
                                : hierarchical(manifest.models, samples, seed);
      auto s = schedule;
      s.seed = seed;
      save_schedule(sched_out, s);
      std::cout << to_json(cost_of(s)).dump(2) << "\n";
    } else if (*judge_run) {
      auto cfg = judging::load_judge_config(jr_config);
      if (jr_strategy) {
        const auto s = judging::parse_strategy(*jr_strategy);
        if (!s) throw ConfigError("unknown strategy '" + *jr_strategy + "'");
        cfg.strategy.strategy = *s;
      }
      const auto pairs = load_pairs(jr_pairs);
      const auto tasks = judging::plan_tasks(pairs, jr_fwd, jr_rev);
      const auto outcomes = judging::run_tasks(cfg.strategy, tasks, cfg.concurrency);
      std::vector<JudgmentRecord> records;
      std::string trace;
      std::size_t abstained = 0;
      for (const auto& o : outcomes) {
        records.push_back(o.record);
        if (o.record.label == PreferenceLabel::kAbstain) ++abstained;
        trace += judging::to_json(o).dump() + "\n";
      }
      save_records(jr_out, records);
      if (jr_trace) write_text(*jr_trace, trace);
      std::cout << records.size() << " records (" << abstained << " abstained) as "
                << cfg.strategy.effective_judge_id() << "\n";
    } else if (*judge_sweep) {
      auto cfg = judging::load_judge_config(js_config);
      const auto pairs = load_pairs(js_pairs);
      const auto truth = load_truth(js_truth);
      const auto sweep =
          judging::sweep_strategies(cfg.strategy, pairs, truth, cfg.concurrency);
      write_text(js_out, judging::to_json(sweep).dump(2) + "\n");
      if (js_records) {
        std::vector<JudgmentRecord> all;
        for (const auto& e : sweep.entries)
          all.insert(all.end(), e.records.begin(), e.records.end());
        save_records(*js_records, all);
      }
      std::cout << "chosen strategy: " << judging::to_string(sweep.chosen) << "\n";
    } else if (*ens) {
      const auto records = load_records(ens_records);
      const auto truth = load_truth(ens_truth);
      std::map<std::string, std::vector<JudgmentRecord>> by_judge;
      for (const auto& r : records) by_judge[r.judge].push_back(r);
      std::map<std::string, MetricReport> reports;
      for (const auto& [j, own] : by_judge)
        reports.emplace(j, evaluate_judge(j, own, truth));
      ens_cfg.top_n = ens_top;
      const auto selected = judging::filter_judges(reports, ens_cfg);
      const auto out = judging::build_ensemble_records(records, selected, ens_id,
                                                       now_utc());
      save_records(ens_out, out);
      std::cout << "selected:";
      for (const auto& j : selected) std::cout << " " << j;
      std::cout << "\n";
    } else if (*pipe_run) {
      const auto manifest = manifest_with_env(pr_manifest);
      const auto records = load_records(pr_records, &manifest);
      const auto schedule = schedule_for(manifest, pr_schedule, pr_pairs);
      pr_opts.fit = pr_fit.config();
      const auto result = run_pipeline(manifest, schedule, records, pr_opts);
      write_artifacts(pr_out, result);
      std::cout << "ranking:";
      for (const auto& e : rank(result.ranking)) std::cout << " " << e.model;
      std::cout << "\n";
    } else if (*sim) {
      for (std::size_t k = 0; k < sim_annotators; ++k) {
        std::string id = "annotator" + std::to_string(k + 1);
        sim_cfg.annotators.push_back({id, sim_params});
      }
      sim_cfg.bernoulli = !sim_deterministic;
      const auto c = simulate_campaign(sim_cfg);
      fs::create_directories(sim_out);
      save_manifest(sim_out / "manifest.json", c.manifest);
      save_pairs(sim_out / "pairs.jsonl", c.pairs);
      save_schedule(sim_out / "schedule.jsonl", c.schedule);
      save_records(sim_out / "records.jsonl", c.records);
      json planted{{"order", c.planted_order}, {"theta", c.strengths}};
      write_text(sim_out / "planted.json", planted.dump(2) + "\n");
      std::cout << c.records.size() << " records over " << c.schedule.tasks.size()
                << " comparisons\n";
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
