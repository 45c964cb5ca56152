#pragma once

// strategy.json: backends, templates, retry policy and concurrency for the
// judge commands.
//
//   {
//     "strategy": "s3",
//     "primary": "omni", "external": "text",
//     "judge_id": "omni.s3",                      (optional)
//     "backends": {
//       "omni": {"kind": "multimodal_endpoint", "url": "http://host:8000/v1"},
//       "text": {"kind": "subprocess", "command": ["./ask.sh"]},
//       "sim":  {"kind": "simulated", "multimodal": true, "accuracy": 0.7,
//                "position_bias": 0.1, "tie_rate": 0.0, "seed": 1,
//                "truth": "truth.jsonl"},
//       "old":  {"kind": "replay", "dir": "cache/", "multimodal": true}
//     },
//     "record_dir": "cache/",                     (optional)
//     "templates": {"describe": "..."},           (optional)
//     "retry": {"max_retries": 2, "backoff_ms": 200},
//     "concurrency": 4,
//     "synonyms": {"first": ["option a"], "second": ["option b"]}
//   }
//
// A simulated backend takes its truth either from "truth" (truth.jsonl) or
// from "strengths" ({model: theta}) with an optional "bernoulli" flag.
// Relative paths resolve against the config file's directory.

#include <filesystem>
#include <map>
#include <memory>
#include <string>

#include <nlohmann/json.hpp>

#include "prefarena/judging/strategy.hpp"

namespace prefarena::judging {

struct JudgeConfig {
  StrategyConfig strategy;
  std::map<std::string, std::shared_ptr<JudgeBackend>> backends;
  unsigned concurrency = 4;
};

std::shared_ptr<JudgeBackend> backend_from_json(
    const std::string& id, const nlohmann::json& j,
    const std::filesystem::path& base_dir);

JudgeConfig judge_config_from_json(const nlohmann::json& j,
                                   const std::filesystem::path& base_dir);
JudgeConfig load_judge_config(const std::filesystem::path& path);

}  // namespace prefarena::judging
