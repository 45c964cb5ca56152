#pragma once

// Completion backends behind the judge pipelines. Every backend speaks the
// same contract: a request (step role, filled prompt, optional media
// reference) in, response text out.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/corpus.hpp"
#include "prefarena/error.hpp"

namespace prefarena::judging {

enum class StepRole { kDescribe, kPrefer, kReason, kPreferFromReasoning };
enum class BackendKind {
  kMultimodalEndpoint,
  kTextEndpoint,
  kSubprocess,
  kSimulated,
  kReplay
};

std::string_view to_string(StepRole role);
std::string_view to_string(BackendKind kind);
std::optional<BackendKind> parse_backend_kind(std::string_view text);

// Bookkeeping that travels with a request. Only test doubles read it; it is
// not part of the wire payload or the replay hash.
struct RequestContext {
  std::string pair_id;
  std::string sample;
  std::string model_a;
  std::string model_b;
  Direction direction = Direction::kForward;
  std::uint32_t run = 0;
};

struct BackendRequest {
  StepRole role = StepRole::kPrefer;
  std::string prompt;
  std::optional<std::string> media;
  RequestContext context;
};

// {"role": ..., "prompt": ..., "media": ... | null}
nlohmann::json wire_payload(const BackendRequest& request);
// Hex SHA-256 of the compact wire payload.
std::string request_hash(const BackendRequest& request);

// Failure that retrying cannot fix (e.g. a replay cache miss).
class PermanentBackendError : public BackendError {
 public:
  using BackendError::BackendError;
};

class JudgeBackend {
 public:
  virtual ~JudgeBackend() = default;

  virtual const std::string& id() const = 0;
  virtual BackendKind kind() const = 0;
  virtual bool accepts_media() const = 0;

  // Throws BackendError on failure.
  virtual std::string complete(const BackendRequest& request) = 0;
};

class BackendBase : public JudgeBackend {
 public:
  BackendBase(std::string id, BackendKind kind, bool accepts_media)
      : id_(std::move(id)), kind_(kind), accepts_media_(accepts_media) {}

  const std::string& id() const override { return id_; }
  BackendKind kind() const override { return kind_; }
  bool accepts_media() const override { return accepts_media_; }

 protected:
  // Raises ConfigError when media reaches a text-only backend.
  void check_media(const BackendRequest& request) const;

 private:
  std::string id_;
  BackendKind kind_;
  bool accepts_media_;
};

// POSTs the wire payload as JSON to `url` and reads {"text": ...} back.
// The multimodal kind forwards the media reference; the text kind refuses
// requests that carry one.
class HttpBackend : public BackendBase {
 public:
  HttpBackend(std::string id, BackendKind kind, std::string url,
              std::chrono::seconds timeout = std::chrono::seconds(120));
  std::string complete(const BackendRequest& request) override;

 private:
  std::string scheme_host_port_;
  std::string path_;
  std::chrono::seconds timeout_;
};

// Runs `argv` once per request, writes the wire payload plus a newline to
// its stdin and returns its stdout. A nonzero exit status is a failure.
class SubprocessBackend : public BackendBase {
 public:
  SubprocessBackend(std::string id, std::vector<std::string> argv,
                    bool accepts_media);
  std::string complete(const BackendRequest& request) override;

 private:
  std::vector<std::string> argv_;
};

// Serves responses from <dir>/<request_hash>.txt.
class ReplayBackend : public BackendBase {
 public:
  ReplayBackend(std::string id, std::filesystem::path dir, bool accepts_media);
  std::string complete(const BackendRequest& request) override;

 private:
  std::filesystem::path dir_;
};

// Forwards to another backend and stores each response in a replay cache.
class RecordingBackend : public JudgeBackend {
 public:
  RecordingBackend(std::shared_ptr<JudgeBackend> inner,
                   std::filesystem::path dir);
  const std::string& id() const override { return inner_->id(); }
  BackendKind kind() const override { return inner_->kind(); }
  bool accepts_media() const override { return inner_->accepts_media(); }
  std::string complete(const BackendRequest& request) override;

 private:
  std::shared_ptr<JudgeBackend> inner_;
  std::filesystem::path dir_;
};

// Gold canonical label for the pair a request is about; nullopt if unknown.
using TruthOracle =
    std::function<std::optional<PreferenceLabel>(const RequestContext&)>;

TruthOracle truth_from_table(std::map<std::string, PreferenceLabel> table);

// Truth from planted model strengths. Deterministic: the stronger model
// wins (equal strengths tie). Bernoulli: model_a wins with probability
// theta_a / (theta_a + theta_b), drawn per pair from `seed`.
TruthOracle truth_from_strengths(std::map<std::string, double> strengths,
                                 bool bernoulli, std::uint64_t seed);

struct SimulatedJudgeParams {
  double accuracy = 1.0;       // P(correct) once a content judgment is made
  double position_bias = 0.0;  // P(answer "description 1" regardless)
  double tie_rate = 0.0;       // P(answer tie) on content judgments
  std::uint64_t seed = 0;

  void validate() const;
};

// Desk-scale stand-in for a model judge. The content judgment (tie /
// correct / wrong) is a fixed property of the judge and the pair, so it
// does not depend on presentation order or run; the position-bias draw is
// made per presentation (pair, direction, run).
class SimulatedBackend : public BackendBase {
 public:
  SimulatedBackend(std::string id, SimulatedJudgeParams params,
                   TruthOracle truth, bool accepts_media);
  std::string complete(const BackendRequest& request) override;
  const SimulatedJudgeParams& params() const { return params_; }

 private:
  SimulatedJudgeParams params_;
  TruthOracle truth_;
};

// Uniform draw in [0, 1) derived from a seed and a string key.
double keyed_uniform(std::uint64_t seed, std::string_view key);

}  // namespace prefarena::judging
