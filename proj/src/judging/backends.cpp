#include <fcntl.h>
#include <openssl/evp.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <fstream>
#include <mutex>
#include <sstream>

#include <httplib.h>

#include "prefarena/judging/backend.hpp"

namespace prefarena::judging {

using nlohmann::json;

std::string_view to_string(StepRole role) {
  switch (role) {
    case StepRole::kDescribe:
      return "describe";
    case StepRole::kPrefer:
      return "prefer";
    case StepRole::kReason:
      return "reason";
    case StepRole::kPreferFromReasoning:
      return "prefer_from_reasoning";
  }
  return "prefer";
}

std::string_view to_string(BackendKind kind) {
  switch (kind) {
    case BackendKind::kMultimodalEndpoint:
      return "multimodal_endpoint";
    case BackendKind::kTextEndpoint:
      return "text_endpoint";
    case BackendKind::kSubprocess:
      return "subprocess";
    case BackendKind::kSimulated:
      return "simulated";
    case BackendKind::kReplay:
      return "replay";
  }
  return "replay";
}

std::optional<BackendKind> parse_backend_kind(std::string_view text) {
  for (auto k : {BackendKind::kMultimodalEndpoint, BackendKind::kTextEndpoint,
                 BackendKind::kSubprocess, BackendKind::kSimulated,
                 BackendKind::kReplay}) {
    if (to_string(k) == text) return k;
  }
  return std::nullopt;
}

json wire_payload(const BackendRequest& request) {
  return json{{"role", to_string(request.role)},
              {"prompt", request.prompt},
              {"media", request.media ? json(*request.media) : json()}};
}

std::string request_hash(const BackendRequest& request) {
  const std::string payload = wire_payload(request).dump();
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(payload.data(), payload.size(), digest, &len, EVP_sha256(),
                 nullptr) != 1) {
    throw Error("SHA-256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  out.reserve(len * 2);
  for (unsigned int k = 0; k < len; ++k) {
    out += kHex[digest[k] >> 4];
    out += kHex[digest[k] & 0xf];
  }
  return out;
}

void BackendBase::check_media(const BackendRequest& request) const {
  if (request.media && !accepts_media())
    throw ConfigError("backend '" + id() +
                      "' is text-only but the request carries media");
}

// ---------------------------------------------------------------------------
// HTTP

HttpBackend::HttpBackend(std::string id, BackendKind kind, std::string url,
                         std::chrono::seconds timeout)
    : BackendBase(std::move(id), kind, kind == BackendKind::kMultimodalEndpoint),
      timeout_(timeout) {
  if (kind != BackendKind::kMultimodalEndpoint &&
      kind != BackendKind::kTextEndpoint)
    throw ConfigError("HttpBackend needs an endpoint kind");
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos)
    throw ConfigError("backend url '" + url + "' lacks a scheme");
  const auto path_start = url.find('/', scheme_end + 3);
  scheme_host_port_ = url.substr(0, path_start);
  path_ = path_start == std::string::npos ? "/" : url.substr(path_start);
}

std::string HttpBackend::complete(const BackendRequest& request) {
  check_media(request);
  httplib::Client client(scheme_host_port_);
  client.set_connection_timeout(timeout_);
  client.set_read_timeout(timeout_);
  client.set_write_timeout(timeout_);
  auto res = client.Post(path_, wire_payload(request).dump(), "application/json");
  if (!res)
    throw BackendError("backend '" + id() + "': " + httplib::to_string(res.error()));
  if (res->status != 200)
    throw BackendError("backend '" + id() + "': HTTP " +
                       std::to_string(res->status));
  try {
    const auto j = json::parse(res->body);
    return j.at("text").get<std::string>();
  } catch (const json::exception& e) {
    throw BackendError("backend '" + id() + "': malformed response: " + e.what());
  }
}

// ---------------------------------------------------------------------------
// Subprocess

SubprocessBackend::SubprocessBackend(std::string id,
                                     std::vector<std::string> argv,
                                     bool accepts_media)
    : BackendBase(std::move(id), BackendKind::kSubprocess, accepts_media),
      argv_(std::move(argv)) {
  if (argv_.empty()) throw ConfigError("subprocess backend needs a command");
  // A child that exits without draining stdin must not kill us on write.
  static std::once_flag ignore_sigpipe;
  std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });
}

namespace {

struct Fd {
  int fd = -1;
  ~Fd() { reset(); }
  void reset() {
    if (fd >= 0) ::close(fd);
    fd = -1;
  }
};

}  // namespace

std::string SubprocessBackend::complete(const BackendRequest& request) {
  check_media(request);
  int in_pipe[2], out_pipe[2];
  if (::pipe(in_pipe) != 0) throw BackendError("pipe failed");
  if (::pipe(out_pipe) != 0) {
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    throw BackendError("pipe failed");
  }
  std::vector<char*> args;
  for (auto& a : argv_) args.push_back(a.data());
  args.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) throw BackendError("fork failed");
  if (pid == 0) {
    ::dup2(in_pipe[0], STDIN_FILENO);
    ::dup2(out_pipe[1], STDOUT_FILENO);
    ::close(in_pipe[0]);
    ::close(in_pipe[1]);
    ::close(out_pipe[0]);
    ::close(out_pipe[1]);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  ::close(in_pipe[0]);
  ::close(out_pipe[1]);
  Fd to_child{in_pipe[1]};
  Fd from_child{out_pipe[0]};
  ::fcntl(to_child.fd, F_SETFL, O_NONBLOCK);

  const std::string input = wire_payload(request).dump() + "\n";
  std::size_t sent = 0;
  std::string output;
  char buf[4096];
  // Interleave writing and reading so a chatty child cannot deadlock us.
  while (from_child.fd >= 0) {
    pollfd fds[2];
    nfds_t n = 0;
    fds[n++] = {from_child.fd, POLLIN, 0};
    if (to_child.fd >= 0) fds[n++] = {to_child.fd, POLLOUT, 0};
    if (::poll(fds, n, -1) < 0) {
      if (errno == EINTR) continue;
      break;
    }
    if (n == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const auto w = ::write(to_child.fd, input.data() + sent, input.size() - sent);
      if (w > 0) sent += static_cast<std::size_t>(w);
      if (w < 0 && errno != EAGAIN) sent = input.size();
      if (sent == input.size()) to_child.reset();
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      const auto r = ::read(from_child.fd, buf, sizeof buf);
      if (r > 0) {
        output.append(buf, static_cast<std::size_t>(r));
      } else if (r == 0 || errno != EINTR) {
        from_child.reset();
      }
    }
  }
  to_child.reset();
  int status = 0;
  ::waitpid(pid, &status, 0);
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0)
    throw BackendError("backend '" + id() + "': command exited with status " +
                       std::to_string(WIFEXITED(status) ? WEXITSTATUS(status) : -1));
  while (!output.empty() && (output.back() == '\n' || output.back() == '\r'))
    output.pop_back();
  return output;
}

// ---------------------------------------------------------------------------
// Replay / recording

ReplayBackend::ReplayBackend(std::string id, std::filesystem::path dir,
                             bool accepts_media)
    : BackendBase(std::move(id), BackendKind::kReplay, accepts_media),
      dir_(std::move(dir)) {}

std::string ReplayBackend::complete(const BackendRequest& request) {
  check_media(request);
  const auto hash = request_hash(request);
  std::ifstream in(dir_ / (hash + ".txt"), std::ios::binary);
  if (!in)
    throw PermanentBackendError("backend '" + id() + "': replay cache miss " +
                                hash);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

RecordingBackend::RecordingBackend(std::shared_ptr<JudgeBackend> inner,
                                   std::filesystem::path dir)
    : inner_(std::move(inner)), dir_(std::move(dir)) {
  std::filesystem::create_directories(dir_);
}

std::string RecordingBackend::complete(const BackendRequest& request) {
  auto text = inner_->complete(request);
  const auto final_path = dir_ / (request_hash(request) + ".txt");
  // Identical requests can be in flight on several threads; each writes its
  // own temporary file and the renames replace one another atomically.
  static std::atomic<std::uint64_t> counter{0};
  const auto tmp = final_path.string() + "." + std::to_string(::getpid()) + "." +
                   std::to_string(counter++) + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary);
    out << text;
  }
  std::filesystem::rename(tmp, final_path);
  return text;
}

// ---------------------------------------------------------------------------
// Simulated

double keyed_uniform(std::uint64_t seed, std::string_view key) {
  // FNV-1a over the key, then the splitmix64 finalizer.
  std::uint64_t h = 1469598103934665603ull ^ seed;
  for (unsigned char c : key) {
    h ^= c;
    h *= 1099511628211ull;
  }
  h += 0x9e3779b97f4a7c15ull;
  h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
  h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
  h ^= h >> 31;
  return double(h >> 11) * 0x1.0p-53;
}

TruthOracle truth_from_table(std::map<std::string, PreferenceLabel> table) {
  auto shared =
      std::make_shared<const std::map<std::string, PreferenceLabel>>(
          std::move(table));
  return [shared](const RequestContext& ctx) -> std::optional<PreferenceLabel> {
    auto it = shared->find(ctx.pair_id);
    if (it == shared->end()) return std::nullopt;
    return it->second;
  };
}

TruthOracle truth_from_strengths(std::map<std::string, double> strengths,
                                 bool bernoulli, std::uint64_t seed) {
  for (const auto& [model, theta] : strengths)
    if (!(theta > 0.0))
      throw ConfigError("planted strength of '" + model + "' must be > 0");
  auto shared = std::make_shared<const std::map<std::string, double>>(
      std::move(strengths));
  return [shared, bernoulli,
          seed](const RequestContext& ctx) -> std::optional<PreferenceLabel> {
    auto a = shared->find(ctx.model_a);
    auto b = shared->find(ctx.model_b);
    if (a == shared->end() || b == shared->end()) return std::nullopt;
    if (bernoulli) {
      const double p = a->second / (a->second + b->second);
      return keyed_uniform(seed, "planted|" + ctx.pair_id) < p
                 ? PreferenceLabel::kFirst
                 : PreferenceLabel::kSecond;
    }
    if (a->second > b->second) return PreferenceLabel::kFirst;
    if (a->second < b->second) return PreferenceLabel::kSecond;
    return PreferenceLabel::kTie;
  };
}

void SimulatedJudgeParams::validate() const {
  auto unit = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!unit(accuracy) || !unit(position_bias) || !unit(tie_rate))
    throw ConfigError("simulated judge parameters must lie in [0, 1]");
}

SimulatedBackend::SimulatedBackend(std::string id, SimulatedJudgeParams params,
                                   TruthOracle truth, bool accepts_media)
    : BackendBase(std::move(id), BackendKind::kSimulated, accepts_media),
      params_(params),
      truth_(std::move(truth)) {
  params_.validate();
  if (!truth_) throw ConfigError("simulated backend needs a truth source");
}

std::string SimulatedBackend::complete(const BackendRequest& request) {
  check_media(request);
  const auto& ctx = request.context;
  switch (request.role) {
    case StepRole::kDescribe:
      return "The character in sample " + ctx.sample +
             " shows a mixed emotional state with visible tension.";
    case StepRole::kReason:
      return "Comparing both candidate descriptions against the reference "
             "for sample " + ctx.sample + ".";
    case StepRole::kPrefer:
    case StepRole::kPreferFromReasoning:
      break;
  }

  const std::string presentation = ctx.pair_id + "|" +
                                   std::string(to_string(ctx.direction)) + "|" +
                                   std::to_string(ctx.run);
  if (keyed_uniform(params_.seed, "bias|" + presentation) <
      params_.position_bias)
    return "Description 1";

  const auto truth = truth_(ctx);
  if (!truth)
    throw PermanentBackendError("simulated judge has no truth for '" +
                                ctx.pair_id + "'");
  PreferenceLabel canonical;
  if (keyed_uniform(params_.seed, "tie|" + ctx.pair_id) < params_.tie_rate) {
    canonical = PreferenceLabel::kTie;
  } else if (keyed_uniform(params_.seed, "correct|" + ctx.pair_id) <
             params_.accuracy) {
    canonical = *truth;
  } else if (*truth == PreferenceLabel::kTie) {
    canonical = keyed_uniform(params_.seed, "side|" + ctx.pair_id) < 0.5
                    ? PreferenceLabel::kFirst
                    : PreferenceLabel::kSecond;
  } else {
    canonical = mirror(*truth);
  }
  const auto presented = ctx.direction == Direction::kReversed
                             ? mirror(canonical)
                             : canonical;
  switch (presented) {
    case PreferenceLabel::kFirst:
      return "Description 1";
    case PreferenceLabel::kSecond:
      return "Description 2";
    default:
      return "Tie";
  }
}

}  // namespace prefarena::judging
