#include "prefarena/btrank.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "prefarena/error.hpp"
#include "prefarena/simd/pair_kernels.hpp"

namespace prefarena {

namespace {

// Strengths closer than this in log space rank as tied.
constexpr double kTieTolerance = 1e-9;

struct Batch {
  std::vector<std::uint32_t> i, j;
  std::vector<double> fwd, rev;

  simd::PairBatch view() const { return {i, j, fwd, rev}; }
};

Batch make_batch(const Observations& obs, double pseudo_count) {
  if (obs.pairs.empty()) throw NoObservationsError("no observed pairs");
  Batch b;
  const auto n = obs.pairs.size();
  b.i.reserve(n);
  b.j.reserve(n);
  b.fwd.reserve(n);
  b.rev.reserve(n);
  for (const auto& p : obs.pairs) {
    b.i.push_back(p.i);
    b.j.push_back(p.j);
    b.fwd.push_back(p.wins_ij + pseudo_count);
    b.rev.push_back(p.wins_ji + pseudo_count);
  }
  return b;
}

void check_beta(const Observations& obs, std::span<const double> beta) {
  if (beta.size() != obs.num_models())
    throw ValidationError("beta has " + std::to_string(beta.size()) +
                          " entries, expected " +
                          std::to_string(obs.num_models()));
}

void scatter(const Batch& b, std::span<const double> coef,
             std::span<double> grad) {
  std::fill(grad.begin(), grad.end(), 0.0);
  for (std::size_t k = 0; k < coef.size(); ++k) {
    grad[b.i[k]] += coef[k];
    grad[b.j[k]] -= coef[k];
  }
}

void recenter(std::vector<double>& beta) {
  const double mean =
      std::accumulate(beta.begin(), beta.end(), 0.0) / double(beta.size());
  for (auto& b : beta) b -= mean;
}

// Connected components of the undirected graph of observed pairs.
std::vector<std::vector<std::size_t>> components(const Observations& obs) {
  const auto m = obs.num_models();
  std::vector<std::size_t> parent(m);
  std::iota(parent.begin(), parent.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (parent[x] != x) x = parent[x] = parent[parent[x]];
    return x;
  };
  for (const auto& p : obs.pairs) parent[find(p.i)] = find(p.j);
  std::vector<std::vector<std::size_t>> groups;
  std::vector<long> slot(m, -1);
  for (std::size_t v = 0; v < m; ++v) {
    const auto r = find(v);
    if (slot[r] < 0) {
      slot[r] = static_cast<long>(groups.size());
      groups.emplace_back();
    }
    groups[static_cast<std::size_t>(slot[r])].push_back(v);
  }
  return groups;
}

// With no pseudo-count a finite MLE exists iff the directed "beat" graph is
// strongly connected.
bool strongly_connected(const Observations& obs) {
  const auto m = obs.num_models();
  std::vector<std::vector<std::size_t>> fwd(m), back(m);
  for (const auto& p : obs.pairs) {
    if (p.wins_ij > 0) {
      fwd[p.i].push_back(p.j);
      back[p.j].push_back(p.i);
    }
    if (p.wins_ji > 0) {
      fwd[p.j].push_back(p.i);
      back[p.i].push_back(p.j);
    }
  }
  auto reaches_all = [m](const std::vector<std::vector<std::size_t>>& adj) {
    std::vector<bool> seen(m, false);
    std::vector<std::size_t> stack{0};
    seen[0] = true;
    std::size_t count = 1;
    while (!stack.empty()) {
      const auto v = stack.back();
      stack.pop_back();
      for (auto w : adj[v]) {
        if (!seen[w]) {
          seen[w] = true;
          ++count;
          stack.push_back(w);
        }
      }
    }
    return count == m;
  };
  return reaches_all(fwd) && reaches_all(back);
}

}  // namespace

double win_prob(double theta_i, double theta_j) {
  if (!(theta_i > 0.0) || !(theta_j > 0.0))
    throw ValidationError("win_prob: strengths must be positive");
  return theta_i / (theta_i + theta_j);
}

std::string_view to_string(FitMode mode) {
  return mode == FitMode::kBinary ? "binary" : "counts";
}

std::optional<FitMode> parse_fit_mode(std::string_view text) {
  if (text == "binary") return FitMode::kBinary;
  if (text == "counts") return FitMode::kCounts;
  return std::nullopt;
}

void FitConfig::validate() const {
  if (!(pseudo_count >= 0.0) || !std::isfinite(pseudo_count))
    throw ConfigError("pseudo-count must be >= 0");
  if (!(learning_rate > 0.0) || !std::isfinite(learning_rate))
    throw ConfigError("learning rate must be > 0");
  if (!(grad_tol >= 0.0)) throw ConfigError("grad_tol must be >= 0");
}

Observations Observations::from_matrix(const PreferenceMatrix& w) {
  w.validate();
  Observations obs;
  obs.mode = FitMode::kBinary;
  obs.models = w.models();
  for (std::size_t i = 0; i < w.size(); ++i) {
    for (std::size_t j = i + 1; j < w.size(); ++j) {
      if (!w.observed(i, j)) continue;
      obs.pairs.push_back({static_cast<std::uint32_t>(i),
                           static_cast<std::uint32_t>(j),
                           static_cast<double>(w.at(i, j)),
                           static_cast<double>(w.at(j, i))});
    }
  }
  return obs;
}

Observations Observations::from_tallies(std::span<const TallyEntry> tallies,
                                        std::span<const std::string> models) {
  Observations obs;
  obs.mode = FitMode::kCounts;
  obs.models.assign(models.begin(), models.end());
  std::vector<bool> seen(models.size() * models.size(), false);
  for (const auto& e : tallies) {
    auto index = [&](const std::string& id) {
      auto it = std::find(models.begin(), models.end(), id);
      if (it == models.end())
        throw ValidationError("tally references unknown model '" + id + "'");
      return static_cast<std::uint32_t>(it - models.begin());
    };
    auto i = index(e.model_i);
    auto j = index(e.model_j);
    if (i == j) throw ValidationError("tally pairs a model with itself");
    PairTally t = e.tally;
    if (i > j) {
      std::swap(i, j);
      t = swapped(t);
    }
    if (seen[i * models.size() + j])
      throw ValidationError("duplicate tally for pair (" + e.model_i + ", " +
                            e.model_j + ")");
    seen[i * models.size() + j] = true;
    if (t.wins_i + t.wins_j == 0) continue;  // ties only: no BT evidence
    obs.pairs.push_back(
        {i, j, static_cast<double>(t.wins_i), static_cast<double>(t.wins_j)});
  }
  return obs;
}

double nll(const Observations& obs, std::span<const double> beta,
           double pseudo_count) {
  check_beta(obs, beta);
  const auto batch = make_batch(obs, pseudo_count);
  std::vector<double> coef(batch.i.size());
  return simd::pair_terms(beta, batch.view(), coef);
}

std::vector<double> grad_nll(const Observations& obs,
                             std::span<const double> beta,
                             double pseudo_count) {
  check_beta(obs, beta);
  const auto batch = make_batch(obs, pseudo_count);
  std::vector<double> coef(batch.i.size());
  simd::pair_terms(beta, batch.view(), coef);
  std::vector<double> grad(beta.size());
  scatter(batch, coef, grad);
  return grad;
}

double RankResult::theta(std::size_t i) const { return std::exp(beta.at(i)); }

RankResult fit(const Observations& obs, const FitConfig& config,
               std::optional<std::vector<double>> initial_beta) {
  config.validate();
  if (obs.mode != config.mode)
    throw ConfigError(std::string("observations are in ") +
                      std::string(to_string(obs.mode)) +
                      " mode but the fit asks for " +
                      std::string(to_string(config.mode)));
  if (obs.pairs.empty()) throw NoObservationsError("no observed pairs");
  const auto m = obs.num_models();

  const auto groups = components(obs);
  if (groups.size() > 1) {
    std::ostringstream msg;
    msg << "comparison graph is disconnected:";
    for (const auto& g : groups) {
      msg << " {";
      for (std::size_t k = 0; k < g.size(); ++k)
        msg << (k ? ", " : "") << obs.models[g[k]];
      msg << "}";
    }
    throw DisconnectedGraphError(msg.str());
  }
  if (config.pseudo_count == 0.0 && !strongly_connected(obs)) {
    throw DivergenceError(
        "perfect separation: some models never lose (or never win) against "
        "the rest, so the likelihood has no finite maximum; use a positive "
        "pseudo-count");
  }

  std::vector<double> beta = initial_beta.value_or(std::vector<double>(m, 0.0));
  check_beta(obs, beta);
  recenter(beta);

  const auto batch = make_batch(obs, config.pseudo_count);
  // Step on the objective divided by the mean evidence per pair, so one
  // learning rate suits both 0/1 matrices and large count tallies.
  const double total = std::accumulate(batch.fwd.begin(), batch.fwd.end(), 0.0) +
                       std::accumulate(batch.rev.begin(), batch.rev.end(), 0.0);
  const double scale = double(batch.i.size()) / total;

  std::vector<double> coef(batch.i.size());
  std::vector<double> grad(m);
  const auto isa = simd::active_isa();

  RankResult result;
  result.models = obs.models;
  result.config = config;
  std::uint32_t iter = 0;
  double grad_norm = 0.0;
  for (;; ++iter) {
    const double value = simd::pair_terms(isa, beta, batch.view(), coef);
    if (!std::isfinite(value))
      throw DivergenceError("objective became non-finite at iteration " +
                            std::to_string(iter));
    scatter(batch, coef, grad);
    double sq = 0.0;
    for (auto& g : grad) {
      g *= scale;
      sq += g * g;
    }
    grad_norm = std::sqrt(sq);
    if (grad_norm <= config.grad_tol) {
      result.converged = true;
      break;
    }
    if (iter == config.max_iters) break;
    for (std::size_t k = 0; k < m; ++k) beta[k] -= config.learning_rate * grad[k];
    recenter(beta);
  }
  for (auto b : beta)
    if (!std::isfinite(b)) throw DivergenceError("strengths became non-finite");

  result.beta = std::move(beta);
  result.iterations = iter;
  result.grad_norm = grad_norm;
  const auto entries = rank(result);
  result.ordering.clear();
  for (const auto& e : entries) {
    auto it = std::find(result.models.begin(), result.models.end(), e.model);
    result.ordering.push_back(
        static_cast<std::size_t>(it - result.models.begin()));
  }
  return result;
}

std::vector<RankEntry> rank(const RankResult& result) {
  std::vector<std::size_t> idx(result.models.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (result.beta[a] != result.beta[b]) return result.beta[a] > result.beta[b];
    return result.models[a] < result.models[b];
  });
  // Group near-equal strengths and order each group by id.
  std::vector<RankEntry> out;
  out.reserve(idx.size());
  std::size_t start = 0;
  while (start < idx.size()) {
    std::size_t end = start + 1;
    while (end < idx.size() &&
           result.beta[idx[start]] - result.beta[idx[end]] <= kTieTolerance)
      ++end;
    std::sort(idx.begin() + long(start), idx.begin() + long(end),
              [&](std::size_t a, std::size_t b) {
                return result.models[a] < result.models[b];
              });
    for (std::size_t k = start; k < end; ++k) {
      const auto v = idx[k];
      out.push_back({result.models[v], std::exp(result.beta[v]), result.beta[v],
                     k > start});
    }
    start = end;
  }
  return out;
}

nlohmann::json ranking_to_json(const RankResult& result) {
  using nlohmann::json;
  const auto entries = rank(result);
  json ordering = json::array();
  json models = json::array();
  std::size_t position = 0;
  for (const auto& e : entries) {
    ordering.push_back(e.model);
    models.push_back({{"rank", ++position},
                      {"model", e.model},
                      {"theta", e.theta},
                      {"beta", e.beta},
                      {"tied_with_previous", e.tied_with_previous}});
  }
  return json{
      {"ordering", std::move(ordering)},
      {"models", std::move(models)},
      {"diagnostics",
       {{"mode", to_string(result.config.mode)},
        {"lambda", result.config.pseudo_count},
        {"learning_rate", result.config.learning_rate},
        {"max_iters", result.config.max_iters},
        {"grad_tol", result.config.grad_tol},
        {"iterations", result.iterations},
        {"grad_norm", result.grad_norm},
        {"converged", result.converged}}}};
}

}  // namespace prefarena
