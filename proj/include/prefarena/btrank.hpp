#pragma once

// Bradley-Terry strengths by gradient descent on the negative
// log-likelihood, parameterized as beta = ln(theta) with sum(beta) = 0.

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefarena/aggregate.hpp"

namespace prefarena {

// P(i beats j) = theta_i / (theta_i + theta_j). Both must be > 0.
double win_prob(double theta_i, double theta_j);

enum class FitMode { kBinary, kCounts };

std::string_view to_string(FitMode mode);
std::optional<FitMode> parse_fit_mode(std::string_view text);

struct FitConfig {
  FitMode mode = FitMode::kBinary;
  // Added as pseudo-wins in both directions of every observed pair.
  double pseudo_count = 0.01;
  double learning_rate = 0.05;
  std::uint32_t max_iters = 10000;
  double grad_tol = 1e-8;

  void validate() const;
};

struct PairObservation {
  std::uint32_t i;
  std::uint32_t j;
  double wins_ij;  // evidence that i beat j
  double wins_ji;
};

// Pairwise evidence over a fixed model list. Binary observations carry one
// 0/1 outcome per compared pair; count observations carry per-sample wins
// (ties dropped). Pairs without evidence are not stored.
struct Observations {
  FitMode mode = FitMode::kBinary;
  std::vector<std::string> models;
  std::vector<PairObservation> pairs;

  static Observations from_matrix(const PreferenceMatrix& w);
  static Observations from_tallies(std::span<const TallyEntry> tallies,
                                   std::span<const std::string> models);

  std::size_t num_models() const { return models.size(); }
};

// Sum over observed pairs of the pseudo-count augmented negative
// log-likelihood. Throws NoObservationsError when there are no pairs.
double nll(const Observations& obs, std::span<const double> beta,
           double pseudo_count);
std::vector<double> grad_nll(const Observations& obs,
                             std::span<const double> beta,
                             double pseudo_count);

struct RankEntry {
  std::string model;
  double theta;
  double beta;
  // Set when this entry's strength equals the previous entry's and the
  // order between them came from the model-id tie-break.
  bool tied_with_previous = false;
};

struct RankResult {
  std::vector<std::string> models;  // input order
  std::vector<double> beta;         // input order, sums to 0
  std::vector<std::size_t> ordering;
  std::uint32_t iterations = 0;
  double grad_norm = 0.0;
  bool converged = false;
  FitConfig config;

  double theta(std::size_t i) const;
};

// Throws DisconnectedGraphError when the observed pairs do not connect all
// models, DivergenceError when the estimate has no finite optimum (perfect
// separation with a zero pseudo-count) or the objective turns non-finite.
RankResult fit(const Observations& obs, const FitConfig& config,
               std::optional<std::vector<double>> initial_beta = std::nullopt);

// Descending strength; equal strengths ordered by model id and flagged.
std::vector<RankEntry> rank(const RankResult& result);

nlohmann::json ranking_to_json(const RankResult& result);

}  // namespace prefarena
