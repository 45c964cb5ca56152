#pragma once

// Data-parallel inner loop of the Bradley-Terry objective.
//
// For every observed model pair k = (i, j) with pseudo-count weights
// fwd_k (i beat j) and rev_k (j beat i), and d_k = beta_i - beta_j:
//
//   nll  += fwd_k * softplus(-d_k) + rev_k * softplus(d_k)
//   coef_k = (fwd_k + rev_k) * sigmoid(d_k) - fwd_k
//
// coef_k is d(nll)/d(beta_i); the caller scatters +coef_k to i and -coef_k
// to j. The scalar kernel is the reference; the AVX2 kernel must agree with
// it to within a few ulps per term.

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>

namespace prefarena::simd {

struct PairBatch {
  std::span<const std::uint32_t> i;
  std::span<const std::uint32_t> j;
  std::span<const double> fwd;
  std::span<const double> rev;

  std::size_t size() const { return i.size(); }
};

enum class Isa { kScalar, kAvx2 };

std::string_view to_string(Isa isa);
bool isa_supported(Isa isa);

// Selected once per process: the best supported ISA, unless the
// PREF_ARENA_SIMD environment variable is "scalar".
Isa active_isa();

// Returns the summed nll term and writes coef (same length as the batch).
double pair_terms(Isa isa, std::span<const double> beta, const PairBatch& batch,
                  std::span<double> coef);

inline double pair_terms(std::span<const double> beta, const PairBatch& batch,
                         std::span<double> coef) {
  return pair_terms(active_isa(), beta, batch, coef);
}

namespace detail {

double pair_terms_scalar(const double* beta, const std::uint32_t* i,
                         const std::uint32_t* j, const double* fwd,
                         const double* rev, std::size_t n, double* coef);

#if defined(__x86_64__) || defined(_M_X64)
double pair_terms_avx2(const double* beta, const std::uint32_t* i,
                       const std::uint32_t* j, const double* fwd,
                       const double* rev, std::size_t n, double* coef);
#endif

}  // namespace detail

}  // namespace prefarena::simd
