// Built with -mavx2 -mfma. Only reached through the runtime dispatcher after
// a CPU feature check.

#include <immintrin.h>

#include "prefarena/simd/pair_kernels.hpp"

namespace prefarena::simd::detail {
namespace {

// exp(x) for x <= 0. Inputs below -708 (where the result leaves the normal
// range) return 0.
inline __m256d exp_nonpositive(__m256d x) {
  const __m256d kLog2e = _mm256_set1_pd(1.4426950408889634073599);
  const __m256d kLn2Hi = _mm256_set1_pd(6.93145751953125e-1);
  const __m256d kLn2Lo = _mm256_set1_pd(1.42860682030941723212e-6);
  const __m256d kFloor = _mm256_set1_pd(-708.0);

  const __m256d underflow = _mm256_cmp_pd(x, kFloor, _CMP_LT_OQ);
  x = _mm256_max_pd(x, kFloor);
  const __m256d n = _mm256_round_pd(_mm256_mul_pd(x, kLog2e),
                                    _MM_FROUND_TO_NEAREST_INT |
                                        _MM_FROUND_NO_EXC);
  __m256d r = _mm256_fnmadd_pd(n, kLn2Hi, x);
  r = _mm256_fnmadd_pd(n, kLn2Lo, r);

  // Taylor series to r^13; |r| <= ln(2)/2 keeps the remainder below 1e-17.
  static constexpr double kInvFact[] = {
      1.0 / 6227020800.0, 1.0 / 479001600.0, 1.0 / 39916800.0,
      1.0 / 3628800.0,    1.0 / 362880.0,    1.0 / 40320.0,
      1.0 / 5040.0,       1.0 / 720.0,       1.0 / 120.0,
      1.0 / 24.0,         1.0 / 6.0,         1.0 / 2.0,
      1.0,                1.0};
  __m256d p = _mm256_set1_pd(kInvFact[0]);
  for (int k = 1; k < 14; ++k)
    p = _mm256_fmadd_pd(p, r, _mm256_set1_pd(kInvFact[k]));

  const __m128i n32 = _mm256_cvtpd_epi32(n);
  __m256i bits = _mm256_cvtepi32_epi64(n32);
  bits = _mm256_slli_epi64(_mm256_add_epi64(bits, _mm256_set1_epi64x(1023)), 52);
  const __m256d result = _mm256_mul_pd(p, _mm256_castsi256_pd(bits));
  return _mm256_andnot_pd(underflow, result);
}

// log(1 + e) for e in [0, 1] as 2 atanh(e / (2 + e)); the odd series in
// s = e / (2 + e) <= 1/3 converges without cancellation near e = 0.
inline __m256d log1p_unit(__m256d e) {
  const __m256d two = _mm256_set1_pd(2.0);
  const __m256d s = _mm256_div_pd(e, _mm256_add_pd(two, e));
  const __m256d s2 = _mm256_mul_pd(s, s);
  constexpr int kTerms = 17;
  __m256d p = _mm256_set1_pd(1.0 / (2 * (kTerms - 1) + 1));
  for (int k = kTerms - 2; k >= 0; --k)
    p = _mm256_fmadd_pd(p, s2, _mm256_set1_pd(1.0 / (2 * k + 1)));
  return _mm256_mul_pd(_mm256_mul_pd(two, s), p);
}

inline __m256d block(const double* beta, const std::uint32_t* i,
                     const std::uint32_t* j, __m256d fwd, __m256d rev,
                     __m256d* coef) {
  const __m256d zero = _mm256_setzero_pd();
  const __m256d one = _mm256_set1_pd(1.0);
  const __m256d sign = _mm256_set1_pd(-0.0);

  const __m128i vi = _mm_loadu_si128(reinterpret_cast<const __m128i*>(i));
  const __m128i vj = _mm_loadu_si128(reinterpret_cast<const __m128i*>(j));
  const __m256d bi = _mm256_i32gather_pd(beta, vi, 8);
  const __m256d bj = _mm256_i32gather_pd(beta, vj, 8);
  const __m256d d = _mm256_sub_pd(bi, bj);

  const __m256d neg_abs = _mm256_or_pd(d, sign);
  const __m256d e = exp_nonpositive(neg_abs);
  const __m256d denom = _mm256_add_pd(one, e);
  const __m256d nonneg = _mm256_cmp_pd(d, zero, _CMP_GE_OQ);
  const __m256d sigma =
      _mm256_div_pd(_mm256_blendv_pd(e, one, nonneg), denom);

  const __m256d w = _mm256_add_pd(fwd, rev);
  *coef = _mm256_fmsub_pd(w, sigma, fwd);

  __m256d nll = _mm256_mul_pd(w, log1p_unit(e));
  nll = _mm256_fmadd_pd(fwd, _mm256_max_pd(_mm256_sub_pd(zero, d), zero), nll);
  nll = _mm256_fmadd_pd(rev, _mm256_max_pd(d, zero), nll);
  return nll;
}

}  // namespace

double pair_terms_avx2(const double* beta, const std::uint32_t* i,
                       const std::uint32_t* j, const double* fwd,
                       const double* rev, std::size_t n, double* coef) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t k = 0;
  for (; k + 4 <= n; k += 4) {
    __m256d c;
    acc = _mm256_add_pd(acc, block(beta, i + k, j + k, _mm256_loadu_pd(fwd + k),
                                   _mm256_loadu_pd(rev + k), &c));
    _mm256_storeu_pd(coef + k, c);
  }
  if (k < n) {
    // Zero-weight padding contributes nothing to either output.
    alignas(32) std::uint32_t ti[4] = {0, 0, 0, 0};
    alignas(32) std::uint32_t tj[4] = {0, 0, 0, 0};
    alignas(32) double tf[4] = {0, 0, 0, 0};
    alignas(32) double tr[4] = {0, 0, 0, 0};
    alignas(32) double tc[4];
    const std::size_t rest = n - k;
    for (std::size_t t = 0; t < rest; ++t) {
      ti[t] = i[k + t];
      tj[t] = j[k + t];
      tf[t] = fwd[k + t];
      tr[t] = rev[k + t];
    }
    __m256d c;
    acc = _mm256_add_pd(
        acc, block(beta, ti, tj, _mm256_load_pd(tf), _mm256_load_pd(tr), &c));
    _mm256_store_pd(tc, c);
    for (std::size_t t = 0; t < rest; ++t) coef[k + t] = tc[t];
  }
  alignas(32) double lanes[4];
  _mm256_store_pd(lanes, acc);
  return (lanes[0] + lanes[1]) + (lanes[2] + lanes[3]);
}

}  // namespace prefarena::simd::detail
