#include <algorithm>
#include <cmath>

#include "prefarena/simd/pair_kernels.hpp"

namespace prefarena::simd::detail {

double pair_terms_scalar(const double* beta, const std::uint32_t* i,
                         const std::uint32_t* j, const double* fwd,
                         const double* rev, std::size_t n, double* coef) {
  double nll = 0.0;
  for (std::size_t k = 0; k < n; ++k) {
    const double d = beta[i[k]] - beta[j[k]];
    const double e = std::exp(-std::abs(d));
    const double sigma = d >= 0.0 ? 1.0 / (1.0 + e) : e / (1.0 + e);
    const double w = fwd[k] + rev[k];
    nll += fwd[k] * std::max(-d, 0.0) + rev[k] * std::max(d, 0.0) +
           w * std::log1p(e);
    coef[k] = w * sigma - fwd[k];
  }
  return nll;
}

}  // namespace prefarena::simd::detail
