#include <cstdlib>
#include <string>

#include "prefarena/error.hpp"
#include "prefarena/simd/pair_kernels.hpp"

namespace prefarena::simd {

std::string_view to_string(Isa isa) {
  return isa == Isa::kAvx2 ? "avx2" : "scalar";
}

bool isa_supported(Isa isa) {
  switch (isa) {
    case Isa::kScalar:
      return true;
    case Isa::kAvx2:
#if (defined(__x86_64__) || defined(_M_X64)) && defined(__GNUC__)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
  }
  return false;
}

Isa active_isa() {
  static const Isa isa = [] {
    if (const char* env = std::getenv("PREF_ARENA_SIMD");
        env && std::string(env) == "scalar") {
      return Isa::kScalar;
    }
    return isa_supported(Isa::kAvx2) ? Isa::kAvx2 : Isa::kScalar;
  }();
  return isa;
}

double pair_terms(Isa isa, std::span<const double> beta, const PairBatch& batch,
                  std::span<double> coef) {
  const auto n = batch.size();
  if (batch.j.size() != n || batch.fwd.size() != n || batch.rev.size() != n ||
      coef.size() != n) {
    throw Error("pair_terms: batch arrays differ in length");
  }
  if (!isa_supported(isa)) throw Error("pair_terms: ISA not supported here");
  switch (isa) {
#if defined(__x86_64__) || defined(_M_X64)
    case Isa::kAvx2:
      return detail::pair_terms_avx2(beta.data(), batch.i.data(),
                                     batch.j.data(), batch.fwd.data(),
                                     batch.rev.data(), n, coef.data());
#endif
    default:
      return detail::pair_terms_scalar(beta.data(), batch.i.data(),
                                       batch.j.data(), batch.fwd.data(),
                                       batch.rev.data(), n, coef.data());
  }
}

}  // namespace prefarena::simd
