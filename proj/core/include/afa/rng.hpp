#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace afa {

using Rng = std::mt19937_64;

/// Derives an independent stream seed from a base seed and a purpose tag.
/// Every stochastic consumer (init, shuffling, augmentation, dropout, the
/// discriminator) draws from its own derived stream so that enabling one
/// component never shifts the random sequence seen by another.
std::uint64_t derive_seed(std::uint64_t base, std::string_view purpose, std::uint64_t index = 0);

inline Rng make_rng(std::uint64_t base, std::string_view purpose, std::uint64_t index = 0) {
  return Rng(derive_seed(base, purpose, index));
}

/// Uniform double in [0, 1) built from the raw 64-bit engine output so the
/// stream is identical across standard library implementations.
inline double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline double uniform(Rng& rng, double lo, double hi) { return lo + (hi - lo) * uniform01(rng); }

/// Uniform integer in [0, n).
inline std::uint64_t uniform_index(Rng& rng, std::uint64_t n) {
  return static_cast<std::uint64_t>(uniform01(rng) * static_cast<double>(n)) % n;
}

double standard_normal(Rng& rng);

}  // namespace afa
