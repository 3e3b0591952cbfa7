#pragma once

#include <cstdint>
#include <random>

namespace stabpa {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer; used to derive independent child seeds.
constexpr std::uint64_t mix_seed(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ULL;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
  return x ^ (x >> 31);
}

/// Seed for the named sub-stream `stream` of a run seeded with `seed`.
constexpr std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  return mix_seed(mix_seed(seed) ^ mix_seed(stream + 0x5851F42D4C957F2DULL));
}

inline Rng make_rng(std::uint64_t seed, std::uint64_t stream) { return Rng(derive_seed(seed, stream)); }

// Stream ids. Keeping them in one place keeps runs reproducible when new
// consumers are added.
namespace streams {
inline constexpr std::uint64_t kGenerator = 1;
inline constexpr std::uint64_t kEncoderInit = 2;
inline constexpr std::uint64_t kHeadInit = 3;
inline constexpr std::uint64_t kInitialBatches = 4;
inline constexpr std::uint64_t kBatches = 5;
inline constexpr std::uint64_t kSourceAugment = 6;
inline constexpr std::uint64_t kTargetAugment = 7;
inline constexpr std::uint64_t kEpisodes = 8;
}  // namespace streams

}  // namespace stabpa
