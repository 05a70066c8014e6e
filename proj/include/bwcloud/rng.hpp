#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>
#include <string_view>

namespace bwcloud {

using Rng = std::mt19937_64;

inline std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

inline std::uint64_t hash_string(std::string_view s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;  // FNV-1a
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

/// Derives an independent stream seed from a parent seed and a list of labels.
/// Order-independent across call sites: the same (seed, labels) always yields
/// the same child, no matter which other streams were drawn before.
inline std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::string_view> labels) {
  std::uint64_t h = splitmix64(seed);
  for (auto label : labels) h = splitmix64(h ^ hash_string(label));
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t index) { return splitmix64(splitmix64(seed) ^ index); }

inline double uniform01(Rng& rng) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng); }

inline double uniform(Rng& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

inline double gaussian(Rng& rng, double mean, double stdev) {
  if (stdev == 0.0) return mean;
  return std::normal_distribution<double>(mean, stdev)(rng);
}

/// Uniform index in [0, n).
inline std::size_t uniform_index(Rng& rng, std::size_t n) {
  return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
}

}  // namespace bwcloud
