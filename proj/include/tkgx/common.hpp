#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace tkgx {

struct ParseError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ContractError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
  if (!cond) throw ContractError(msg);
}

// Deterministic RNG helpers. std::uniform_*_distribution is not pinned by the
// standard, so all sampling goes through these to keep runs reproducible
// across toolchains.
inline double rng_uniform01(std::mt19937_64& rng) {
  return (rng() >> 11) * 0x1.0p-53;
}

inline double rng_uniform(std::mt19937_64& rng, double lo, double hi) {
  return lo + (hi - lo) * rng_uniform01(rng);
}

inline uint64_t rng_below(std::mt19937_64& rng, uint64_t n) {
  // rejection sampling, unbiased
  const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
  uint64_t x;
  do {
    x = rng();
  } while (x >= limit);
  return x % n;
}

inline uint64_t fnv1a64(const void* data, size_t len, uint64_t seed = 0xcbf29ce484222325ULL) {
  const auto* p = static_cast<const unsigned char*>(data);
  uint64_t h = seed;
  for (size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace tkgx
