// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace weave {

// One master seed, independent named streams. Disabling a consumer of one
// stream never shifts the draws of another.
class RngPool {
 public:
  explicit RngPool(uint64_t seed) : seed_(seed) {}

  std::mt19937_64 stream(std::string_view name) const {
    // FNV-1a over the name, mixed with the master seed.
    uint64_t h = 14695981039346656037ull;
    for (char c : name) {
      h ^= static_cast<uint8_t>(c);
      h *= 1099511628211ull;
    }
    h ^= seed_ + 0x9e3779b97f4a7c15ull + (h << 6) + (h >> 2);
    std::mt19937_64 g(h);
    g.discard(7);
    return g;
  }

  uint64_t seed() const { return seed_; }

 private:
  uint64_t seed_;
};

inline float rand_uniform(std::mt19937_64& g) {
  return std::uniform_real_distribution<float>(0.0f, 1.0f)(g);
}

inline float rand_normal(std::mt19937_64& g) {
  return std::normal_distribution<float>(0.0f, 1.0f)(g);
}

inline int rand_int(std::mt19937_64& g, int lo, int hi) {  // inclusive range
  return std::uniform_int_distribution<int>(lo, hi)(g);
}

}  // namespace weave
