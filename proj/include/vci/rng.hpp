#pragma once

#include <cstdint>
#include <random>

namespace vci::core {

// Stateless 64-bit mixer (splitmix64). Used to turn (master seed, index)
// pairs into decorrelated engine seeds.
inline std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ull;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
  return x ^ (x >> 31);
}

// Seed for the index-th substream of a master seed. Distinct indices give
// engines whose outputs do not collide in practice; sample generators rely
// on this to make each record reproducible in isolation.
inline std::uint64_t substream_seed(std::uint64_t master, std::uint64_t index) {
  return mix64(mix64(master ^ 0x5851f42d4c957f2dull) ^ mix64(index));
}

using Engine = std::mt19937_64;

inline Engine make_engine(std::uint64_t seed) { return Engine(seed); }

inline Engine make_substream(std::uint64_t master, std::uint64_t index) {
  return Engine(substream_seed(master, index));
}

inline double draw_normal(Engine& eng) {
  std::normal_distribution<double> d(0.0, 1.0);
  return d(eng);
}

inline double draw_uniform(Engine& eng, double lo, double hi) {
  std::uniform_real_distribution<double> d(lo, hi);
  return d(eng);
}

// Draws an index from an explicit discrete distribution. Probabilities must
// be nonnegative; they are normalized by their sum.
template <typename Vec>
int draw_categorical(Engine& eng, const Vec& probs) {
  double total = 0.0;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) total += probs[i];
  double u = draw_uniform(eng, 0.0, total);
  double acc = 0.0;
  for (int i = 0; i < static_cast<int>(probs.size()); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return static_cast<int>(probs.size()) - 1;
}

}  // namespace vci::core
