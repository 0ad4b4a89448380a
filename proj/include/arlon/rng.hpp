#pragma once
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

namespace arlon {

// Deterministic RNG used everywhere seeds appear in the public API.
// Gaussians come from a hand-rolled Box-Muller on top of mt19937_64 so the
// stream does not depend on the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(uint64_t seed) : gen_(seed), seed_mix_(seed) {}

  // [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal draw; mean/std variant keeps std == 0 exact.
  double normal() {
    double u1 = 1.0 - uniform();  // (0, 1]
    double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
  }
  double normal(double mean, double std) { return mean + std * normal(); }

  // Integer in [lo, hi).
  int64_t randint(int64_t lo, int64_t hi) {
    return lo + static_cast<int64_t>(gen_() % static_cast<uint64_t>(hi - lo));
  }

  bool bernoulli(double p) { return uniform() < p; }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      size_t j = static_cast<size_t>(randint(0, static_cast<int64_t>(i)));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Independent child stream; used to give every pipeline stage its own seed.
  Rng fork(uint64_t stream) {
    uint64_t z = seed_mix_ ^ (stream + 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return Rng(z ^ (z >> 31));
  }

 private:
  std::mt19937_64 gen_;
  uint64_t seed_mix_ = 0;
};

// Derived per-purpose seed without constructing an Rng.
inline uint64_t derive_seed(uint64_t seed, uint64_t stream) {
  uint64_t z = seed ^ (stream + 0x9e3779b97f4a7c15ull);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
  return z ^ (z >> 31);
}

}  // namespace arlon
