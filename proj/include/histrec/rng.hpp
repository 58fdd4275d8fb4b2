// SPDX-License-Identifier: Apache-2.0
//
// Deterministic PRNG used everywhere in the project. All sampling is built
// on splitmix64 so that results are reproducible across platforms for a
// given seed; sub-streams are derived by hashing (seed, purpose string).
#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace histrec {

inline uint64_t splitmix64_next(uint64_t& state) {
  state += 0x9E3779B97F4A7C15ULL;
  uint64_t z = state;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline uint64_t fnv1a64(std::string_view s) {
  uint64_t h = 0xCBF29CE484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001B3ULL;
  }
  return h;
}

// Stable sub-seed for a named purpose ("datagen", "init-random", ...).
inline uint64_t derive_seed(uint64_t seed, std::string_view purpose) {
  uint64_t state = seed ^ fnv1a64(purpose);
  return splitmix64_next(state);
}

class Rng {
 public:
  explicit Rng(uint64_t seed) : state_(seed) {
    // One warm-up draw so seed 0 does not start at the fixed point.
    splitmix64_next(state_);
  }

  uint64_t next_u64() { return splitmix64_next(state_); }

  // Uniform in [0, 1).
  double uniform() {
    return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Uniform integer in [0, n).
  uint64_t uniform_int(uint64_t n) {
    // Rejection sampling keeps the distribution exact.
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x;
    do {
      x = next_u64();
    } while (x >= limit);
    return x % n;
  }

  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1, u2;
    do {
      u1 = uniform();
    } while (u1 <= 1e-300);
    u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 6.283185307179586476925286766559 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  // Marsaglia-Tsang; shape > 0.
  double gamma(double shape) {
    if (shape < 1.0) {
      const double u = uniform();
      return gamma(shape + 1.0) * std::pow(u > 0 ? u : 1e-300, 1.0 / shape);
    }
    const double d = shape - 1.0 / 3.0;
    const double c = 1.0 / std::sqrt(9.0 * d);
    for (;;) {
      double x, v;
      do {
        x = normal();
        v = 1.0 + c * x;
      } while (v <= 0.0);
      v = v * v * v;
      const double u = uniform();
      if (u < 1.0 - 0.0331 * x * x * x * x) return d * v;
      if (std::log(u > 0 ? u : 1e-300) < 0.5 * x * x + d * (1.0 - v + std::log(v))) return d * v;
    }
  }

  std::vector<double> dirichlet(int k, double concentration) {
    std::vector<double> out(k);
    double sum = 0.0;
    for (int i = 0; i < k; ++i) {
      out[i] = gamma(concentration);
      sum += out[i];
    }
    if (sum <= 0) sum = 1.0;
    for (double& v : out) v /= sum;
    return out;
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (size_t i = v.size(); i > 1; --i) {
      const size_t j = uniform_int(i);
      std::swap(v[i - 1], v[j]);
    }
  }

 private:
  uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace histrec
