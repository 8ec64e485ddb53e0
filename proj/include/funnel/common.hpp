#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>

namespace funnel {

using Scalar = double;

// Error taxonomy. The CLI maps these onto exit codes:
// usage/config -> 2, input -> 3, anything else -> 4.
struct usage_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad shapes, bad factors, inconsistent configuration.
struct config_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Bad user data: token ids out of range, malformed files, missing files.
struct input_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Deterministic RNG. mt19937_64 is fully specified by the standard and the
// derived draws below avoid implementation-defined std::*_distribution, so a
// seed reproduces the same stream on every platform.
class Rng {
 public:
  explicit Rng(uint64_t seed) : eng_(seed) {}

  uint64_t next_u64() { return eng_(); }

  // [0, 1)
  Scalar uniform() {
    return static_cast<Scalar>(eng_() >> 11) * 0x1.0p-53;
  }

  // Box-Muller on the uniform stream; the sine branch is discarded.
  Scalar normal(Scalar mean = 0.0, Scalar stddev = 1.0) {
    Scalar u1 = 1.0 - uniform();  // (0, 1]
    Scalar u2 = uniform();
    Scalar z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + stddev * z;
  }

  // [0, n)
  int uniform_int(int n) {
    return static_cast<int>(eng_() % static_cast<uint64_t>(n));
  }

  bool bernoulli(Scalar p) { return uniform() < p; }

 private:
  std::mt19937_64 eng_;
};

// Independent deterministic seed streams (data vs init vs eval) from one
// user-facing seed. splitmix64 finalizer.
inline uint64_t derive_seed(uint64_t base, uint64_t salt) {
  uint64_t z = base + 0x9e3779b97f4a7c15ULL * (salt + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace funnel
