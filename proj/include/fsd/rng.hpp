#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

#include "fsd/error.hpp"

namespace fsd {

// All randomness in the project flows through this class so that every
// distribution is identical across platforms and standard-library versions.
// std::mt19937_64 has a standard-mandated output sequence; the distribution
// code below is ours (std::uniform_real_distribution etc. are
// implementation-defined and must not be used where reproducibility matters).
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : gen_(seed) {}

  // Deterministic stream derivation: a root seed plus a list of stream ids
  // (subsystem tag, epoch, batch index, ...) yields an independent generator.
  static Rng derive(std::uint64_t root, std::initializer_list<std::uint64_t> stream) {
    std::uint64_t x = splitmix64(root);
    for (std::uint64_t id : stream) {
      x = splitmix64(x ^ (id + 0x9e3779b97f4a7c15ULL));
    }
    return Rng(x);
  }

  std::uint64_t next_u64() { return gen_(); }

  // Uniform on [0,1) with 53 bits of precision.
  double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Inclusive integer range, rejection-free enough for desk scale.
  int uniform_int(int lo, int hi) {
    check_arg(lo <= hi, "uniform_int: empty range");
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(gen_() % span);
  }

  // Box-Muller; no cached second variate so the draw count is predictable.
  double normal(double mean = 0.0, double sd = 1.0) {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double z = std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * M_PI * u2);
    return mean + sd * z;
  }

  // Knuth's product method; fine for the event rates used here.
  int poisson(double lambda) {
    check_arg(lambda >= 0.0, "poisson: negative rate");
    const double limit = std::exp(-lambda);
    int k = 0;
    double p = 1.0;
    do {
      ++k;
      p *= uniform();
    } while (p > limit);
    return k - 1;
  }

  static std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
  }

 private:
  std::mt19937_64 gen_;
};

}  // namespace fsd
