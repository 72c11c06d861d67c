#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <vector>

namespace sslecho {

// SplitMix64 finalizer; used to derive independent seeds.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt);
std::uint64_t hash_string(std::string_view text);

// Explicit, splittable random source. Every stochastic routine takes an Rng&
// so that no randomness is ambient. Streams derived with split() are
// independent of how many numbers the parent has already drawn.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  Rng split(std::string_view tag) const;
  Rng split(std::uint64_t index) const;

  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);   // [lo, hi)
  std::size_t uniform_int(std::size_t n);  // [0, n)
  long uniform_int(long lo, long hi);      // [lo, hi] inclusive
  double normal(double mean = 0.0, double stddev = 1.0);
  double gamma(double shape);
  double beta(double a, double b);
  bool bernoulli(double p);

  std::vector<std::size_t> permutation(std::size_t n);

  template <typename T>
  void shuffle(std::vector<T>& values) {
    for (std::size_t i = values.size(); i > 1; --i) {
      std::size_t j = uniform_int(i);
      std::swap(values[i - 1], values[j]);
    }
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

}  // namespace sslecho
