#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <limits>
#include <numbers>

namespace asmr {

/// Counter-based generator: output i of a stream is splitmix64(key + i * golden).
///
/// Streams are addressed by hashing a path of integers into the key, e.g.
/// Rng::stream(seed, {kTaskStream, task_index}). Any draw can therefore be
/// reproduced from (key, counter) alone, independent of thread scheduling.
/// The distribution helpers are implemented here so sequences do not depend
/// on the standard library's distribution algorithms.
class Rng {
 public:
  using result_type = std::uint64_t;

  explicit Rng(std::uint64_t key = 0, std::uint64_t counter = 0) : key_(key), counter_(counter) {}

  static std::uint64_t mix(std::uint64_t z) {
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static Rng stream(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    std::uint64_t key = mix(seed + 0x9e3779b97f4a7c15ULL);
    for (std::uint64_t p : path) key = mix(key ^ mix(p + 0x632be59bd9b4e019ULL));
    return Rng(key);
  }

  /// Child stream derived from this stream's key (not its position).
  Rng split(std::uint64_t tag) const { return Rng(mix(key_ ^ mix(tag + 0xd1b54a32d192ed03ULL))); }

  static constexpr result_type min() { return 0; }
  static constexpr result_type max() { return std::numeric_limits<result_type>::max(); }

  result_type operator()() { return mix(key_ + (counter_++) * 0x9e3779b97f4a7c15ULL); }

  /// Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>((*this)() >> 11) * 0x1.0p-53; }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  double log_uniform(double lo, double hi) { return std::exp(uniform(std::log(lo), std::log(hi))); }

  /// Standard normal via Box-Muller (one variate per two uniforms).
  double normal() {
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
  }

  bool bernoulli(double p) { return uniform() < p; }

  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return n == 0 ? 0 : (*this)() % n; }

  std::uint64_t key() const { return key_; }
  std::uint64_t counter() const { return counter_; }

 private:
  std::uint64_t key_;
  std::uint64_t counter_;
};

}  // namespace asmr
