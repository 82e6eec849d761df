#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>
#include <vector>

namespace triad {

// Deterministic xoshiro-free generator: splitmix64 state advance. The whole
// pipeline draws through this class so that runs are bit-reproducible for a
// given seed regardless of platform or standard-library version.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  // Uniform double in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Unbiased integer in [0, n); n must be > 0.
  std::uint64_t uniform_int(std::uint64_t n) {
    const std::uint64_t limit = ~std::uint64_t{0} - (~std::uint64_t{0} % n);
    std::uint64_t v = next_u64();
    while (v >= limit) v = next_u64();
    return v % n;
  }

  // Standard normal via Box-Muller (no cached spare, keeps the stream simple).
  double normal() {
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
  }

  // Exponential with mean 1.
  double exponential() {
    double u = uniform();
    while (u >= 1.0) u = uniform();
    return -std::log1p(-u);
  }

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::size_t i = v.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(uniform_int(i));
      std::swap(v[i - 1], v[j]);
    }
  }

  // Derives a stream seed from a parent seed and a component name, so one
  // global seed fans out to stable per-component streams.
  static std::uint64_t split(std::uint64_t seed, std::string_view component) {
    std::uint64_t h = 1469598103934665603ULL;  // FNV-1a 64
    for (char c : component) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 1099511628211ULL;
    }
    Rng mix(seed ^ h);
    return mix.next_u64();
  }

 private:
  std::uint64_t state_;
};

}  // namespace triad
