#pragma once

#include <cstdint>
#include <cmath>
#include <vector>

namespace flexmol {

// Deterministic random stream. All sampling goes through explicit formulas on
// top of mt19937_64 so that trajectories are reproducible bit-for-bit for a
// given seed, independent of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed), state_(splitmix(seed)) {}

  std::uint64_t next_u64() {
    // xorshift-multiplied counter stream (splitmix64).
    std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
  }

  // Uniform in [0,1) with 53-bit resolution.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

  // Standard normal via Box-Muller.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    double u1 = uniform();
    double u2 = uniform();
    while (u1 <= 1e-300) u1 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double a = 2.0 * 3.14159265358979323846 * u2;
    spare_ = r * std::sin(a);
    has_spare_ = true;
    return r * std::cos(a);
  }

  double normal(double mean, double std) { return mean + std * normal(); }

  // Uniform integer in [0, n), n > 0. Lemire multiply-shift, no modulo bias
  // worth caring about at these ranges.
  long randint(long n) {
    return static_cast<long>((static_cast<unsigned __int128>(next_u64()) *
                              static_cast<unsigned __int128>(n)) >>
                             64);
  }

  template <class T>
  void shuffle(std::vector<T>& v) {
    for (long i = static_cast<long>(v.size()) - 1; i > 0; --i) {
      const long j = randint(i + 1);
      std::swap(v[i], v[static_cast<std::size_t>(j)]);
    }
  }

  // Sample k distinct indices from [0, n), in selection order.
  std::vector<long> sample_without_replacement(long n, long k) {
    std::vector<long> pool(static_cast<std::size_t>(n));
    for (long i = 0; i < n; ++i) pool[static_cast<std::size_t>(i)] = i;
    std::vector<long> out;
    out.reserve(static_cast<std::size_t>(k));
    for (long i = 0; i < k && i < n; ++i) {
      const long j = i + randint(n - i);
      std::swap(pool[static_cast<std::size_t>(i)], pool[static_cast<std::size_t>(j)]);
      out.push_back(pool[static_cast<std::size_t>(i)]);
    }
    return out;
  }

  // Independent child stream identified by a tag.
  Rng fork(std::uint64_t tag) const { return Rng(splitmix(seed_ ^ (0x85ebca6b5bd1e995ull * (tag + 1)))); }

  std::uint64_t seed() const { return seed_; }

 private:
  static std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ull;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
    return x ^ (x >> 31);
  }

  std::uint64_t seed_;
  std::uint64_t state_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace flexmol
