#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

#include "diffap/types.hpp"

namespace diffap {

namespace detail {
inline std::uint64_t splitmix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}
}  // namespace detail

/// Hashes a base seed with an ordered list of stream coordinates
/// (sample index, replica index, ...). Distinct coordinate tuples give
/// statistically independent streams.
inline std::uint64_t derive_seed(std::uint64_t base,
                                 std::initializer_list<std::uint64_t> coords) {
  std::uint64_t h = detail::splitmix64(base);
  for (auto c : coords) h = detail::splitmix64(h ^ detail::splitmix64(c + 0x632be59bd9b4e019ULL));
  return h;
}

/// Explicit random stream. Nothing in the library draws from ambient
/// randomness; every stochastic operation takes one of these.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return gauss_(engine_); }
  double uniform() { return unif_(engine_); }

  Vec normal_vec(Eigen::Index d) {
    Vec v(d);
    for (Eigen::Index i = 0; i < d; ++i) v[i] = gauss_(engine_);
    return v;
  }

  std::uint64_t next_seed() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> gauss_{0.0, 1.0};
  std::uniform_real_distribution<double> unif_{0.0, 1.0};
};

}  // namespace diffap
