#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace ecgrobust {

// SplitMix64 stream. All randomness in the project goes through this type so
// results are reproducible independent of the standard library's
// distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64();

  // [0, 1)
  double uniform();
  // [lo, hi)
  double uniform(double lo, double hi);
  // [lo, hi] inclusive
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);

  template <typename T>
  void shuffle(std::vector<T>& v) {
    for (std::int64_t i = static_cast<std::int64_t>(v.size()) - 1; i > 0; --i) {
      std::int64_t j = uniform_int(0, i);
      std::swap(v[static_cast<std::size_t>(i)], v[static_cast<std::size_t>(j)]);
    }
  }

 private:
  std::uint64_t state_;
};

std::uint64_t fnv1a64(std::string_view s);
std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed);

// One master seed fans out into named sub-streams so components can be
// re-seeded independently.
std::uint64_t derive_seed(std::uint64_t master, std::string_view name);
std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t a);
std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t a,
                          std::uint64_t b);

}  // namespace ecgrobust
