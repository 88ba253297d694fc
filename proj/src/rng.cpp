#include "ecgrobust/rng.hpp"

#include <cmath>

#include "ecgrobust/errors.hpp"

namespace ecgrobust {

std::uint64_t Rng::next_u64() {
  // SplitMix64 (Steele, Lea, Flood 2014).
  std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

double Rng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double Rng::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

std::int64_t Rng::uniform_int(std::int64_t lo, std::int64_t hi) {
  if (hi < lo) throw ParameterError("uniform_int: empty range");
  const std::uint64_t n = static_cast<std::uint64_t>(hi - lo) + 1;
  if (n == 0) return lo + static_cast<std::int64_t>(next_u64());  // full range
  return lo + static_cast<std::int64_t>(
                  static_cast<std::uint64_t>(uniform() * static_cast<double>(n)));
}

std::uint64_t fnv1a64(std::string_view s) {
  return fnv1a64(s.data(), s.size(), 0xcbf29ce484222325ULL);
}

std::uint64_t fnv1a64(const void* data, std::size_t len, std::uint64_t seed) {
  const auto* p = static_cast<const unsigned char*>(data);
  std::uint64_t h = seed;
  for (std::size_t i = 0; i < len; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name) {
  Rng r(master ^ fnv1a64(name));
  return r.next_u64();
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t a) {
  Rng r(derive_seed(master, name) ^ (a * 0x9e3779b97f4a7c15ULL + 0x2545f4914f6cdd1dULL));
  return r.next_u64();
}

std::uint64_t derive_seed(std::uint64_t master, std::string_view name, std::uint64_t a,
                          std::uint64_t b) {
  Rng r(derive_seed(master, name, a) ^ (b * 0xd6e8feb86659fd93ULL + 0x853c49e6748fea9bULL));
  return r.next_u64();
}

}  // namespace ecgrobust
