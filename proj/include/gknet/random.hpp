#pragma once

#include <cmath>
#include <cstdint>
#include <string_view>

namespace gknet {

// Deterministic xoshiro256++ generator with hand-rolled uniform and normal
// draws.  std::*_distribution output is implementation-defined, so every draw
// here is produced from explicit arithmetic; seed-for-seed results are
// identical across platforms and standard libraries.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : seed_(seed) {
    std::uint64_t x = seed;
    for (auto& word : state_) word = splitmix64(x);
  }

  std::uint64_t seed() const { return seed_; }

  std::uint64_t next_u64() {
    const std::uint64_t result = rotl(state_[0] + state_[3], 23) + state_[0];
    const std::uint64_t t = state_[1] << 17;
    state_[2] ^= state_[0];
    state_[3] ^= state_[1];
    state_[1] ^= state_[2];
    state_[0] ^= state_[3];
    state_[2] ^= t;
    state_[3] = rotl(state_[3], 45);
    return result;
  }

  /// Uniform draw in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  /// Standard normal via Box-Muller; pairs are cached.
  double normal() {
    if (have_spare_) {
      have_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1], keeps log() finite
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    have_spare_ = true;
    return r * std::cos(theta);
  }

  /// Integer in [0, n).
  std::uint64_t below(std::uint64_t n) { return next_u64() % n; }

  /// Derives an independent generator from this generator's seed and a stream
  /// name, so components (graph, noise, init, masking, ...) draw from
  /// disjoint streams regardless of call order.
  Rng substream(std::string_view name) const {
    std::uint64_t x = seed_ ^ fnv1a(name);
    return Rng(splitmix64(x));
  }

  /// Indexed substream, e.g. one per trajectory.
  Rng substream(std::string_view name, std::uint64_t index) const {
    std::uint64_t x =
        seed_ ^ fnv1a(name) ^ (0x9e3779b97f4a7c15ULL * (index + 1));
    return Rng(splitmix64(x));
  }

 private:
  static std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : s) {
      h ^= static_cast<std::uint64_t>(static_cast<unsigned char>(c));
      h *= 0x100000001b3ULL;
    }
    return h;
  }

  static std::uint64_t splitmix64(std::uint64_t& x) {
    x += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = x;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  }

  static std::uint64_t rotl(std::uint64_t v, int k) {
    return (v << k) | (v >> (64 - k));
  }

  std::uint64_t state_[4] = {};
  std::uint64_t seed_ = 0;
  double spare_ = 0.0;
  bool have_spare_ = false;
};

}  // namespace gknet
