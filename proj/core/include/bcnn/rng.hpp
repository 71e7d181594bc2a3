#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace bcnn {

// Purpose tags for derived random streams. Every consumer derives its own
// stream from (master seed, tags...), so resuming or reordering work cannot
// change what any component draws.
namespace rng_tag {
constexpr std::uint64_t kNetInit = 0x11;
constexpr std::uint64_t kShuffle = 0x22;
constexpr std::uint64_t kTrainSample = 0x33;
constexpr std::uint64_t kEvalSample = 0x44;
constexpr std::uint64_t kDataGen = 0x55;
constexpr std::uint64_t kScene = 0x66;
}  // namespace rng_tag

// Seeded random stream. One stream per logical consumer; streams derived
// from the same (seed, tags) are identical.
class RngStream {
 public:
  RngStream() : engine_(0) {}
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}

  static RngStream derive(std::uint64_t seed, std::initializer_list<std::uint64_t> tags) {
    // splitmix64 over the tag sequence; avoids std::seed_seq so the
    // derivation is fully specified.
    std::uint64_t h = seed;
    for (std::uint64_t t : tags) {
      h += 0x9e3779b97f4a7c15ull + t;
      h = (h ^ (h >> 30)) * 0xbf58476d1ce4e5b9ull;
      h = (h ^ (h >> 27)) * 0x94d049bb133111ebull;
      h = h ^ (h >> 31);
    }
    return RngStream(h);
  }

  double uniform(double lo, double hi) {
    return std::uniform_real_distribution<double>(lo, hi)(engine_);
  }

  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }

  // Uniform integer in [0, n).
  std::uint64_t next_index(std::uint64_t n) {
    return std::uniform_int_distribution<std::uint64_t>(0, n - 1)(engine_);
  }

  std::uint64_t next_u64() { return engine_(); }

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

}  // namespace bcnn
