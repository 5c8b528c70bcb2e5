#pragma once

#include <cstdint>
#include <random>
#include <vector>

namespace dpkfc {

/// Seedable generator backed by std::mt19937_64.
///
/// Sub-streams: split(k) seeds a fresh engine from the parent's seed path plus
/// k through std::seed_seq, so a given (seed, path) always yields the same
/// stream and distinct paths yield independently seeded engines. Streams are
/// reproducible within one build; they are not promised to match across
/// standard library implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0);

  std::uint64_t seed() const { return seed_; }

  /// Independent child stream identified by `stream`. Does not advance this Rng.
  Rng split(std::uint64_t stream) const;

  double normal();
  double uniform();  // [0, 1)
  /// Uniform integer in [lo, hi). Requires lo < hi.
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi);
  bool bernoulli(double p);

  std::mt19937_64& engine() { return engine_; }

 private:
  Rng(std::uint64_t seed, std::vector<std::uint64_t> path);

  std::uint64_t seed_;
  std::vector<std::uint64_t> path_;
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
};

std::vector<double> standard_normal(Rng& rng, std::size_t n);
std::int64_t uniform_int(Rng& rng, std::int64_t lo, std::int64_t hi);

/// Well-known sub-stream identifiers used across the library.
namespace streams {
inline constexpr std::uint64_t kInit = 1;
inline constexpr std::uint64_t kBatch = 2;
inline constexpr std::uint64_t kNoise = 3;
inline constexpr std::uint64_t kProbe = 4;
inline constexpr std::uint64_t kData = 5;
inline constexpr std::uint64_t kDiagnostics = 6;
}  // namespace streams

}  // namespace dpkfc
