#pragma once

#include <cstdint>
#include <initializer_list>
#include <random>

namespace clipo {

// SplitMix64 finalizer.
constexpr std::uint64_t mix64(std::uint64_t z) {
  z += 0x9e3779b97f4a7c15ULL;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

// Derives an independent stream key from a base seed and a path of labels
// (step, group, rollout, ...). Results never depend on scheduling order.
constexpr std::uint64_t derive_seed(std::uint64_t base, std::initializer_list<std::uint64_t> path) {
  std::uint64_t h = mix64(base);
  for (std::uint64_t p : path) h = mix64(h ^ mix64(p + 0x632be59bd9b4e019ULL));
  return h;
}

// Stream labels, so derived streams for different purposes never collide.
enum class Stream : std::uint64_t {
  kInit = 1,
  kTasks = 2,
  kRollout = 3,
  kPositive = 4,
  kEval = 5,
  kPretrain = 6,
  kWarmup = 7,
  kHead = 8,
  kProbe = 9,
};

constexpr std::uint64_t label(Stream s) { return static_cast<std::uint64_t>(s); }

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  Rng(std::uint64_t base, std::initializer_list<std::uint64_t> path)
      : engine_(derive_seed(base, path)) {}

  double uniform() { return std::uniform_real_distribution<double>(0.0, 1.0)(engine_); }
  double normal(double mean = 0.0, double stddev = 1.0) {
    return std::normal_distribution<double>(mean, stddev)(engine_);
  }
  // Uniform integer in [lo, hi].
  std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
    return std::uniform_int_distribution<std::int64_t>(lo, hi)(engine_);
  }
  std::uint64_t next() { return engine_(); }

 private:
  std::mt19937_64 engine_;
};

}  // namespace clipo
