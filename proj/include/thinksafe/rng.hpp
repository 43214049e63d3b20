#pragma once

#include <cstdint>
#include <random>
#include <string_view>

namespace thinksafe {

// Deterministic generator. The engine's output sequence is fixed by the
// standard; the conversions below are written out so results do not depend
// on the standard library's distribution implementations.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  // Uniform integer in [0, n). n must be positive.
  std::uint64_t below(std::uint64_t n) {
    const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    std::uint64_t x;
    do {
      x = engine_();
    } while (x >= limit);
    return x % n;
  }

  double normal();

  bool bernoulli(double p) { return uniform() < p; }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

std::uint64_t splitmix64(std::uint64_t x);
std::uint64_t fnv1a64(std::string_view s);

// Per-stage seed streams: splitmix64(global ^ fnv1a64(stage + '\0' + key)).
std::uint64_t derive_seed(std::uint64_t global, std::string_view stage, std::string_view key = {});
std::uint64_t derive_seed(std::uint64_t global, std::string_view stage, std::uint64_t index);

}  // namespace thinksafe
