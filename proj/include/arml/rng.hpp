#pragma once

#include <cmath>
#include <cstdint>

namespace arml {

// Counter-free splitmix64 stream. Every random draw in the project goes
// through this generator so runs are reproducible from a single seed,
// independent of the standard library's distribution internals.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : state_(seed) {}

  std::uint64_t next_u64() {
    state_ += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state_;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

  // Uniform on [0, 1) with 53 random mantissa bits.
  double u01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Uniform on (0, 1]; safe as a log argument.
  double u01_open_low() {
    return (static_cast<double>(next_u64() >> 11) + 1.0) * 0x1.0p-53;
  }

  double uniform(double lo, double hi) { return lo + (hi - lo) * u01(); }

  // Box-Muller transform; consumes two words per call, no cached partner.
  double normal() {
    double u1 = u01_open_low();
    double u2 = u01();
    double r = std::sqrt(-2.0 * std::log(u1));
    return r * std::cos(6.283185307179586476925286766559 * u2);
  }

  double normal(double mean, double stddev) { return mean + stddev * normal(); }

  int uniform_int(int lo, int hi) {  // inclusive bounds
    std::uint64_t span = static_cast<std::uint64_t>(hi - lo) + 1;
    return lo + static_cast<int>(next_u64() % span);
  }

 private:
  std::uint64_t state_;
};

// Deterministic seed derivation for named substreams (iteration, task index,
// purpose tag). Chaining mix() decouples the streams.
inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b) {
  std::uint64_t z = a + 0x9E3779B97F4A7C15ULL * (b + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b,
                              std::uint64_t c) {
  return mix_seed(mix_seed(a, b), c);
}

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b,
                              std::uint64_t c, std::uint64_t d) {
  return mix_seed(mix_seed(a, b, c), d);
}

// Stream tags used by the training loop and evaluators.
namespace stream {
inline constexpr std::uint64_t kMetaInit = 0x11;
inline constexpr std::uint64_t kFlowInit = 0x12;
inline constexpr std::uint64_t kTaskBatch = 0x21;
inline constexpr std::uint64_t kDataset = 0x22;
inline constexpr std::uint64_t kCloneBatch = 0x23;
inline constexpr std::uint64_t kFrozenStats = 0x31;
inline constexpr std::uint64_t kEvalTasks = 0x41;
inline constexpr std::uint64_t kEvalDataset = 0x42;
inline constexpr std::uint64_t kEntropy = 0x43;
inline constexpr std::uint64_t kNoise = 0x51;
inline constexpr std::uint64_t kTheory = 0x61;
}  // namespace stream

}  // namespace arml
