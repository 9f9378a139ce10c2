#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>

namespace rtvar {

/// Logical consumers of randomness. Each gets its own family of streams so
/// that, e.g., changing the inner sample count never perturbs outer draws.
enum class StreamTag : std::uint64_t {
  Outer = 1,
  Inner = 2,
  Evaluation = 3,
  Oracle = 4,
  Coverage = 5,
  Forest = 6,
  Split = 7,
  Synthetic = 8,
};

std::uint64_t splitmix64(std::uint64_t x);

/// Derive a child seed from a parent seed and an arbitrary number of indices.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0,
                          std::uint64_t c = 0);

/// Seedable random stream with a platform-independent normal generator.
/// std::normal_distribution is implementation-defined, so Box-Muller is done
/// by hand on top of mt19937_64 (whose output sequence is fixed by the standard).
class RngStream {
 public:
  explicit RngStream(std::uint64_t seed) : engine_(seed) {}
  RngStream(std::uint64_t seed, StreamTag tag, std::uint64_t index = 0, std::uint64_t sub = 0)
      : engine_(derive_seed(seed, static_cast<std::uint64_t>(tag), index, sub)) {}

  /// Uniform on the open interval (0, 1).
  double uniform();
  double normal();
  void fill_normal(std::span<double> out);
  /// Uniform integer in [0, n).
  std::uint64_t below(std::uint64_t n);

  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
  double cached_ = 0.0;
  bool has_cached_ = false;
};

}  // namespace rtvar
