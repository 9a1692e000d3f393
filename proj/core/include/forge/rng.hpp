// Portable seeded randomness.
//
// Every sampling decision in the pipeline draws from `Rng`: a std::mt19937_64
// engine (whose output sequence is fixed by the C++ standard) combined with
// bounded draws implemented here by rejection sampling. Standard-library
// distributions are implementation-defined and are never used, so manifests,
// model assignments and shuffles are identical on every platform.
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string_view>
#include <utility>
#include <vector>

namespace forge {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  std::uint64_t next() { return engine_(); }

  /// Uniform integer in [0, bound). `bound` must be positive.
  std::uint64_t below(std::uint64_t bound);

  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();

  /// Fisher–Yates, back to front.
  template <typename T>
  void shuffle(std::span<T> items) {
    for (std::size_t i = items.size(); i > 1; --i) {
      std::size_t j = static_cast<std::size_t>(below(i));
      std::swap(items[i - 1], items[j]);
    }
  }

  /// `count` distinct indices from [0, n), uniform without replacement, in draw order.
  std::vector<std::size_t> sample_indices(std::size_t n, std::size_t count);

 private:
  std::mt19937_64 engine_;
};

/// splitmix64 finalizer.
std::uint64_t mix64(std::uint64_t x);

/// FNV-1a over `key`, mixed with `seed`. Used to give each keyed task its own stream.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view key);

}  // namespace forge
