#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "veritrain/crypto.hpp"

namespace veritrain {

/// Deterministic, platform-independent generator (xoshiro256**). All
/// derived quantities (bounded integers, unit doubles, samples) are
/// produced by fixed algorithms, so a seed fully pins the stream.
class DeterministicRng {
 public:
  /// Seeds from 32 bytes of key material.
  explicit DeterministicRng(const crypto::Key256& seed_bytes);
  /// Convenience seeding for simulation (not key-derived) streams.
  explicit DeterministicRng(std::uint64_t seed);

  /// Stream bound to (key, purpose, index): the keyed randomness used by
  /// the verifier and regenerable from the session key alone.
  static DeterministicRng from_key(std::span<const std::uint8_t> key, const std::string& purpose,
                                   std::uint64_t index);

  std::uint64_t next_u64();
  /// Uniform in [0, bound) by rejection; bound > 0.
  std::uint64_t uniform_u64(std::uint64_t bound);
  /// Uniform in [0, 1) with 53-bit resolution.
  double uniform_double();
  bool bernoulli(double p) { return uniform_double() < p; }
  /// Standard normal via Box-Muller.
  double normal();

  /// k distinct indices drawn uniformly from [0, n), in draw order
  /// (partial Fisher-Yates).
  std::vector<std::size_t> sample_without_replacement(std::size_t n, std::size_t k);

 private:
  std::uint64_t s_[4];
  bool have_spare_normal_ = false;
  double spare_normal_ = 0.0;
};

}  // namespace veritrain
