#include "veritrain/rng.hpp"

#include <cmath>
#include <cstring>
#include <numbers>
#include <stdexcept>

namespace veritrain {

namespace {

inline std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

inline std::uint64_t splitmix64(std::uint64_t& x) {
  x += 0x9e3779b97f4a7c15ULL;
  std::uint64_t z = x;
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

}  // namespace

DeterministicRng::DeterministicRng(const crypto::Key256& seed_bytes) {
  for (int i = 0; i < 4; ++i) {
    std::uint64_t w = 0;
    std::memcpy(&w, seed_bytes.data() + 8 * i, 8);
    s_[i] = w;
  }
  // xoshiro must not start from the all-zero state.
  if ((s_[0] | s_[1] | s_[2] | s_[3]) == 0) s_[3] = 1;
}

DeterministicRng::DeterministicRng(std::uint64_t seed) {
  std::uint64_t x = seed;
  for (auto& s : s_) s = splitmix64(x);
}

DeterministicRng DeterministicRng::from_key(std::span<const std::uint8_t> key,
                                            const std::string& purpose, std::uint64_t index) {
  std::vector<std::uint8_t> info(purpose.begin(), purpose.end());
  info.push_back(0x00);
  for (int i = 0; i < 8; ++i) info.push_back(static_cast<std::uint8_t>(index >> (8 * i)));
  return DeterministicRng(crypto::hkdf_sha256(key, info));
}

std::uint64_t DeterministicRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

std::uint64_t DeterministicRng::uniform_u64(std::uint64_t bound) {
  if (bound == 0) throw std::invalid_argument("uniform_u64: bound must be positive");
  // Rejection below the largest multiple of bound keeps the draw unbiased.
  const std::uint64_t limit = bound * (UINT64_MAX / bound);
  std::uint64_t v = next_u64();
  while (v >= limit) v = next_u64();
  return v % bound;
}

double DeterministicRng::uniform_double() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double DeterministicRng::normal() {
  if (have_spare_normal_) {
    have_spare_normal_ = false;
    return spare_normal_;
  }
  double u1 = uniform_double();
  while (u1 == 0.0) u1 = uniform_double();
  const double u2 = uniform_double();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_normal_ = r * std::sin(theta);
  have_spare_normal_ = true;
  return r * std::cos(theta);
}

std::vector<std::size_t> DeterministicRng::sample_without_replacement(std::size_t n,
                                                                      std::size_t k) {
  if (k > n) throw std::invalid_argument("sample_without_replacement: k > n");
  std::vector<std::size_t> pool(n);
  for (std::size_t i = 0; i < n; ++i) pool[i] = i;
  std::vector<std::size_t> out(k);
  for (std::size_t i = 0; i < k; ++i) {
    const std::size_t j = i + static_cast<std::size_t>(uniform_u64(n - i));
    std::swap(pool[i], pool[j]);
    out[i] = pool[i];
  }
  return out;
}

}  // namespace veritrain
