#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

namespace veritrain::crypto {

using Digest = std::array<std::uint8_t, 32>;
using MacTag = std::array<std::uint8_t, 32>;
using Key256 = std::array<std::uint8_t, 32>;

Digest sha256(std::span<const std::uint8_t> data);
MacTag hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data);

/// Extract-and-expand key derivation over HMAC-SHA256. `info` separates
/// uses of the same input key; one 32-byte output block.
Key256 hkdf_sha256(std::span<const std::uint8_t> ikm, std::span<const std::uint8_t> info);

std::string to_hex(std::span<const std::uint8_t> bytes);
/// Strict decoder: lowercase hex only, even length. Throws FormatError.
std::vector<std::uint8_t> from_hex(const std::string& hex);

/// Ed25519 signing keypair. Signatures are deterministic for a fixed
/// (key, message) pair.
class SigningKey {
 public:
  /// Fresh random keypair.
  static SigningKey generate();
  /// Keypair from a 32-byte seed (deterministic).
  static SigningKey from_seed(const Key256& seed);

  std::vector<std::uint8_t> sign(std::span<const std::uint8_t> message) const;
  std::array<std::uint8_t, 32> public_key() const { return public_key_; }
  Key256 seed() const { return seed_; }

 private:
  SigningKey() = default;
  Key256 seed_{};
  std::array<std::uint8_t, 32> public_key_{};
};

bool verify_signature(const std::array<std::uint8_t, 32>& public_key,
                      std::span<const std::uint8_t> message,
                      std::span<const std::uint8_t> signature);

}  // namespace veritrain::crypto
