#include "veritrain/crypto.hpp"

#include <openssl/core_names.h>
#include <openssl/evp.h>
#include <openssl/params.h>
#include <openssl/rand.h>

#include <cstring>
#include <memory>
#include <stdexcept>

#include "veritrain/errors.hpp"

namespace veritrain::crypto {

namespace {

[[noreturn]] void fail(const char* what) {
  throw std::runtime_error(std::string("openssl: ") + what);
}

struct PkeyDeleter {
  void operator()(EVP_PKEY* p) const { EVP_PKEY_free(p); }
};
using PkeyPtr = std::unique_ptr<EVP_PKEY, PkeyDeleter>;

struct MdCtxDeleter {
  void operator()(EVP_MD_CTX* p) const { EVP_MD_CTX_free(p); }
};
using MdCtxPtr = std::unique_ptr<EVP_MD_CTX, MdCtxDeleter>;

}  // namespace

Digest sha256(std::span<const std::uint8_t> data) {
  Digest out{};
  unsigned int len = 0;
  if (EVP_Digest(data.data(), data.size(), out.data(), &len, EVP_sha256(), nullptr) != 1 ||
      len != out.size()) {
    fail("EVP_Digest");
  }
  return out;
}

MacTag hmac_sha256(std::span<const std::uint8_t> key, std::span<const std::uint8_t> data) {
  MacTag out{};
  EVP_MAC* mac = EVP_MAC_fetch(nullptr, "HMAC", nullptr);
  if (mac == nullptr) fail("EVP_MAC_fetch");
  EVP_MAC_CTX* ctx = EVP_MAC_CTX_new(mac);
  EVP_MAC_free(mac);
  if (ctx == nullptr) fail("EVP_MAC_CTX_new");

  char digest_name[] = "SHA256";
  OSSL_PARAM params[] = {
      OSSL_PARAM_construct_utf8_string(OSSL_MAC_PARAM_DIGEST, digest_name, 0),
      OSSL_PARAM_construct_end(),
  };
  std::size_t out_len = 0;
  const bool ok = EVP_MAC_init(ctx, key.data(), key.size(), params) == 1 &&
                  EVP_MAC_update(ctx, data.data(), data.size()) == 1 &&
                  EVP_MAC_final(ctx, out.data(), &out_len, out.size()) == 1;
  EVP_MAC_CTX_free(ctx);
  if (!ok || out_len != out.size()) fail("HMAC-SHA256");
  return out;
}

Key256 hkdf_sha256(std::span<const std::uint8_t> ikm, std::span<const std::uint8_t> info) {
  // Extract with an all-zero salt, then expand a single block.
  const Key256 zero_salt{};
  const MacTag prk = hmac_sha256(zero_salt, ikm);

  std::vector<std::uint8_t> block(info.begin(), info.end());
  block.push_back(0x01);
  return hmac_sha256(prk, block);
}

std::string to_hex(std::span<const std::uint8_t> bytes) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(bytes.size() * 2);
  for (std::uint8_t b : bytes) {
    out.push_back(digits[b >> 4]);
    out.push_back(digits[b & 0x0f]);
  }
  return out;
}

std::vector<std::uint8_t> from_hex(const std::string& hex) {
  if (hex.size() % 2 != 0) throw FormatError("hex string has odd length");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    throw FormatError("invalid hex character");
  };
  std::vector<std::uint8_t> out(hex.size() / 2);
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = static_cast<std::uint8_t>((nibble(hex[2 * i]) << 4) | nibble(hex[2 * i + 1]));
  }
  return out;
}

SigningKey SigningKey::generate() {
  Key256 seed{};
  if (RAND_bytes(seed.data(), static_cast<int>(seed.size())) != 1) fail("RAND_bytes");
  return from_seed(seed);
}

SigningKey SigningKey::from_seed(const Key256& seed) {
  PkeyPtr pkey(EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, seed.data(), seed.size()));
  if (!pkey) fail("ed25519 private key");

  SigningKey key;
  key.seed_ = seed;
  std::size_t pub_len = key.public_key_.size();
  if (EVP_PKEY_get_raw_public_key(pkey.get(), key.public_key_.data(), &pub_len) != 1 ||
      pub_len != key.public_key_.size()) {
    fail("ed25519 public key");
  }
  return key;
}

std::vector<std::uint8_t> SigningKey::sign(std::span<const std::uint8_t> message) const {
  PkeyPtr pkey(
      EVP_PKEY_new_raw_private_key(EVP_PKEY_ED25519, nullptr, seed_.data(), seed_.size()));
  if (!pkey) fail("ed25519 private key");
  MdCtxPtr ctx(EVP_MD_CTX_new());
  if (!ctx) fail("EVP_MD_CTX_new");
  if (EVP_DigestSignInit(ctx.get(), nullptr, nullptr, nullptr, pkey.get()) != 1) {
    fail("EVP_DigestSignInit");
  }
  std::size_t sig_len = 0;
  if (EVP_DigestSign(ctx.get(), nullptr, &sig_len, message.data(), message.size()) != 1) {
    fail("EVP_DigestSign (size)");
  }
  std::vector<std::uint8_t> sig(sig_len);
  if (EVP_DigestSign(ctx.get(), sig.data(), &sig_len, message.data(), message.size()) != 1) {
    fail("EVP_DigestSign");
  }
  sig.resize(sig_len);
  return sig;
}

bool verify_signature(const std::array<std::uint8_t, 32>& public_key,
                      std::span<const std::uint8_t> message,
                      std::span<const std::uint8_t> signature) {
  PkeyPtr pkey(EVP_PKEY_new_raw_public_key(EVP_PKEY_ED25519, nullptr, public_key.data(),
                                           public_key.size()));
  if (!pkey) return false;
  MdCtxPtr ctx(EVP_MD_CTX_new());
  if (!ctx) return false;
  if (EVP_DigestVerifyInit(ctx.get(), nullptr, nullptr, nullptr, pkey.get()) != 1) return false;
  return EVP_DigestVerify(ctx.get(), signature.data(), signature.size(), message.data(),
                          message.size()) == 1;
}

}  // namespace veritrain::crypto
