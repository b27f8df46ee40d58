#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "veritrain/crypto.hpp"
#include "veritrain/nn.hpp"
#include "veritrain/protocol.hpp"

namespace veritrain::attest {

/// Signed statement binding the final parameters, training dataset,
/// version number and client key. The composite digest is
/// H(H(W) || v_num || H(ds) || client_pubkey) and the signature covers
/// the composite digest.
struct ModelCertificate {
  crypto::Digest model_digest{};
  crypto::Digest dataset_digest{};
  std::uint64_t v_num = 0;
  std::array<std::uint8_t, 32> client_pubkey{};
  crypto::Digest composite_digest{};
  std::vector<std::uint8_t> signature;
};

struct Refusal {
  std::uint32_t violating_step = 0;
  protocol::Verdict verdict = protocol::Verdict::Pass;
};

using CertifyResult = std::variant<ModelCertificate, Refusal>;

/// SHA-256 of the canonical model bytes.
crypto::Digest hash_model(const nn::Network& net);

crypto::Digest composite_digest(const crypto::Digest& model_digest, std::uint64_t v_num,
                                const crypto::Digest& dataset_digest,
                                const std::array<std::uint8_t, 32>& client_pubkey);

/// Issues a certificate only for a clean session verdict; any violation
/// yields a Refusal naming the first bad step.
CertifyResult issue_certificate(const nn::Network& params, const crypto::Digest& dataset_digest,
                                std::uint64_t v_num,
                                const std::array<std::uint8_t, 32>& client_pubkey,
                                const protocol::SessionVerdict& verdict,
                                const crypto::SigningKey& signer);

/// True iff the composite digest recomputes from the parts and the
/// signature verifies under the given public key.
bool verify_certificate(const ModelCertificate& cert,
                        const std::array<std::uint8_t, 32>& verifier_pubkey);

/// UTF-8 key-value document, fixed field order, lowercase hex values.
std::string certificate_to_text(const ModelCertificate& cert);
/// Strict inverse of certificate_to_text; throws FormatError on any
/// deviation from the canonical layout.
ModelCertificate certificate_from_text(const std::string& text);

void write_certificate_file(const std::string& path, const ModelCertificate& cert);
ModelCertificate read_certificate_file(const std::string& path);

}  // namespace veritrain::attest
