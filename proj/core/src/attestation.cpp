#include "veritrain/attestation.hpp"

#include <fstream>
#include <sstream>

#include "veritrain/errors.hpp"

namespace veritrain::attest {

crypto::Digest hash_model(const nn::Network& net) {
  return crypto::sha256(net.canonical_bytes());
}

crypto::Digest composite_digest(const crypto::Digest& model_digest, std::uint64_t v_num,
                                const crypto::Digest& dataset_digest,
                                const std::array<std::uint8_t, 32>& client_pubkey) {
  std::vector<std::uint8_t> msg;
  msg.insert(msg.end(), model_digest.begin(), model_digest.end());
  for (int i = 0; i < 8; ++i) msg.push_back(static_cast<std::uint8_t>(v_num >> (8 * i)));
  msg.insert(msg.end(), dataset_digest.begin(), dataset_digest.end());
  msg.insert(msg.end(), client_pubkey.begin(), client_pubkey.end());
  return crypto::sha256(msg);
}

CertifyResult issue_certificate(const nn::Network& params, const crypto::Digest& dataset_digest,
                                std::uint64_t v_num,
                                const std::array<std::uint8_t, 32>& client_pubkey,
                                const protocol::SessionVerdict& verdict,
                                const crypto::SigningKey& signer) {
  if (!verdict.clean) {
    return Refusal{verdict.first_bad_step, verdict.first_verdict};
  }
  ModelCertificate cert;
  cert.model_digest = hash_model(params);
  cert.dataset_digest = dataset_digest;
  cert.v_num = v_num;
  cert.client_pubkey = client_pubkey;
  cert.composite_digest =
      composite_digest(cert.model_digest, cert.v_num, cert.dataset_digest, cert.client_pubkey);
  cert.signature = signer.sign(cert.composite_digest);
  return cert;
}

bool verify_certificate(const ModelCertificate& cert,
                        const std::array<std::uint8_t, 32>& verifier_pubkey) {
  const crypto::Digest expected =
      composite_digest(cert.model_digest, cert.v_num, cert.dataset_digest, cert.client_pubkey);
  if (expected != cert.composite_digest) return false;
  return crypto::verify_signature(verifier_pubkey, cert.composite_digest, cert.signature);
}

namespace {

constexpr const char* kFieldOrder[6] = {"model_digest",     "dataset_digest", "v_num",
                                        "client_pubkey",    "composite_digest", "signature"};

std::vector<std::uint8_t> parse_hex_exact(const std::string& value, std::size_t bytes,
                                          const std::string& field) {
  if (value.size() != bytes * 2) {
    throw FormatError("certificate field '" + field + "' has wrong length");
  }
  for (char c : value) {
    const bool ok = (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
    if (!ok) throw FormatError("certificate field '" + field + "' is not lowercase hex");
  }
  return crypto::from_hex(value);
}

std::uint64_t parse_u64_strict(const std::string& value) {
  if (value.empty() || value.size() > 20) throw FormatError("bad v_num");
  if (value.size() > 1 && value[0] == '0') throw FormatError("bad v_num (leading zero)");
  std::uint64_t out = 0;
  for (char c : value) {
    if (c < '0' || c > '9') throw FormatError("bad v_num");
    const std::uint64_t digit = static_cast<std::uint64_t>(c - '0');
    if (out > (UINT64_MAX - digit) / 10) throw FormatError("v_num out of range");
    out = out * 10 + digit;
  }
  return out;
}

}  // namespace

std::string certificate_to_text(const ModelCertificate& cert) {
  std::ostringstream out;
  out << "model_digest = " << crypto::to_hex(cert.model_digest) << "\n";
  out << "dataset_digest = " << crypto::to_hex(cert.dataset_digest) << "\n";
  out << "v_num = " << cert.v_num << "\n";
  out << "client_pubkey = " << crypto::to_hex(cert.client_pubkey) << "\n";
  out << "composite_digest = " << crypto::to_hex(cert.composite_digest) << "\n";
  out << "signature = " << crypto::to_hex(cert.signature) << "\n";
  return out.str();
}

ModelCertificate certificate_from_text(const std::string& text) {
  if (text.empty() || text.back() != '\n') {
    throw FormatError("certificate must end with a newline");
  }
  std::vector<std::pair<std::string, std::string>> fields;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const std::size_t eol = text.find('\n', pos);
    if (eol == std::string::npos) throw FormatError("unterminated certificate line");
    const std::string line = text.substr(pos, eol - pos);
    pos = eol + 1;
    const std::size_t sep = line.find(" = ");
    if (sep == std::string::npos) throw FormatError("certificate line is not 'key = value'");
    fields.emplace_back(line.substr(0, sep), line.substr(sep + 3));
  }
  if (fields.size() != 6) throw FormatError("certificate must have exactly six fields");
  for (int i = 0; i < 6; ++i) {
    if (fields[i].first != kFieldOrder[i]) {
      throw FormatError("certificate field order is fixed; expected '" +
                        std::string(kFieldOrder[i]) + "'");
    }
  }

  ModelCertificate cert;
  auto digest32 = [](const std::string& v, const std::string& f) {
    crypto::Digest d{};
    const auto bytes = parse_hex_exact(v, 32, f);
    std::copy(bytes.begin(), bytes.end(), d.begin());
    return d;
  };
  cert.model_digest = digest32(fields[0].second, "model_digest");
  cert.dataset_digest = digest32(fields[1].second, "dataset_digest");
  cert.v_num = parse_u64_strict(fields[2].second);
  {
    const auto bytes = parse_hex_exact(fields[3].second, 32, "client_pubkey");
    std::copy(bytes.begin(), bytes.end(), cert.client_pubkey.begin());
  }
  cert.composite_digest = digest32(fields[4].second, "composite_digest");
  cert.signature = parse_hex_exact(fields[5].second, 64, "signature");
  return cert;
}

void write_certificate_file(const std::string& path, const ModelCertificate& cert) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << certificate_to_text(cert);
}

ModelCertificate read_certificate_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return certificate_from_text(ss.str());
}

}  // namespace veritrain::attest
