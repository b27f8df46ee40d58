#include "veritrain/runner.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "veritrain/errors.hpp"
#include "veritrain/integrity.hpp"

namespace veritrain::runner {

namespace fs = std::filesystem;

namespace {

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out << text;
}

std::string read_text(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_bytes(const std::string& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
}

std::vector<std::uint8_t> read_bytes(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::string trimmed(std::string s) {
  while (!s.empty() && (s.back() == '\n' || s.back() == '\r' || s.back() == ' ')) s.pop_back();
  return s;
}

crypto::Key256 key_from_hex_file(const std::string& path) {
  const auto bytes = crypto::from_hex(trimmed(read_text(path)));
  if (bytes.size() != 32) throw FormatError("expected 32 hex-encoded bytes in " + path);
  crypto::Key256 key{};
  std::copy(bytes.begin(), bytes.end(), key.begin());
  return key;
}

int exit_code_for(const protocol::SessionVerdict& v) {
  if (v.clean) return 0;
  return v.first_verdict == protocol::Verdict::AuthFailure ? 4 : 3;
}

}  // namespace

RunArtifacts run_experiment(const config::ExperimentConfig& cfg, bool write_artifacts) {
  const data::SyntheticData dataset = data::make_synthetic_shapes(cfg.dataset);
  const crypto::Digest ds_digest = data::dataset_digest(dataset.train);

  nn::Network net = config::build_network(cfg);
  DeterministicRng init_rng(config::derive_seed(cfg.master_seed, "weight-init"));
  net.init_params(init_rng);

  protocol::Session session(std::move(net), dataset.train.images, dataset.train.labels,
                            cfg.protocol);

  if (write_artifacts && cfg.record == "selected") {
    fs::create_directories(cfg.outdir + "/record");
    session.set_record_dir(cfg.outdir + "/record");
  } else if (write_artifacts) {
    fs::create_directories(cfg.outdir);
  }

  RunArtifacts art;
  adversary::DeviationLog log;
  data::Dataset probe;
  if (cfg.attack) {
    probe = adversary::make_probe_set(dataset.test, *cfg.attack, cfg.probe_size);
    const std::uint64_t atk_seed =
        DeterministicRng(config::derive_seed(cfg.master_seed, "attack")).next_u64();
    session.run_training(adversary::attacking_trainer(
        session.images(), session.labels(), cfg.protocol, *cfg.attack, probe, log, atk_seed));
  } else {
    session.run_training(
        protocol::honest_trainer(session.images(), session.labels(), cfg.protocol));
  }

  art.verdict = session.verdict();
  art.deviation_log = log;
  art.final_params = session.params();
  art.clean_accuracy = adversary::evaluate_accuracy(art.final_params, dataset.test);
  if (cfg.attack) {
    art.measurement = adversary::measure_attack(art.final_params, dataset.test, *cfg.attack, log);
    art.attack_success = art.measurement.attack_success;
    art.measurement.clean_accuracy = art.clean_accuracy;
  }
  const auto losses = session.step_losses();
  art.final_loss = losses.empty() ? 0.0 : losses.back();
  art.exit_code = exit_code_for(art.verdict);
  art.outdir = cfg.outdir;

  // Certificate flow: fresh per-session verifier and client keys, both
  // derived from the master seed so reruns are byte-identical.
  const crypto::SigningKey verifier_key =
      crypto::SigningKey::from_seed(config::derive_seed(cfg.master_seed, "verifier-sign"));
  const crypto::SigningKey client_key =
      crypto::SigningKey::from_seed(config::derive_seed(cfg.master_seed, "client-sign"));
  const attest::CertifyResult cert = attest::issue_certificate(
      art.final_params, ds_digest, cfg.v_num, client_key.public_key(), art.verdict, verifier_key);
  art.certificate_issued = std::holds_alternative<attest::ModelCertificate>(cert);

  if (!write_artifacts) return art;

  write_text(cfg.outdir + "/run-config.ini", config::dump_experiment(cfg));
  write_bytes(cfg.outdir + "/model.bin", art.final_params.canonical_bytes());
  write_text(cfg.outdir + "/dataset_digest.hex", crypto::to_hex(ds_digest) + "\n");
  write_text(cfg.outdir + "/session_key.hex", crypto::to_hex(cfg.protocol.session_key) + "\n");
  write_text(cfg.outdir + "/verifier_seed.hex", crypto::to_hex(verifier_key.seed()) + "\n");
  write_text(cfg.outdir + "/verifier_pubkey.hex", crypto::to_hex(verifier_key.public_key()) + "\n");
  write_text(cfg.outdir + "/client_pubkey.hex", crypto::to_hex(client_key.public_key()) + "\n");

  {
    std::ostringstream out;
    out << "step,verdict,detail\n";
    for (const auto& o : session.outcomes()) {
      std::string detail = o.detail;
      for (char& c : detail) {
        if (c == ',' || c == '\n') c = ';';
      }
      out << o.step << "," << protocol::verdict_name(o.verdict) << "," << detail << "\n";
    }
    write_text(cfg.outdir + "/outcomes.csv", out.str());
  }
  {
    std::ostringstream out;
    out << "step,loss\n";
    char buf[48];
    for (std::size_t i = 0; i < losses.size(); ++i) {
      std::snprintf(buf, sizeof(buf), "%zu,%.10g\n", i + 1, losses[i]);
      out << buf;
    }
    write_text(cfg.outdir + "/metrics.csv", out.str());
  }
  {
    std::ostringstream out;
    if (art.verdict.clean) {
      out << "clean\n";
    } else {
      out << "violated " << art.verdict.first_bad_step << " "
          << protocol::verdict_name(art.verdict.first_verdict) << "\n";
    }
    write_text(cfg.outdir + "/verdict.txt", out.str());
  }

  if (art.certificate_issued) {
    attest::write_certificate_file(cfg.outdir + "/certificate.txt",
                                   std::get<attest::ModelCertificate>(cert));
  } else {
    const auto& refusal = std::get<attest::Refusal>(cert);
    std::ostringstream out;
    out << "refused: first violation at step " << refusal.violating_step << " ("
        << protocol::verdict_name(refusal.verdict) << ")\n";
    write_text(cfg.outdir + "/refusal.txt", out.str());
  }
  return art;
}

attest::CertifyResult reissue_certificate(const std::string& run_dir, std::uint64_t v_num) {
  const config::ExperimentConfig cfg = config::load_experiment(run_dir + "/run-config.ini");
  nn::Network net = config::build_network(cfg);
  net.load_canonical_bytes(read_bytes(run_dir + "/model.bin"));

  crypto::Digest ds_digest{};
  {
    const auto bytes = crypto::from_hex(trimmed(read_text(run_dir + "/dataset_digest.hex")));
    if (bytes.size() != 32) throw FormatError("bad dataset digest");
    std::copy(bytes.begin(), bytes.end(), ds_digest.begin());
  }

  protocol::SessionVerdict verdict;
  {
    std::istringstream in(trimmed(read_text(run_dir + "/verdict.txt")));
    std::string word;
    in >> word;
    if (word == "violated") {
      verdict.clean = false;
      in >> verdict.first_bad_step;
      std::string name;
      in >> name;
      verdict.first_verdict = name == "auth-failure" ? protocol::Verdict::AuthFailure
                                                     : protocol::Verdict::GradientMismatch;
    } else if (word != "clean") {
      throw FormatError("unrecognized verdict file");
    }
  }

  const crypto::SigningKey verifier_key =
      crypto::SigningKey::from_seed(key_from_hex_file(run_dir + "/verifier_seed.hex"));
  std::array<std::uint8_t, 32> client_pub{};
  {
    const auto bytes = crypto::from_hex(trimmed(read_text(run_dir + "/client_pubkey.hex")));
    if (bytes.size() != 32) throw FormatError("bad client public key");
    std::copy(bytes.begin(), bytes.end(), client_pub.begin());
  }
  return attest::issue_certificate(net, ds_digest, v_num, client_pub, verdict, verifier_key);
}

}  // namespace veritrain::runner
