#pragma once

#include <string>

#include "veritrain/adversary.hpp"
#include "veritrain/attestation.hpp"
#include "veritrain/config.hpp"

namespace veritrain::runner {

struct RunArtifacts {
  protocol::SessionVerdict verdict;
  bool certificate_issued = false;
  double clean_accuracy = 0.0;
  double attack_success = 0.0;
  double final_loss = 0.0;
  adversary::DeviationLog deviation_log;  // empty for honest runs
  adversary::AttackMeasurement measurement;
  nn::Network final_params;
  std::string outdir;
  int exit_code = 0;  // 0 clean, 3 violated, 4 first violation was an auth failure
};

/// End-to-end session: dataset, network init, trainer (honest or per the
/// attack plan), protocol session with asynchronous verification, final
/// measurement and certificate issue/refusal. With `write_artifacts` the
/// output directory receives model.bin, outcomes.csv, metrics.csv, key
/// material, dataset digest, and certificate.txt or refusal.txt.
RunArtifacts run_experiment(const config::ExperimentConfig& cfg, bool write_artifacts);

/// Re-issues a certificate from a completed run directory (model bytes,
/// recorded outcome log, persisted keys).
attest::CertifyResult reissue_certificate(const std::string& run_dir, std::uint64_t v_num);

}  // namespace veritrain::runner
