#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "veritrain/crypto.hpp"
#include "veritrain/freivalds.hpp"
#include "veritrain/nn.hpp"
#include "veritrain/rng.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::protocol {

enum class VerifyMode : std::uint8_t { FullVerify, RMM };

struct ProtocolConfig {
  double verify_prob = 0.1;      // probability a step is selected for verification
  double clip = 1e-4;            // element-wise gradient clamp
  double learning_rate = 0.05;
  VerifyMode mode = VerifyMode::FullVerify;
  freivalds::FieldParams field;  // RMM mode parameters
  crypto::Key256 session_key{};
  std::uint32_t total_steps = 1;
  std::size_t batch_size = 16;
  std::size_t queue_capacity = 64;

  void validate() const;  // throws DomainError
};

/// Relative tolerance for comparing recomputed to reported values. Honest
/// recomputation is bit-identical (shared kernels, regenerated
/// randomness); the slack only covers reordering introduced by blocked
/// execution plans.
constexpr double kVerifyTolerance = 1e-9;

/// The trainer's per-step output. The MAC covers the serialized payload
/// under a key derived from (session key, step) and must verify before
/// any field is used.
struct StepReport {
  std::uint32_t step = 0;  // 1-based
  nn::GradientSet grads;
  std::vector<nn::MMRecord> mm_records;  // RMM mode only
  crypto::MacTag mac{};
  bool has_mac = false;
};

/// Authenticated copy of the full parameter state after `step` updates
/// (0 = initial parameters).
struct Snapshot {
  std::uint32_t step = 0;
  std::vector<std::uint8_t> params;
  crypto::MacTag mac{};
};

enum class Verdict : std::uint8_t { Pass, GradientMismatch, RMMReject, AuthFailure };

const char* verdict_name(Verdict v);

struct VerificationOutcome {
  std::uint32_t step = 0;
  Verdict verdict = Verdict::Pass;
  std::string detail;
};

struct SessionVerdict {
  bool clean = true;
  std::uint32_t first_bad_step = 0;
  Verdict first_verdict = Verdict::Pass;
};

/// Clean iff every outcome passed; otherwise the lowest-step failure.
SessionVerdict session_verdict(std::span<const VerificationOutcome> outcomes);

// ---- keyed primitives -------------------------------------------------

crypto::Key256 derive_key(const crypto::Key256& session_key, const std::string& purpose,
                          std::uint64_t index);

struct StepRandomness {
  std::uint32_t step = 0;
  std::vector<std::size_t> batch_indices;  // batch_size distinct indices
  nn::LayerRandomness layer_masks;
};

/// Deterministic function of (session key, step): the mini-batch index
/// sample (uniform, without replacement) and the per-layer mask seeds.
/// The verifier regenerates it during replay.
StepRandomness derive_step_randomness(const crypto::Key256& session_key, std::uint32_t step,
                                      std::size_t dataset_size, std::size_t batch_size);

/// Keyed Bernoulli(p_v) draw for step selection; unpredictable without
/// the session key.
bool decide_verify(const crypto::Key256& session_key, std::uint32_t step, double verify_prob);

/// Materializes the mini-batch named by an index sample.
std::pair<Tensor, std::vector<int>> gather_batch(const Tensor& images,
                                                 const std::vector<int>& labels,
                                                 std::span<const std::size_t> indices);

/// Element-wise clamp of every gradient entry to [-c, c]; idempotent.
nn::GradientSet clip_gradients(const nn::GradientSet& grads, double clip);

/// W <- W - lr * g for every parameter. The gradient key set must equal
/// the network's parameter key set, shape for shape.
void apply_update(nn::Network& net, const nn::GradientSet& clipped, double learning_rate);

/// Folds reported batch statistics into BatchNorm running estimates.
void update_running_stats(nn::Network& net, const nn::GradientSet& grads);

// ---- serialization -----------------------------------------------------

std::vector<std::uint8_t> serialize_report(const StepReport& report);
StepReport deserialize_report(std::span<const std::uint8_t> payload);  // throws FormatError
std::vector<std::uint8_t> serialize_snapshot(std::uint32_t step,
                                             std::span<const std::uint8_t> param_bytes);
Snapshot deserialize_snapshot(std::span<const std::uint8_t> payload);

crypto::MacTag mac_report(const crypto::Key256& session_key, std::uint32_t step,
                          std::span<const std::uint8_t> payload);
crypto::MacTag mac_snapshot(const crypto::Key256& session_key, std::uint32_t step,
                            std::span<const std::uint8_t> payload);

/// File layout: little-endian u32 payload length, payload, 32-byte MAC.
void write_record_file(const std::string& path, std::span<const std::uint8_t> payload,
                       const crypto::MacTag& mac);
struct RecordFile {
  std::vector<std::uint8_t> payload;
  crypto::MacTag mac{};
};
RecordFile read_record_file(const std::string& path);  // throws FormatError

/// A verification task as retained in untrusted storage: authenticated
/// bytes, not parsed structures, so post-authentication tampering is
/// observable.
struct VerifyTask {
  std::uint32_t step = 0;
  std::vector<std::uint8_t> report_payload;
  crypto::MacTag report_mac{};
  std::vector<std::uint8_t> snapshot_payload;
  crypto::MacTag snapshot_mac{};
};

/// Replays step `task.step` from the snapshot of the previous step:
/// checks both MACs, regenerates the randomness, then either fully
/// recomputes the pass (FullVerify) or probes every claimed MM product
/// and recomputes the cheap quantities (RMM).
VerificationOutcome verify_step(const VerifyTask& task, const nn::Network& net_template,
                                const Tensor& images, const std::vector<int>& labels,
                                const ProtocolConfig& cfg);

// ---- session -----------------------------------------------------------

struct TrainerOutput {
  StepReport report;
  double loss = 0.0;
  bool deviated = false;  // trainer-side ground truth, independent of detection
};

using TrainerFn =
    std::function<TrainerOutput(std::uint32_t step, const StepRandomness& randomness,
                                const nn::Network& params)>;

/// One training session: the trusted side owns the parameters, derives
/// per-step randomness, authenticates and retains selected step reports,
/// applies clipped updates, and drains an asynchronous verification
/// queue. Recording, when enabled, writes replayable report/snapshot
/// files for the selected steps.
class Session {
 public:
  Session(nn::Network net, Tensor images, std::vector<int> labels, ProtocolConfig cfg);
  ~Session();

  Session(const Session&) = delete;
  Session& operator=(const Session&) = delete;

  StepRandomness randomness_for_step(std::uint32_t step) const;
  bool will_verify(std::uint32_t step) const;

  /// TEE-side intake of a step report. An unauthenticated report is
  /// MAC'd on receipt; a pre-authenticated one is checked first and a
  /// failure records an AuthFailure outcome without applying the update.
  void record_step(StepReport report);

  /// Runs steps 1..total_steps with the verifier worker draining
  /// asynchronously, then joins and drains the queue.
  void run_training(const TrainerFn& trainer);

  void start_verifier();
  void finish();

  /// Synchronously drains pending tasks on the caller thread.
  void drain_queue();

  SessionVerdict verdict() const;
  std::vector<VerificationOutcome> outcomes() const;
  const nn::Network& params() const { return net_; }
  const ProtocolConfig& config() const { return cfg_; }
  const Tensor& images() const { return images_; }
  const std::vector<int>& labels() const { return labels_; }
  std::vector<double> step_losses() const { return losses_; }

  void set_record_dir(std::string dir) { record_dir_ = std::move(dir); }

  /// Test hook modelling an adversary that rewrites retained bytes after
  /// authentication; applied to the report half of the matching task.
  void set_post_auth_tamper(
      std::uint32_t step,
      std::function<void(std::vector<std::uint8_t>& payload, crypto::MacTag& mac)> fn);

 private:
  void enqueue(VerifyTask task);
  std::optional<VerifyTask> dequeue();
  void verifier_loop();
  void verify_and_log(const VerifyTask& task);
  void record_outcome(VerificationOutcome outcome);

  nn::Network net_;
  Tensor images_;
  std::vector<int> labels_;
  ProtocolConfig cfg_;
  std::string record_dir_;

  std::uint32_t tamper_step_ = 0;
  std::function<void(std::vector<std::uint8_t>&, crypto::MacTag&)> tamper_fn_;

  mutable std::mutex queue_mutex_;
  std::condition_variable queue_cv_;
  std::deque<VerifyTask> queue_;
  bool closed_ = false;
  std::thread verifier_;

  mutable std::mutex outcome_mutex_;
  std::vector<VerificationOutcome> outcomes_;
  std::vector<double> losses_;
};

/// The honest trainer: computes the prescribed batch with the prescribed
/// randomness and reports truthfully.
TrainerFn honest_trainer(const Tensor& images, const std::vector<int>& labels,
                         const ProtocolConfig& cfg);

/// One honest step outside a session (building block for trainers).
TrainerOutput compute_honest_step(std::uint32_t step, const StepRandomness& randomness,
                                  const nn::Network& params, const Tensor& images,
                                  const std::vector<int>& labels, const ProtocolConfig& cfg);

}  // namespace veritrain::protocol
