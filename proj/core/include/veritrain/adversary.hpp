#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "veritrain/dataset.hpp"
#include "veritrain/nn.hpp"
#include "veritrain/protocol.hpp"
#include "veritrain/rng.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::adversary {

/// Backdoor trigger families. Patch kinds overwrite a fixed footprint;
/// the transform kinds remap the whole image.
enum class TriggerKind : std::uint8_t {
  CornerPatch,    // multi-pixel block with several colors in one corner
  TwoCornerDots,  // small low-variation marks in two opposite corners
  Grayscale,      // channel averaging
  ColorRotation,  // cyclic channel permutation
};

const char* trigger_kind_name(TriggerKind kind);
TriggerKind trigger_kind_from_name(const std::string& name);  // throws DomainError

struct Trigger {
  TriggerKind kind = TriggerKind::CornerPatch;
  std::size_t patch_size = 4;  // footprint edge for CornerPatch
  std::size_t dot_size = 2;    // footprint edge for TwoCornerDots
  std::size_t inset = 1;       // corner inset for patch kinds

  static Trigger corner_patch();
  static Trigger two_corner_dots();
  static Trigger grayscale();
  static Trigger color_rotation();
};

/// Deterministic stamp of one [C,H,W] image; patch kinds modify only
/// their footprint pixels and are idempotent. Values stay in [0,1].
/// Throws ShapeError when the footprint does not fit.
Tensor stamp(const Tensor& image, const Trigger& trigger);
void stamp_inplace(double* image, std::size_t channels, std::size_t height, std::size_t width,
                   const Trigger& trigger);

struct AttackPlan {
  double start_fraction = 0.5;  // fraction of total steps at which the attack may begin
  double pois_rate = 0.5;       // fraction of each attacked batch replaced
  int target_label = 0;
  Trigger trigger;
  double high_threshold = 0.85;  // halt the attack at this success rate
  double low_threshold = 0.5;    // resume below this

  void validate() const;  // throws DomainError
};

/// Ground-truth record of which steps deviated from the honest protocol,
/// independent of whether the verifier caught them.
struct DeviationLog {
  std::vector<std::uint8_t> per_step;  // index i-1 for step i
  std::uint32_t deviating_steps = 0;
  std::uint32_t total_steps = 0;
  bool reached_high = false;
  std::uint32_t deviations_to_first_success = 0;

  void mark(bool deviated);
  double empirical_pc() const;
  /// Deviations spent reaching the success threshold for the first time;
  /// all deviations when the attack never got there.
  std::uint32_t deviations_to_threshold() const;
};

struct PoisonResult {
  Tensor batch;
  std::vector<int> labels;
  std::size_t poisoned = 0;
};

/// Stamps and relabels round(pois_rate*b) samples (at least one for a
/// positive rate), chosen round-robin across the non-target classes.
PoisonResult poison_batch(const Tensor& batch, const std::vector<int>& labels,
                          const AttackPlan& plan, DeterministicRng& rng);

enum class AttackDecision : std::uint8_t { Honest, Attack };

struct ControllerState {
  bool started = false;
  bool attacking = false;
};

/// Threshold on/off controller: honest before the start gate, attacking
/// until the success rate passes the high threshold, honest again until
/// it decays below the low threshold.
AttackDecision attack_controller_step(ControllerState& state, bool past_start_gate,
                                      double success_rate, const AttackPlan& plan);

// Report corruption strategies (wrong gradients relative to the honest
// computation).
struct ScaleGradient {
  double factor = 1.0;
};
struct ReplaceWithTarget {
  nn::GradientSet grads;
};
struct FlipSign {};
struct SingleEntry {
  double delta = 1e-2;
  std::size_t flat_index = 0;  // position within the concatenated gradient order
};
using CorruptStrategy = std::variant<ScaleGradient, ReplaceWithTarget, FlipSign, SingleEntry>;

/// Applies the strategy to the report in place (before authentication;
/// mutating authenticated bytes instead trips the MAC check).
void corrupt_report(protocol::StepReport& report, const CorruptStrategy& strategy);

/// Perturbs one entry of a claimed MM product (RMM-mode corruption).
void corrupt_mm_record(protocol::StepReport& report, std::size_t record_index,
                       std::size_t entry_index, double delta);

/// Fraction of the test set classified correctly (inference mode).
double evaluate_accuracy(const nn::Network& net, const data::Dataset& test);

/// Fraction of triggered non-target-class test images classified as the
/// target label.
double evaluate_attack_success(const nn::Network& net, const data::Dataset& clean_test,
                               const AttackPlan& plan);

struct AttackMeasurement {
  double clean_accuracy = 0.0;
  double attack_success = 0.0;
  std::uint32_t deviating_steps = 0;  // to the first threshold hit (see DeviationLog)
  std::uint32_t total_steps = 0;
  double empirical_pc = 0.0;
  double required_pv = 0.0;  // full-verification threshold for detection failure <= 1e-3
};

AttackMeasurement measure_attack(const nn::Network& final_params, const data::Dataset& clean_test,
                                 const AttackPlan& plan, const DeviationLog& log);

/// Trainer that follows the plan: honest until the start gate, then the
/// hysteresis controller decides per step; attacked steps poison the
/// prescribed batch and are flagged in the log. The probe set drives the
/// controller's success estimate.
protocol::TrainerFn attacking_trainer(const Tensor& images, const std::vector<int>& labels,
                                      const protocol::ProtocolConfig& cfg, const AttackPlan& plan,
                                      const data::Dataset& probe_set, DeviationLog& log,
                                      std::uint64_t rng_seed);

/// Probe set for the controller: triggered copies of up to `count`
/// non-target test images.
data::Dataset make_probe_set(const data::Dataset& clean_test, const AttackPlan& plan,
                             std::size_t count);

}  // namespace veritrain::adversary
