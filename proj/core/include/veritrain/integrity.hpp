#pragma once

#include <cstdint>
#include <ostream>
#include <vector>

namespace veritrain::integrity {

/// Detection goal: catch at least one of B steps, each independently
/// corrupted with probability corrupt_prob, with probability at least
/// detect_prob. rmm_false_accept is the per-verified-step probability
/// that a corrupted step slips through a randomized MM check.
struct IntegrityGoal {
  double detect_prob = 0.99;      // p_i in (0,1)
  double corrupt_prob = 1e-3;     // p_c in (0,1]
  double total_steps = 1;         // B >= 1; fractional steps-per-epoch allowed
  double rmm_false_accept = 0.0;  // alpha in [0,1)

  void validate() const;  // throws DomainError
};

/// Verification-probability threshold under full recomputation:
/// B^-1 * (ln(1-p_i)/ln(1-p_c) - 1), unclamped. Any p_v strictly above it
/// meets the goal; a value above 1 means the goal is unreachable even
/// when every step is verified.
double required_pv_full_raw(const IntegrityGoal& goal);
/// Same threshold clamped to [0,1].
double required_pv_full(const IntegrityGoal& goal);

/// Threshold under randomized MM verification:
/// B^-1 * (ln(1-p_i)/ln(1+(alpha-1)*p_c) - 1). Reduces to the full-mode
/// threshold at alpha = 0.
double required_pv_rmm_raw(const IntegrityGoal& goal);
double required_pv_rmm(const IntegrityGoal& goal);

bool goal_reachable_full(const IntegrityGoal& goal);

/// Per-step false-accept bound of randomized MM verification:
/// |S|^-(m*k) for m independent products checked k times each over a
/// field of size |S|. m = 0 is a domain error (nothing to probe).
double rmm_alpha(std::uint64_t field_size, std::uint64_t m, std::uint64_t k);

struct MonteCarloEstimate {
  double detection_rate = 0.0;
  double ci_low = 0.0;   // 95% binomial interval
  double ci_high = 0.0;
  std::uint64_t trials = 0;
};

/// Simulates the goal's per-step model: each step corrupt w.p. p_c,
/// verified w.p. p_v, and a corrupted verified step detected w.p.
/// (1-alpha). A trial detects when at least one step is caught.
MonteCarloEstimate monte_carlo_detection(const IntegrityGoal& goal, double pv,
                                         std::uint64_t trials, std::uint64_t seed);

/// Burst-aware variant: the corrupted steps are fixed (a recorded attack
/// schedule) instead of i.i.d. draws.
MonteCarloEstimate monte_carlo_detection_schedule(std::uint64_t deviating_steps, double pv,
                                                  double alpha, std::uint64_t trials,
                                                  std::uint64_t seed);

struct DatasetCurve {
  double dataset_size = 0;
  double corrupt_lo = 0;
  double corrupt_hi = 0;
};

/// The verification-probability curve family: fixed epoch count, one
/// corruption-probability sweep per dataset size, one curve per
/// (dataset, batch, p_i) combination.
struct CurveSpec {
  double epochs = 200;
  std::vector<DatasetCurve> datasets = {{60000, 1e-4, 5e-4}, {1000000, 5e-6, 5e-5}};
  std::vector<double> batch_sizes = {64, 128, 256, 512};
  std::vector<double> detect_probs = {0.99, 0.999};
  std::size_t grid_points = 100;
};

/// CSV rows `dataset,batch,pi,pc,pv` with 12 significant digits and LF
/// line endings; pv is the full-mode threshold at B = epochs*(dataset/b).
void emit_pv_curves(const CurveSpec& spec, std::ostream& out);

}  // namespace veritrain::integrity
