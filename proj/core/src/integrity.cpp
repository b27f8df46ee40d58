#include "veritrain/integrity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <random>
#include <string>

#include "veritrain/errors.hpp"

namespace veritrain::integrity {

void IntegrityGoal::validate() const {
  if (!(detect_prob > 0.0 && detect_prob < 1.0)) {
    throw DomainError("detection probability must lie in (0,1)");
  }
  if (!(corrupt_prob > 0.0 && corrupt_prob <= 1.0)) {
    throw DomainError("corruption probability must lie in (0,1]");
  }
  if (!(total_steps >= 1.0)) throw DomainError("total steps must be >= 1");
  if (!(rmm_false_accept >= 0.0 && rmm_false_accept < 1.0)) {
    throw DomainError("RMM false-accept probability must lie in [0,1)");
  }
}

namespace {

double threshold_from_log_miss(double log_miss_per_verification, const IntegrityGoal& goal) {
  // log(1-p_i) >= ceil(B*p_v) * log_miss, solved for p_v with the ceiling
  // absorbed into the -1 term.
  const double log_target = std::log1p(-goal.detect_prob);
  if (log_miss_per_verification == 0.0) {
    return std::numeric_limits<double>::infinity();
  }
  return (log_target / log_miss_per_verification - 1.0) / goal.total_steps;
}

}  // namespace

double required_pv_full_raw(const IntegrityGoal& goal) {
  goal.validate();
  // p_c == 1 is the limit log(1-p_c) -> -inf: any verification detects.
  if (goal.corrupt_prob == 1.0) return -1.0 / goal.total_steps;
  return threshold_from_log_miss(std::log1p(-goal.corrupt_prob), goal);
}

double required_pv_full(const IntegrityGoal& goal) {
  return std::clamp(required_pv_full_raw(goal), 0.0, 1.0);
}

double required_pv_rmm_raw(const IntegrityGoal& goal) {
  goal.validate();
  // Per verified step the miss probability is (1-p_c) + p_c*alpha.
  const double log_miss = std::log1p((goal.rmm_false_accept - 1.0) * goal.corrupt_prob);
  return threshold_from_log_miss(log_miss, goal);
}

double required_pv_rmm(const IntegrityGoal& goal) {
  return std::clamp(required_pv_rmm_raw(goal), 0.0, 1.0);
}

bool goal_reachable_full(const IntegrityGoal& goal) {
  return required_pv_full_raw(goal) <= 1.0;
}

double rmm_alpha(std::uint64_t field_size, std::uint64_t m, std::uint64_t k) {
  if (field_size < 2) throw DomainError("field size must be >= 2");
  if (m < 1) throw DomainError("a step with no MM has no RMM error bound; recompute directly");
  if (k < 1) throw DomainError("repetitions must be >= 1");
  return std::exp(-static_cast<double>(m) * static_cast<double>(k) *
                  std::log(static_cast<double>(field_size)));
}

namespace {

MonteCarloEstimate finish_estimate(std::uint64_t detected, std::uint64_t trials) {
  MonteCarloEstimate est;
  est.trials = trials;
  est.detection_rate = static_cast<double>(detected) / static_cast<double>(trials);
  const double se =
      std::sqrt(std::max(est.detection_rate * (1.0 - est.detection_rate), 0.0) /
                static_cast<double>(trials));
  est.ci_low = std::max(0.0, est.detection_rate - 1.96 * se);
  est.ci_high = std::min(1.0, est.detection_rate + 1.96 * se);
  return est;
}

}  // namespace

MonteCarloEstimate monte_carlo_detection(const IntegrityGoal& goal, double pv,
                                         std::uint64_t trials, std::uint64_t seed) {
  goal.validate();
  if (!(pv >= 0.0 && pv <= 1.0)) throw DomainError("verification probability must lie in [0,1]");
  if (trials < 1) throw DomainError("trials must be >= 1");

  const auto steps = static_cast<std::uint64_t>(std::llround(goal.total_steps));
  const double catch_prob = pv * (1.0 - goal.rmm_false_accept);
  std::mt19937_64 gen(seed);
  std::uint64_t detected = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    // Corrupted-step count, then how many of those are verified and
    // caught; grouping the per-step Bernoulli draws into binomials keeps
    // large-B goals tractable.
    std::binomial_distribution<std::uint64_t> corrupt_dist(steps, goal.corrupt_prob);
    const std::uint64_t corrupted = corrupt_dist(gen);
    if (corrupted == 0 || catch_prob == 0.0) continue;
    std::binomial_distribution<std::uint64_t> catch_dist(corrupted, catch_prob);
    if (catch_dist(gen) >= 1) ++detected;
  }
  return finish_estimate(detected, trials);
}

MonteCarloEstimate monte_carlo_detection_schedule(std::uint64_t deviating_steps, double pv,
                                                  double alpha, std::uint64_t trials,
                                                  std::uint64_t seed) {
  if (!(pv >= 0.0 && pv <= 1.0)) throw DomainError("verification probability must lie in [0,1]");
  if (!(alpha >= 0.0 && alpha < 1.0)) throw DomainError("alpha must lie in [0,1)");
  if (trials < 1) throw DomainError("trials must be >= 1");
  const double catch_prob = pv * (1.0 - alpha);
  std::mt19937_64 gen(seed);
  std::uint64_t detected = 0;
  for (std::uint64_t t = 0; t < trials; ++t) {
    if (deviating_steps == 0 || catch_prob == 0.0) break;
    std::binomial_distribution<std::uint64_t> catch_dist(deviating_steps, catch_prob);
    if (catch_dist(gen) >= 1) ++detected;
  }
  return finish_estimate(detected, trials);
}

void emit_pv_curves(const CurveSpec& spec, std::ostream& out) {
  if (spec.grid_points < 1) throw DomainError("curve grid needs at least one point");
  char buf[64];
  out << "dataset,batch,pi,pc,pv\n";
  for (const DatasetCurve& ds : spec.datasets) {
    for (double batch : spec.batch_sizes) {
      for (double pi : spec.detect_probs) {
        for (std::size_t g = 0; g < spec.grid_points; ++g) {
          const double frac =
              spec.grid_points == 1
                  ? 0.0
                  : static_cast<double>(g) / static_cast<double>(spec.grid_points - 1);
          const double pc = ds.corrupt_lo + frac * (ds.corrupt_hi - ds.corrupt_lo);
          IntegrityGoal goal;
          goal.detect_prob = pi;
          goal.corrupt_prob = pc;
          goal.total_steps = spec.epochs * (ds.dataset_size / batch);
          const double pv = required_pv_full(goal);
          std::snprintf(buf, sizeof(buf), "%.0f,%.0f,%g,", ds.dataset_size, batch, pi);
          out << buf;
          std::snprintf(buf, sizeof(buf), "%.11e,", pc);
          out << buf;
          std::snprintf(buf, sizeof(buf), "%.11e\n", pv);
          out << buf;
        }
      }
    }
  }
}

}  // namespace veritrain::integrity
