#include <cmath>
#include <sstream>
#include <vector>

#include "doctest.h"
#include "veritrain/integrity.hpp"

using namespace veritrain;
using integrity::IntegrityGoal;

namespace {

IntegrityGoal goal(double pi, double pc, double steps, double alpha = 0.0) {
  IntegrityGoal g;
  g.detect_prob = pi;
  g.corrupt_prob = pc;
  g.total_steps = steps;
  g.rmm_false_accept = alpha;
  return g;
}

}  // namespace

TEST_CASE("full-verification threshold formula") {
  SUBCASE("one step with matching probabilities needs no verification") {
    CHECK(integrity::required_pv_full(goal(0.5, 0.5, 1)) == doctest::Approx(0.0));
  }
  SUBCASE("large-dataset reference point") {
    // 200 epochs of a 1M dataset at batch 128.
    const double pv = integrity::required_pv_full(goal(0.999, 5e-5, 1562500.0));
    CHECK(pv == doctest::Approx(0.08842).epsilon(1e-3));
    CHECK(std::abs(pv - 0.08842) < 1e-4);
  }
  SUBCASE("medium-dataset reference point") {
    // 200 epochs of a 60K dataset at batch 64.
    const double pv = integrity::required_pv_full(goal(0.99, 5e-4, 187500.0));
    CHECK(pv == doctest::Approx(0.0491).epsilon(2e-3));
  }
  SUBCASE("domain errors") {
    CHECK_THROWS_AS(integrity::required_pv_full(goal(0.0, 0.5, 10)), DomainError);
    CHECK_THROWS_AS(integrity::required_pv_full(goal(1.0, 0.5, 10)), DomainError);
    CHECK_THROWS_AS(integrity::required_pv_full(goal(0.9, 0.0, 10)), DomainError);
    CHECK_THROWS_AS(integrity::required_pv_full(goal(0.9, 1.5, 10)), DomainError);
    CHECK_THROWS_AS(integrity::required_pv_full(goal(0.9, 0.5, 0.5)), DomainError);
  }
  SUBCASE("unreachable goals clamp to 1") {
    const auto g = goal(0.99, 1e-3, 1000.0);
    CHECK(integrity::required_pv_full_raw(g) > 1.0);
    CHECK(integrity::required_pv_full(g) == 1.0);
    CHECK_FALSE(integrity::goal_reachable_full(g));
  }
}

TEST_CASE("randomized-MM threshold formula") {
  SUBCASE("alpha = 0 reduces to the full-verification threshold") {
    const auto g0 = goal(0.99, 1e-3, 100000.0, 0.0);
    CHECK(integrity::required_pv_rmm(g0) == integrity::required_pv_full(g0));
  }
  SUBCASE("reference point") {
    const double pv = integrity::required_pv_rmm(goal(0.99, 0.5, 1000.0, 0.5));
    CHECK(pv == doctest::Approx(0.01501).epsilon(1e-3));
  }
  SUBCASE("alpha -> 0 limit agrees with the full threshold") {
    DeterministicRng rng_sweep(0);
    for (double pi : {0.9, 0.99, 0.999}) {
      for (double pc : {1e-4, 1e-2, 0.3}) {
        const auto ga = goal(pi, pc, 50000.0, 1e-18);
        const auto gf = goal(pi, pc, 50000.0, 0.0);
        CHECK(std::abs(integrity::required_pv_rmm(ga) - integrity::required_pv_full(gf)) <= 1e-9);
      }
    }
  }
  SUBCASE("RMM threshold dominates the full threshold for alpha > 0") {
    for (double alpha : {0.1, 0.5, 0.9}) {
      const auto ga = goal(0.99, 0.01, 100000.0, alpha);
      CHECK(integrity::required_pv_rmm(ga) >=
            integrity::required_pv_full(goal(0.99, 0.01, 100000.0)));
    }
  }
}

TEST_CASE("per-step RMM false-accept bound") {
  CHECK(integrity::rmm_alpha(2, 1, 10) == doctest::Approx(std::pow(2.0, -10.0)).epsilon(1e-12));
  CHECK(integrity::rmm_alpha(5, 2, 3) == doctest::Approx(std::pow(5.0, -6.0)).epsilon(1e-12));
  CHECK_THROWS_AS(integrity::rmm_alpha(1, 1, 1), DomainError);
  CHECK_THROWS_AS(integrity::rmm_alpha(5, 0, 1), DomainError);
  CHECK_THROWS_AS(integrity::rmm_alpha(5, 1, 0), DomainError);
}

TEST_CASE("threshold monotonicity") {
  const double base = integrity::required_pv_full(goal(0.99, 1e-3, 100000.0));
  CHECK(integrity::required_pv_full(goal(0.999, 1e-3, 100000.0)) > base);   // stricter goal
  CHECK(integrity::required_pv_full(goal(0.99, 1e-2, 100000.0)) < base);    // easier to catch
  CHECK(integrity::required_pv_full(goal(0.99, 1e-3, 1000000.0)) < base);   // more steps
  CHECK(integrity::required_pv_rmm(goal(0.99, 1e-3, 100000.0, 0.5)) > base);  // weaker checks
}

TEST_CASE("monte carlo detection") {
  SUBCASE("never verifying never detects") {
    const auto est = integrity::monte_carlo_detection(goal(0.99, 0.5, 1000.0), 0.0, 20000, 1);
    CHECK(est.detection_rate == 0.0);
  }
  SUBCASE("certain corruption with certain verification always detects") {
    const auto est = integrity::monte_carlo_detection(goal(0.99, 1.0, 100.0), 1.0, 20000, 2);
    CHECK(est.detection_rate == 1.0);
  }
  SUBCASE("5% above the threshold meets the goal; half the threshold does not") {
    const auto g = goal(0.99, 1e-2, 100000.0);
    const double pv = integrity::required_pv_full(g);
    const auto above = integrity::monte_carlo_detection(g, 1.05 * pv, 100000, 3);
    const double sigma = std::sqrt(0.99 * 0.01 / 100000.0);
    CHECK(above.detection_rate >= 0.99 - 3.0 * sigma);
    const auto below = integrity::monte_carlo_detection(g, 0.5 * pv, 100000, 4);
    CHECK(below.detection_rate < 0.99);
  }
  SUBCASE("schedule variant matches the i.i.d. model at the mean count") {
    const auto est = integrity::monte_carlo_detection_schedule(500, 0.01, 0.0, 100000, 5);
    const double want = 1.0 - std::pow(0.99, 500.0);
    CHECK(std::abs(est.detection_rate - want) <= 4.0 * std::sqrt(want * (1 - want) / 100000.0));
  }
}

TEST_CASE("verification-probability curves") {
  SUBCASE("single point equals a direct call") {
    integrity::CurveSpec spec;
    spec.datasets = {{60000, 2e-4, 2e-4}};
    spec.batch_sizes = {128};
    spec.detect_probs = {0.99};
    spec.grid_points = 1;
    std::ostringstream out;
    integrity::emit_pv_curves(spec, out);
    std::istringstream in(out.str());
    std::string header, row;
    std::getline(in, header);
    CHECK(header == "dataset,batch,pi,pc,pv");
    std::getline(in, row);
    const double want = integrity::required_pv_full(goal(0.99, 2e-4, 200.0 * 60000.0 / 128.0));
    const double got = std::stod(row.substr(row.rfind(',') + 1));
    CHECK(std::abs(got - want) <= 1e-11 * std::max(1.0, std::abs(want)));
  }
  SUBCASE("default grid has the expected cardinality and is monotone in pc") {
    integrity::CurveSpec spec;  // 2 datasets x 4 batches x 2 pi x 100 points
    std::ostringstream out;
    integrity::emit_pv_curves(spec, out);
    std::istringstream in(out.str());
    std::string line;
    std::getline(in, line);
    std::size_t rows = 0;
    double prev_pc = -1.0, prev_pv = 0.0;
    while (std::getline(in, line)) {
      ++rows;
      const std::size_t c3 = line.rfind(',');
      const std::size_t c2 = line.rfind(',', c3 - 1);
      const double pc = std::stod(line.substr(c2 + 1, c3 - c2 - 1));
      const double pv = std::stod(line.substr(c3 + 1));
      if (prev_pc >= 0.0 && pc > prev_pc) {
        CHECK(pv <= prev_pv);  // p_v falls as corruption becomes likelier
      }
      prev_pc = pc;
      prev_pv = pv;
    }
    CHECK(rows == 2u * 4u * 2u * 100u);
  }
}
