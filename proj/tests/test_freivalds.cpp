#include <cmath>
#include <vector>

#include "doctest.h"
#include "veritrain/freivalds.hpp"

using namespace veritrain;
using freivalds::CheckResult;
using freivalds::FieldMatrix;
using freivalds::FieldParams;

namespace {

Matrix random_matrix(std::size_t rows, std::size_t cols, DeterministicRng& rng,
                     double scale = 1.0) {
  Matrix m(rows, cols);
  for (double& v : m.data) v = rng.normal() * scale;
  return m;
}

nn::MMRecord make_record(Matrix a, Matrix b, Matrix c, nn::MMRole role = nn::MMRole::FcForward) {
  nn::MMRecord rec;
  rec.role = role;
  rec.left = std::move(a);
  rec.right = std::move(b);
  rec.claimed = std::move(c);
  return rec;
}

FieldMatrix field_from(std::initializer_list<std::int64_t> vals, std::size_t rows,
                       std::size_t cols, std::uint64_t p) {
  std::vector<std::int64_t> v(vals);
  return FieldMatrix::from_integers(rows, cols, v, p);
}

}  // namespace

TEST_CASE("encoding basics") {
  FieldParams fp;
  SUBCASE("zeros map to the zero matrix") {
    const FieldMatrix z = freivalds::encode_field(Matrix(3, 2), fp);
    for (std::uint64_t v : z.data) CHECK(v == 0);
  }
  SUBCASE("1.5 at scale 2^16 encodes to 98304") {
    Matrix m(1, 1);
    m.data[0] = 1.5;
    CHECK(freivalds::encode_field(m, fp).data[0] == 98304);
  }
  SUBCASE("roundtrip is exact for in-range values") {
    DeterministicRng rng(7);
    for (int i = 0; i < 1000; ++i) {
      const double v =
          (rng.uniform_double() - 0.5) * 1000.0;  // well inside |v|*s < p/2
      Matrix m(1, 1);
      m.data[0] = v;
      const FieldMatrix enc = freivalds::encode_field(m, fp);
      const double dec = freivalds::decode_field(enc.data[0], fp.prime, fp.scale);
      CHECK(std::abs(dec - v) <= 0.5 / fp.scale);
    }
  }
  SUBCASE("overflow names the worst magnitude") {
    FieldParams small;
    small.prime = 7;
    small.scale = 1.0;
    Matrix m(1, 2);
    m.data = {1.0, 6.0};
    try {
      freivalds::encode_field(m, small);
      FAIL("expected OverflowError");
    } catch (const OverflowError& e) {
      CHECK(e.max_magnitude() == doctest::Approx(6.0));
    }
  }
  SUBCASE("parameter validation") {
    FieldParams bad;
    bad.prime = 8;
    CHECK_THROWS_AS(bad.validate(), DomainError);
    bad.prime = 7;
    bad.repetitions = 0;
    CHECK_THROWS_AS(bad.validate(), DomainError);
  }
}

TEST_CASE("brute force over F_7: the canonical wrong product accepts exactly 7 of 49 probes") {
  // A = I, B = [[2,3],[4,5]], claimed has one wrong entry (6 instead of 5).
  const std::uint64_t p = 7;
  const FieldMatrix a = field_from({1, 0, 0, 1}, 2, 2, p);
  const FieldMatrix b = field_from({2, 3, 4, 5}, 2, 2, p);
  const FieldMatrix c = field_from({2, 3, 4, 6}, 2, 2, p);

  std::size_t accepts = 0;
  for (std::uint64_t r0 = 0; r0 < p; ++r0) {
    for (std::uint64_t r1 = 0; r1 < p; ++r1) {
      const std::uint64_t probe[2] = {r0, r1};
      if (freivalds::check_with_probe(a, b, c, nn::ProbeSide::Right, probe, p)) ++accepts;
    }
  }
  CHECK(accepts == 7);

  // The correct product accepts every probe.
  const FieldMatrix good = field_from({2, 3, 4, 5}, 2, 2, p);
  accepts = 0;
  for (std::uint64_t r0 = 0; r0 < p; ++r0) {
    for (std::uint64_t r1 = 0; r1 < p; ++r1) {
      const std::uint64_t probe[2] = {r0, r1};
      if (freivalds::check_with_probe(a, b, good, nn::ProbeSide::Right, probe, p)) ++accepts;
    }
  }
  CHECK(accepts == 49);
}

TEST_CASE("correct products always accept") {
  FieldParams fp;
  fp.repetitions = 2;
  DeterministicRng rng(100);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t a = 1 + rng.uniform_u64(6);
    const std::size_t b = 1 + rng.uniform_u64(6);
    const std::size_t c = 1 + rng.uniform_u64(6);
    const Matrix left = random_matrix(a, b, rng);
    const Matrix right = random_matrix(b, c, rng);
    // Quantized product so the claimed matrix is exact over the field.
    const Matrix claimed = matmul_quantized(left, right, fp.scale);
    const auto role = trial % 2 == 0 ? nn::MMRole::FcForward : nn::MMRole::ConvForward;
    auto rec = make_record(left, right, claimed, role);
    CHECK(freivalds::freivalds_check(rec, fp, rng) == CheckResult::Accept);
  }
}

TEST_CASE("empirical soundness at p=5, k=1 stays within the field bound") {
  const std::uint64_t p = 5;
  DeterministicRng rng(2024);
  const std::size_t trials = 100000;
  std::size_t accepts = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    const std::size_t rows = 2 + rng.uniform_u64(3);
    const std::size_t inner = 2 + rng.uniform_u64(3);
    const std::size_t cols = 2 + rng.uniform_u64(3);
    FieldMatrix a(rows, inner), b(inner, cols);
    for (auto& v : a.data) v = rng.uniform_u64(p);
    for (auto& v : b.data) v = rng.uniform_u64(p);
    // Honest product over the field.
    FieldMatrix c(rows, cols);
    for (std::size_t i = 0; i < rows; ++i) {
      for (std::size_t j = 0; j < cols; ++j) {
        std::uint64_t acc = 0;
        for (std::size_t k = 0; k < inner; ++k) acc = (acc + a.at(i, k) * b.at(k, j)) % p;
        c.at(i, j) = acc;
      }
    }
    // Single-entry corruption by a nonzero delta.
    const std::size_t pos = rng.uniform_u64(c.data.size());
    c.data[pos] = (c.data[pos] + 1 + rng.uniform_u64(p - 1)) % p;

    std::vector<std::uint64_t> probe(cols);
    for (auto& v : probe) v = rng.uniform_u64(p);
    if (freivalds::check_with_probe(a, b, c, nn::ProbeSide::Right, probe, p)) ++accepts;
  }
  const double rate = static_cast<double>(accepts) / static_cast<double>(trials);
  const double sigma = std::sqrt(0.2 * 0.8 / static_cast<double>(trials));
  CHECK(rate <= 0.2 + 3.0 * sigma);
}

TEST_CASE("acceptance of a fixed wrong product decays as rate^k") {
  // One corrupted column over F_5: the k=1 acceptance rate is 1/5, and k
  // independent probes accept iff each one lands in the kernel.
  const std::uint64_t p = 5;
  DeterministicRng rng(77);
  FieldMatrix a(2, 2), b(2, 3);
  for (auto& v : a.data) v = rng.uniform_u64(p);
  for (auto& v : b.data) v = rng.uniform_u64(p);
  FieldMatrix c(2, 3);
  for (std::size_t i = 0; i < 2; ++i) {
    for (std::size_t j = 0; j < 3; ++j) {
      c.at(i, j) = (a.at(i, 0) * b.at(0, j) + a.at(i, 1) * b.at(1, j)) % p;
    }
  }
  c.at(0, 1) = (c.at(0, 1) + 2) % p;

  const std::size_t trials = 20000;
  std::size_t accept1 = 0, accept3 = 0;
  for (std::size_t t = 0; t < trials; ++t) {
    bool all = true;
    for (int k = 0; k < 3; ++k) {
      std::vector<std::uint64_t> probe(3);
      for (auto& v : probe) v = rng.uniform_u64(p);
      const bool ok = freivalds::check_with_probe(a, b, c, nn::ProbeSide::Right, probe, p);
      if (k == 0 && ok) ++accept1;
      all = all && ok;
    }
    if (all) ++accept3;
  }
  const double r1 = static_cast<double>(accept1) / trials;
  const double r3 = static_cast<double>(accept3) / trials;
  const double want = r1 * r1 * r1;
  const double sigma = std::sqrt(std::max(want * (1 - want), 1e-9) / trials);
  CHECK(std::abs(r3 - want) <= 4.0 * sigma + 1e-3);
}

TEST_CASE("verify_layer_mms pinpoints the corrupted record") {
  FieldParams fp;  // p = 2^61 - 1: a surviving corruption is astronomically unlikely
  DeterministicRng data_rng(500);
  std::vector<nn::MMRecord> records;
  for (std::uint32_t i = 0; i < 6; ++i) {
    const Matrix left = random_matrix(3, 4, data_rng);
    const Matrix right = random_matrix(4, 2, data_rng);
    auto rec = make_record(left, right, matmul_quantized(left, right, fp.scale));
    rec.op_id = 100 + i;
    records.push_back(std::move(rec));
  }

  SUBCASE("empty record list accepts vacuously") {
    DeterministicRng rng(1);
    const auto outcome = freivalds::verify_layer_mms({}, fp, rng);
    CHECK(outcome.accepted);
  }
  SUBCASE("all honest records accept") {
    DeterministicRng rng(2);
    const auto outcome = freivalds::verify_layer_mms(records, fp, rng);
    CHECK(outcome.accepted);
  }
  SUBCASE("one corrupted record is rejected by op id") {
    records[3].claimed.data[1] += 1.0 / fp.scale;  // one quantum off
    DeterministicRng rng(3);
    const auto outcome = freivalds::verify_layer_mms(records, fp, rng);
    CHECK_FALSE(outcome.accepted);
    CHECK(outcome.failing_op_id == 103);
  }
}

TEST_CASE("same seed gives the same accept/reject sequence") {
  FieldParams fp;
  fp.prime = 100003;
  fp.scale = 4.0;
  DeterministicRng data_rng(9);
  std::vector<nn::MMRecord> records;
  for (int i = 0; i < 20; ++i) {
    const Matrix left = random_matrix(2, 2, data_rng);
    const Matrix right = random_matrix(2, 2, data_rng);
    Matrix claimed = matmul_quantized(left, right, fp.scale);
    if (i % 3 == 0) claimed.data[0] += 0.25;  // corrupt every third record
    records.push_back(make_record(left, right, claimed));
  }
  auto run = [&](std::uint64_t seed) {
    DeterministicRng rng(seed);
    std::vector<int> verdicts;
    for (auto& rec : records) {
      verdicts.push_back(freivalds::freivalds_check(rec, fp, rng) == CheckResult::Accept ? 1 : 0);
    }
    return verdicts;
  };
  CHECK(run(42) == run(42));
}

TEST_CASE("cost model") {
  SUBCASE("square 512 with k=1") {
    const auto cm = freivalds::rmm_cost_model(512, 512, 512, 1);
    CHECK(cm.full_ops == 512ull * 512 * 512);
    CHECK(cm.rmm_ops == 3ull * 512 * 512);
  }
  SUBCASE("degenerate 1x1x1") {
    const auto cm = freivalds::rmm_cost_model(1, 1, 1, 3);
    CHECK(cm.full_ops == 1);
    CHECK(cm.rmm_ops == 9);
  }
  SUBCASE("instrumented check matches the model on random dims") {
    FieldParams fp;
    DeterministicRng rng(321);
    for (int t = 0; t < 10; ++t) {
      const std::size_t a = 1 + rng.uniform_u64(8);
      const std::size_t b = 1 + rng.uniform_u64(8);
      const std::size_t c = 1 + rng.uniform_u64(8);
      fp.repetitions = 1 + static_cast<std::uint32_t>(rng.uniform_u64(3));
      const Matrix left = random_matrix(a, b, rng);
      const Matrix right = random_matrix(b, c, rng);
      auto rec = make_record(left, right, matmul_quantized(left, right, fp.scale),
                             t % 2 == 0 ? nn::MMRole::FcForward : nn::MMRole::ConvGradInput);
      std::uint64_t counted = 0;
      REQUIRE(freivalds::freivalds_check(rec, fp, rng, &counted) == CheckResult::Accept);
      const auto cm = freivalds::rmm_cost_model(a, b, c, fp.repetitions);
      CHECK(counted == cm.rmm_ops);
    }
  }
}
