#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "veritrain/nn.hpp"
#include "veritrain/rng.hpp"
#include "veritrain/tensor.hpp"

namespace veritrain::freivalds {

/// Field and fixed-point encoding parameters for randomized MM checks.
/// The default prime 2^61-1 leaves headroom for 128-bit accumulation;
/// small primes are accepted for exhaustive testing.
struct FieldParams {
  std::uint64_t prime = (1ULL << 61) - 1;
  double scale = 65536.0;  // power-of-two float-to-field multiplier
  std::uint32_t repetitions = 1;

  /// Throws DomainError unless prime is prime, scale >= 1 and k >= 1.
  void validate() const;
};

bool is_prime_u64(std::uint64_t n);

/// Matrix over Z_p, entries in [0, prime).
struct FieldMatrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint64_t> data;

  FieldMatrix() = default;
  FieldMatrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0) {}

  std::uint64_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::uint64_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }

  /// Reduces signed integers into the field (testing hook for small primes).
  static FieldMatrix from_integers(std::size_t rows, std::size_t cols,
                                   std::span<const std::int64_t> values, std::uint64_t prime);
};

/// round(value * scale) mod p per entry. Precondition |value|*scale < p/2
/// so the centered decoding is exact; violations raise OverflowError
/// naming the largest offending magnitude.
FieldMatrix encode_field(const Matrix& m, const FieldParams& fp);
/// Same, at scale^2 — the scale carried by a product of two encoded
/// operands.
FieldMatrix encode_field_product(const Matrix& m, const FieldParams& fp);
/// Centered lift back to a double at the given scale.
double decode_field(std::uint64_t v, std::uint64_t prime, double scale);

enum class CheckResult : std::uint8_t { Accept, Reject };

/// One probe of claimed == left*right with an explicit probe vector.
/// ProbeSide::Right checks left*(right*r) == claimed*r with r of length
/// cols; ProbeSide::Left checks (r*left)*right == r*claimed with r of
/// length rows. `mul_adds`, when given, accumulates the number of field
/// multiply-adds performed.
bool check_with_probe(const FieldMatrix& left, const FieldMatrix& right,
                      const FieldMatrix& claimed, nn::ProbeSide side,
                      std::span<const std::uint64_t> probe, std::uint64_t prime,
                      std::uint64_t* mul_adds = nullptr);

/// Freivalds check of one MM record: k independent probe vectors with
/// entries uniform in the field. Correct products always accept; a wrong
/// product survives with probability at most (1/p)^k.
CheckResult freivalds_check(const nn::MMRecord& rec, const FieldParams& fp, DeterministicRng& rng,
                            std::uint64_t* mul_adds = nullptr);

struct LayerCheckOutcome {
  bool accepted = true;
  std::uint32_t failing_op_id = 0;
};

/// Checks every record of one step; rejects with the first failing op id.
/// Joint false-accept probability is at most (1/p)^(m*k) for m records.
LayerCheckOutcome verify_layer_mms(std::span<const nn::MMRecord> records, const FieldParams& fp,
                                   DeterministicRng& rng);

struct CostModel {
  std::uint64_t full_ops = 0;  // a*b*c multiply-adds
  std::uint64_t rmm_ops = 0;   // k*(b*c + a*b + a*c) multiply-adds
};

/// Operation counts for recomputing an (a x b)*(b x c) product versus
/// probing it k times.
CostModel rmm_cost_model(std::size_t rows, std::size_t inner, std::size_t cols, std::uint32_t k);

}  // namespace veritrain::freivalds
