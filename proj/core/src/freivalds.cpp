#include "veritrain/freivalds.hpp"

#include <cmath>
#include <string>

#include "veritrain/errors.hpp"

namespace veritrain::freivalds {

namespace {

using u128 = unsigned __int128;

inline std::uint64_t mulmod(std::uint64_t a, std::uint64_t b, std::uint64_t p) {
  return static_cast<std::uint64_t>((static_cast<u128>(a) * b) % p);
}

inline std::uint64_t addmod(std::uint64_t a, std::uint64_t b, std::uint64_t p) {
  const std::uint64_t s = a + b;  // a,b < p <= 2^61, no wrap
  return s >= p ? s - p : s;
}

std::uint64_t powmod(std::uint64_t base, std::uint64_t exp, std::uint64_t mod) {
  std::uint64_t acc = 1;
  base %= mod;
  while (exp > 0) {
    if (exp & 1) acc = mulmod(acc, base, mod);
    base = mulmod(base, base, mod);
    exp >>= 1;
  }
  return acc;
}

}  // namespace

bool is_prime_u64(std::uint64_t n) {
  if (n < 2) return false;
  for (std::uint64_t p : {2ULL, 3ULL, 5ULL, 7ULL, 11ULL, 13ULL, 17ULL, 19ULL, 23ULL, 29ULL,
                          31ULL, 37ULL}) {
    if (n == p) return true;
    if (n % p == 0) return false;
  }
  // Deterministic Miller-Rabin for 64-bit inputs with the standard bases.
  std::uint64_t d = n - 1;
  int r = 0;
  while ((d & 1) == 0) {
    d >>= 1;
    ++r;
  }
  for (std::uint64_t a : {2ULL, 3ULL, 5ULL, 7ULL, 11ULL, 13ULL, 17ULL, 19ULL, 23ULL, 29ULL,
                          31ULL, 37ULL}) {
    std::uint64_t x = powmod(a, d, n);
    if (x == 1 || x == n - 1) continue;
    bool witness = true;
    for (int i = 1; i < r; ++i) {
      x = mulmod(x, x, n);
      if (x == n - 1) {
        witness = false;
        break;
      }
    }
    if (witness) return false;
  }
  return true;
}

void FieldParams::validate() const {
  if (!is_prime_u64(prime)) {
    throw DomainError("field size " + std::to_string(prime) + " is not prime");
  }
  if (prime > (1ULL << 61)) {
    throw DomainError("field size exceeds the 2^61 accumulation headroom");
  }
  if (!(scale >= 1.0)) throw DomainError("quantization scale must be >= 1");
  if (repetitions < 1) throw DomainError("repetitions must be >= 1");
}

FieldMatrix FieldMatrix::from_integers(std::size_t rows, std::size_t cols,
                                       std::span<const std::int64_t> values,
                                       std::uint64_t prime) {
  if (values.size() != rows * cols) throw ShapeError("field matrix value count mismatch");
  FieldMatrix m(rows, cols);
  const std::int64_t p = static_cast<std::int64_t>(prime);
  for (std::size_t i = 0; i < values.size(); ++i) {
    std::int64_t v = values[i] % p;
    if (v < 0) v += p;
    m.data[i] = static_cast<std::uint64_t>(v);
  }
  return m;
}

namespace {

FieldMatrix encode_at_scale(const Matrix& m, std::uint64_t prime, double scale) {
  FieldMatrix out(m.rows, m.cols);
  const double half_p = static_cast<double>(prime) / 2.0;
  double worst = 0.0;
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const double scaled = m.data[i] * scale;
    if (!(std::abs(scaled) < half_p)) {
      worst = std::max(worst, std::abs(m.data[i]));
      continue;
    }
    const std::int64_t q = std::llround(scaled);
    out.data[i] =
        q >= 0 ? static_cast<std::uint64_t>(q) : prime - static_cast<std::uint64_t>(-q);
  }
  if (worst > 0.0) {
    throw OverflowError(worst, "field encoding overflow: |value|*scale >= p/2, worst magnitude " +
                                   std::to_string(worst));
  }
  return out;
}

}  // namespace

FieldMatrix encode_field(const Matrix& m, const FieldParams& fp) {
  return encode_at_scale(m, fp.prime, fp.scale);
}

FieldMatrix encode_field_product(const Matrix& m, const FieldParams& fp) {
  return encode_at_scale(m, fp.prime, fp.scale * fp.scale);
}

double decode_field(std::uint64_t v, std::uint64_t prime, double scale) {
  // Centered lift: values above p/2 represent negatives.
  if (v > prime / 2) {
    return -static_cast<double>(prime - v) / scale;
  }
  return static_cast<double>(v) / scale;
}

bool check_with_probe(const FieldMatrix& left, const FieldMatrix& right,
                      const FieldMatrix& claimed, nn::ProbeSide side,
                      std::span<const std::uint64_t> probe, std::uint64_t prime,
                      std::uint64_t* mul_adds) {
  if (left.cols != right.rows || claimed.rows != left.rows || claimed.cols != right.cols) {
    throw ShapeError("MM record extents are inconsistent");
  }
  std::uint64_t ops = 0;
  bool equal = true;
  if (side == nn::ProbeSide::Right) {
    if (probe.size() != right.cols) throw ShapeError("probe length mismatch");
    // u = right*r, v = left*u, w = claimed*r; accept iff v == w.
    std::vector<std::uint64_t> u(right.rows, 0);
    for (std::size_t i = 0; i < right.rows; ++i) {
      std::uint64_t acc = 0;
      const std::uint64_t* row = &right.data[i * right.cols];
      for (std::size_t j = 0; j < right.cols; ++j) acc = addmod(acc, mulmod(row[j], probe[j], prime), prime);
      u[i] = acc;
    }
    ops += right.rows * right.cols;
    for (std::size_t i = 0; i < left.rows; ++i) {
      std::uint64_t v = 0;
      const std::uint64_t* lrow = &left.data[i * left.cols];
      for (std::size_t j = 0; j < left.cols; ++j) v = addmod(v, mulmod(lrow[j], u[j], prime), prime);
      std::uint64_t w = 0;
      const std::uint64_t* crow = &claimed.data[i * claimed.cols];
      for (std::size_t j = 0; j < claimed.cols; ++j) {
        w = addmod(w, mulmod(crow[j], probe[j], prime), prime);
      }
      if (v != w) equal = false;
    }
    ops += left.rows * left.cols + claimed.rows * claimed.cols;
  } else {
    if (probe.size() != left.rows) throw ShapeError("probe length mismatch");
    // u = r*left, v = u*right, w = r*claimed; accept iff v == w.
    std::vector<std::uint64_t> u(left.cols, 0);
    for (std::size_t i = 0; i < left.rows; ++i) {
      const std::uint64_t ri = probe[i];
      if (ri == 0) continue;
      const std::uint64_t* row = &left.data[i * left.cols];
      for (std::size_t j = 0; j < left.cols; ++j) {
        u[j] = addmod(u[j], mulmod(ri, row[j], prime), prime);
      }
    }
    ops += left.rows * left.cols;
    std::vector<std::uint64_t> v(right.cols, 0);
    for (std::size_t i = 0; i < right.rows; ++i) {
      const std::uint64_t ui = u[i];
      if (ui == 0) continue;
      const std::uint64_t* row = &right.data[i * right.cols];
      for (std::size_t j = 0; j < right.cols; ++j) {
        v[j] = addmod(v[j], mulmod(ui, row[j], prime), prime);
      }
    }
    ops += right.rows * right.cols;
    std::vector<std::uint64_t> w(claimed.cols, 0);
    for (std::size_t i = 0; i < claimed.rows; ++i) {
      const std::uint64_t ri = probe[i];
      if (ri == 0) continue;
      const std::uint64_t* row = &claimed.data[i * claimed.cols];
      for (std::size_t j = 0; j < claimed.cols; ++j) {
        w[j] = addmod(w[j], mulmod(ri, row[j], prime), prime);
      }
    }
    ops += claimed.rows * claimed.cols;
    equal = (v == w);
  }
  if (mul_adds != nullptr) *mul_adds += ops;
  return equal;
}

CheckResult freivalds_check(const nn::MMRecord& rec, const FieldParams& fp, DeterministicRng& rng,
                            std::uint64_t* mul_adds) {
  fp.validate();
  const FieldMatrix left = encode_field(rec.left, fp);
  const FieldMatrix right = encode_field(rec.right, fp);
  const FieldMatrix claimed = encode_field_product(rec.claimed, fp);
  const nn::ProbeSide side = nn::probe_side(rec.role);
  const std::size_t probe_len =
      side == nn::ProbeSide::Right ? claimed.cols : claimed.rows;

  for (std::uint32_t rep = 0; rep < fp.repetitions; ++rep) {
    std::vector<std::uint64_t> probe(probe_len);
    for (auto& v : probe) v = rng.uniform_u64(fp.prime);
    if (!check_with_probe(left, right, claimed, side, probe, fp.prime, mul_adds)) {
      return CheckResult::Reject;
    }
  }
  return CheckResult::Accept;
}

LayerCheckOutcome verify_layer_mms(std::span<const nn::MMRecord> records, const FieldParams& fp,
                                   DeterministicRng& rng) {
  for (const nn::MMRecord& rec : records) {
    if (freivalds_check(rec, fp, rng) == CheckResult::Reject) {
      return {false, rec.op_id};
    }
  }
  return {true, 0};
}

CostModel rmm_cost_model(std::size_t rows, std::size_t inner, std::size_t cols, std::uint32_t k) {
  CostModel cm;
  cm.full_ops = static_cast<std::uint64_t>(rows) * inner * cols;
  cm.rmm_ops = static_cast<std::uint64_t>(k) *
               (static_cast<std::uint64_t>(inner) * cols + static_cast<std::uint64_t>(rows) * inner +
                static_cast<std::uint64_t>(rows) * cols);
  return cm;
}

}  // namespace veritrain::freivalds
