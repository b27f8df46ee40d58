#include "veritrain/tensor.hpp"

#include <cmath>
#include <cstdlib>
#include <numeric>
#include <string>

namespace veritrain {

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return shape.empty() ? 0 : n;
}

Tensor::Tensor(std::vector<std::size_t> shape)
    : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0) {}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (shape_numel(shape_) != data_.size()) {
    throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                     " does not match shape product " + std::to_string(shape_numel(shape_)));
  }
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value) {
  Tensor t(std::move(shape));
  for (double& v : t.data_) v = value;
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data_) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

double Tensor::max_abs() const {
  double m = 0.0;
  for (double v : data_) m = std::max(m, std::abs(v));
  return m;
}

Tensor Tensor::reshaped(std::vector<std::size_t> new_shape) const {
  if (shape_numel(new_shape) != data_.size()) {
    throw ShapeError("reshape to incompatible element count");
  }
  return Tensor(std::move(new_shape), data_);
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
  if (data.size() != r * c) {
    throw ShapeError("matrix data length does not match rows*cols");
  }
}

Matrix transpose(const Matrix& m) {
  Matrix t(m.cols, m.rows);
  for (std::size_t r = 0; r < m.rows; ++r) {
    for (std::size_t c = 0; c < m.cols; ++c) {
      t.data[c * m.rows + r] = m.data[r * m.cols + c];
    }
  }
  return t;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul inner extents differ: " + std::to_string(a.cols) + " vs " +
                     std::to_string(b.rows));
  }
  Matrix c(a.rows, b.cols);
  // ikj order: streams B and C rows, keeps the inner loop vectorizable.
  for (std::size_t i = 0; i < a.rows; ++i) {
    double* crow = &c.data[i * c.cols];
    for (std::size_t k = 0; k < a.cols; ++k) {
      const double aik = a.data[i * a.cols + k];
      if (aik == 0.0) continue;
      const double* brow = &b.data[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) {
        crow[j] += aik * brow[j];
      }
    }
  }
  return c;
}

std::vector<double> matvec(const Matrix& a, std::span<const double> x) {
  if (x.size() != a.cols) {
    throw ShapeError("matvec extent mismatch");
  }
  std::vector<double> y(a.rows, 0.0);
  for (std::size_t i = 0; i < a.rows; ++i) {
    const double* arow = &a.data[i * a.cols];
    double acc = 0.0;
    for (std::size_t j = 0; j < a.cols; ++j) acc += arow[j] * x[j];
    y[i] = acc;
  }
  return y;
}

namespace {

std::vector<std::int64_t> quantize_exact(const Matrix& m, double scale) {
  std::vector<std::int64_t> q(m.data.size());
  for (std::size_t i = 0; i < m.data.size(); ++i) {
    const double scaled = m.data[i] * scale;
    if (!(std::abs(scaled) < 9.007199254740992e15)) {  // 2^53
      throw OverflowError(std::abs(m.data[i]),
                          "quantized operand magnitude exceeds exact integer range");
    }
    q[i] = std::llround(scaled);
  }
  return q;
}

}  // namespace

Matrix matmul_quantized(const Matrix& a, const Matrix& b, double scale) {
  if (a.cols != b.rows) {
    throw ShapeError("matmul inner extents differ");
  }
  const std::vector<std::int64_t> aq = quantize_exact(a, scale);
  const std::vector<std::int64_t> bq = quantize_exact(b, scale);

  // Accumulation bound: inner * max|aq| * max|bq| must stay within int64
  // and, for the double result to round-trip, within 2^53.
  std::int64_t amax = 0, bmax = 0;
  for (std::int64_t v : aq) amax = std::max(amax, std::abs(v));
  for (std::int64_t v : bq) bmax = std::max(bmax, std::abs(v));
  const long double bound =
      static_cast<long double>(a.cols) * static_cast<long double>(amax) * static_cast<long double>(bmax);
  if (bound >= 9.007199254740992e15L) {
    throw OverflowError(static_cast<double>(amax) / scale,
                        "quantized product exceeds exactly-representable range");
  }

  Matrix c(a.rows, b.cols);
  const double inv_s2 = 1.0 / (scale * scale);
  std::vector<std::int64_t> acc(b.cols);
  for (std::size_t i = 0; i < a.rows; ++i) {
    std::fill(acc.begin(), acc.end(), 0);
    for (std::size_t k = 0; k < a.cols; ++k) {
      const std::int64_t aik = aq[i * a.cols + k];
      if (aik == 0) continue;
      const std::int64_t* brow = &bq[k * b.cols];
      for (std::size_t j = 0; j < b.cols; ++j) {
        acc[j] += aik * brow[j];
      }
    }
    double* crow = &c.data[i * c.cols];
    for (std::size_t j = 0; j < b.cols; ++j) {
      crow[j] = static_cast<double>(acc[j]) * inv_s2;
    }
  }
  return c;
}

}  // namespace veritrain
