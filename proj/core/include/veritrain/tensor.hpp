#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "veritrain/errors.hpp"

namespace veritrain {

/// Dense n-dimensional array of doubles, row-major.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::size_t> shape);
  Tensor(std::vector<std::size_t> shape, std::vector<double> data);

  static Tensor zeros(std::vector<std::size_t> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<std::size_t> shape, double value);
  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const std::vector<std::size_t>& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t extent(std::size_t dim) const { return shape_.at(dim); }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::span<double> values() { return data_; }
  std::span<const double> values() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
  /// True when every value is finite (no NaN/Inf).
  bool all_finite() const;
  double max_abs() const;

  Tensor reshaped(std::vector<std::size_t> new_shape) const;

 private:
  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

std::size_t shape_numel(const std::vector<std::size_t>& shape);

/// Row-major 2-D matrix of doubles. Operand type for the MM kernels.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
  Matrix(std::size_t r, std::size_t c, std::vector<double> d);

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
  std::size_t numel() const { return data.size(); }

  bool operator==(const Matrix& other) const = default;
};

Matrix transpose(const Matrix& m);

/// C = A * B, plain double arithmetic.
Matrix matmul(const Matrix& a, const Matrix& b);

/// y = A * x.
std::vector<double> matvec(const Matrix& a, std::span<const double> x);

/// Fixed-point MM: operands are scaled by `scale`, rounded to integers,
/// multiplied exactly in 64-bit integer arithmetic, and the product is
/// returned as doubles carrying scale^2. Throws OverflowError when any
/// intermediate leaves the exactly-representable range.
Matrix matmul_quantized(const Matrix& a, const Matrix& b, double scale);

}  // namespace veritrain
