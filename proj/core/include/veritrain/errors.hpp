#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace veritrain {

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor/layer extent mismatch; carries the index of the offending layer
// when known (npos otherwise).
class ShapeError : public Error {
 public:
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);

  ShapeError(std::size_t layer_index, const std::string& msg)
      : Error(msg), layer_index_(layer_index) {}
  explicit ShapeError(const std::string& msg) : ShapeError(npos, msg) {}

  std::size_t layer_index() const { return layer_index_; }

 private:
  std::size_t layer_index_;
};

// A value does not fit the quantization range; carries the largest
// violating magnitude.
class OverflowError : public Error {
 public:
  OverflowError(double max_magnitude, const std::string& msg)
      : Error(msg), max_magnitude_(max_magnitude) {}

  double max_magnitude() const { return max_magnitude_; }

 private:
  double max_magnitude_;
};

// Memory budget below the smallest feasible block; carries that minimum.
class BudgetError : public Error {
 public:
  BudgetError(std::size_t min_feasible_bytes, const std::string& msg)
      : Error(msg), min_feasible_bytes_(min_feasible_bytes) {}

  std::size_t min_feasible_bytes() const { return min_feasible_bytes_; }

 private:
  std::size_t min_feasible_bytes_;
};

// Parameter outside its mathematical domain (probabilities, field sizes...).
class DomainError : public Error {
 public:
  explicit DomainError(const std::string& msg) : Error(msg) {}
};

// Malformed serialized input (truncated record, bad header, bad encoding).
class FormatError : public Error {
 public:
  explicit FormatError(const std::string& msg) : Error(msg) {}
};

}  // namespace veritrain
