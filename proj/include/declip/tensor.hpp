#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "declip/error.hpp"

namespace declip {

enum class DType : std::uint8_t { F32 = 0, F64 = 1, I32 = 2 };

using Shape = std::vector<std::size_t>;

/// Token grid of a dense feature map.
struct Grid {
  std::size_t h = 0;
  std::size_t w = 0;

  std::size_t size() const noexcept { return h * w; }
  bool operator==(const Grid&) const = default;
};

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array. Values are held in double precision regardless of
/// dtype; the dtype records the on-disk precision (f32 values are kept
/// exactly representable as floats, i32 values as integers).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, DType dtype = DType::F64);
  Tensor(Shape shape, std::vector<double> data, DType dtype = DType::F64);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
  static Tensor full(Shape shape, double value);
  static Tensor eye(std::size_t n);
  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);
  static Tensor row(std::initializer_list<double> values);
  static Tensor randn(Shape shape, std::mt19937_64& rng, double stddev = 1.0);
  static Tensor uniform(Shape shape, std::mt19937_64& rng, double lo, double hi);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t numel() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  DType dtype() const noexcept { return dtype_; }

  /// Rounds values to the dtype's precision.
  void set_dtype(DType dtype);

  std::size_t rows() const;
  std::size_t cols() const;

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  const double& at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::vector<double>& storage() noexcept { return data_; }
  const std::vector<double>& storage() const noexcept { return data_; }

  /// Same data, new shape with identical element count.
  Tensor reshaped(Shape shape) const;
  Tensor transposed() const;
  Tensor row_slice(std::size_t begin, std::size_t end) const;

  bool all_finite() const;
  /// Throws ErrorKind::Evaluation naming `where` if any value is NaN/Inf.
  void check_finite(const char* where) const;

  /// Exact equality of shape, dtype and bit patterns.
  bool bitwise_equal(const Tensor& other) const;

 private:
  Shape shape_;
  std::vector<double> data_;
  DType dtype_ = DType::F64;
};

void require_matrix(const Tensor& t, const char* what);

/// Plain (non-differentiable) 64-bit matrix product.
Tensor matmul(const Tensor& a, const Tensor& b);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace declip
