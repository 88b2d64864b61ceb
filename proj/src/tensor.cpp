#include "declip/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>

namespace declip {

std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::Dimension: return "dimension error";
    case ErrorKind::Parameter: return "parameter error";
    case ErrorKind::Degenerate: return "degenerate-input error";
    case ErrorKind::Distribution: return "distribution error";
    case ErrorKind::Evaluation: return "evaluation error";
    case ErrorKind::Mode: return "mode error";
    case ErrorKind::Range: return "range error";
    case ErrorKind::Config: return "config error";
    case ErrorKind::Io: return "io error";
    case ErrorKind::BadMagic: return "magic error";
    case ErrorKind::BadVersion: return "version error";
    case ErrorKind::OffsetOverflow: return "offset error";
    case ErrorKind::Truncated: return "truncation error";
  }
  return "error";
}

Error::Error(ErrorKind kind, const std::string& what)
    : std::runtime_error(std::string(to_string(kind)) + ": " + what), kind_(kind) {}

bool Error::is_io() const noexcept {
  switch (kind_) {
    case ErrorKind::Io:
    case ErrorKind::BadMagic:
    case ErrorKind::BadVersion:
    case ErrorKind::OffsetOverflow:
    case ErrorKind::Truncated:
      return true;
    default:
      return false;
  }
}

void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

namespace {

void validate_shape(const Shape& shape) {
  for (auto e : shape) {
    if (e == 0) fail(ErrorKind::Dimension, "zero extent in shape " + shape_str(shape));
  }
}

double round_to(DType dtype, double v) {
  switch (dtype) {
    case DType::F32: return static_cast<double>(static_cast<float>(v));
    case DType::I32: return static_cast<double>(static_cast<std::int32_t>(std::lround(v)));
    case DType::F64: return v;
  }
  return v;
}

}  // namespace

Tensor::Tensor(Shape shape, DType dtype) : shape_(std::move(shape)), dtype_(dtype) {
  validate_shape(shape_);
  data_.assign(shape_numel(shape_), 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> data, DType dtype)
    : shape_(std::move(shape)), data_(std::move(data)), dtype_(dtype) {
  validate_shape(shape_);
  if (data_.size() != shape_numel(shape_)) {
    fail(ErrorKind::Dimension, "data length " + std::to_string(data_.size()) +
                                   " does not match shape " + shape_str(shape_));
  }
  if (dtype_ != DType::F64) set_dtype(dtype_);
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t(std::move(shape));
  std::fill(t.data_.begin(), t.data_.end(), value);
  return t;
}

Tensor Tensor::eye(std::size_t n) {
  Tensor t({n, n});
  for (std::size_t i = 0; i < n; ++i) t.at(i, i) = 1.0;
  return t;
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows) {
  const std::size_t r = rows.size();
  const std::size_t c = r ? rows.begin()->size() : 0;
  std::vector<double> data;
  data.reserve(r * c);
  for (const auto& row : rows) {
    if (row.size() != c) fail(ErrorKind::Dimension, "ragged matrix literal");
    data.insert(data.end(), row.begin(), row.end());
  }
  return Tensor({r, c}, std::move(data));
}

Tensor Tensor::row(std::initializer_list<double> values) {
  return Tensor({1, values.size()}, std::vector<double>(values));
}

Tensor Tensor::randn(Shape shape, std::mt19937_64& rng, double stddev) {
  Tensor t(std::move(shape));
  std::normal_distribution<double> dist(0.0, stddev);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

Tensor Tensor::uniform(Shape shape, std::mt19937_64& rng, double lo, double hi) {
  Tensor t(std::move(shape));
  std::uniform_real_distribution<double> dist(lo, hi);
  for (auto& v : t.data_) v = dist(rng);
  return t;
}

void Tensor::set_dtype(DType dtype) {
  dtype_ = dtype;
  for (auto& v : data_) v = round_to(dtype, v);
}

std::size_t Tensor::rows() const {
  require_matrix(*this, "rows()");
  return shape_[0];
}

std::size_t Tensor::cols() const {
  require_matrix(*this, "cols()");
  return shape_[1];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != numel()) {
    fail(ErrorKind::Dimension, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  }
  return Tensor(std::move(shape), data_, dtype_);
}

Tensor Tensor::transposed() const {
  require_matrix(*this, "transpose");
  Tensor t({shape_[1], shape_[0]}, dtype_);
  for (std::size_t i = 0; i < shape_[0]; ++i)
    for (std::size_t j = 0; j < shape_[1]; ++j) t.at(j, i) = at(i, j);
  return t;
}

Tensor Tensor::row_slice(std::size_t begin, std::size_t end) const {
  require_matrix(*this, "row_slice");
  if (begin >= end || end > shape_[0]) fail(ErrorKind::Range, "row slice out of range");
  const auto c = shape_[1];
  std::vector<double> d(data_.begin() + static_cast<std::ptrdiff_t>(begin * c),
                        data_.begin() + static_cast<std::ptrdiff_t>(end * c));
  return Tensor({end - begin, c}, std::move(d), dtype_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::check_finite(const char* where) const {
  if (!all_finite()) fail(ErrorKind::Evaluation, std::string("non-finite value in ") + where);
}

bool Tensor::bitwise_equal(const Tensor& other) const {
  return shape_ == other.shape_ && dtype_ == other.dtype_ &&
         (data_.empty() ||
          std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(double)) == 0);
}

void require_matrix(const Tensor& t, const char* what) {
  if (t.rank() != 2) {
    fail(ErrorKind::Dimension, std::string(what) + " expects a matrix, got " + shape_str(t.shape()));
  }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const auto m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    fail(ErrorKind::Dimension, "matmul " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
  }
  Tensor out({m, n});
  for (std::size_t i = 0; i < m; ++i) {
    double* o = &out.at(i, 0);
    for (std::size_t p = 0; p < k; ++p) {
      const double av = a.at(i, p);
      const double* brow = &b.at(p, 0);
      for (std::size_t j = 0; j < n; ++j) o[j] += av * brow[j];
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    fail(ErrorKind::Dimension, "max_abs_diff " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace declip
