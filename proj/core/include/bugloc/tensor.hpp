#pragma once

#include <cstdint>
#include <initializer_list>
#include <vector>

namespace bugloc {

/// Dense row-major tensor of doubles. Everything trainable in this library
/// (encoders, heads, optimizer state) lives in these; double precision keeps
/// the finite-difference gradient checks honest.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<std::int64_t> shape);
  Tensor(std::vector<std::int64_t> shape, double fill);
  Tensor(std::vector<std::int64_t> shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({1}, {v}); }

  const std::vector<std::int64_t>& shape() const { return shape_; }
  std::int64_t dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// 2-D convenience accessor.
  double& at(std::int64_t r, std::int64_t c) {
    return data_[static_cast<std::size_t>(r * shape_.back() + c)];
  }
  double at(std::int64_t r, std::int64_t c) const {
    return data_[static_cast<std::size_t>(r * shape_.back() + c)];
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  /// Same data, new shape (element count must match).
  Tensor reshaped(std::vector<std::int64_t> shape) const;

  /// All values finite (no NaN/inf).
  bool all_finite() const;

  const std::vector<double>& vec() const { return data_; }

 private:
  std::vector<std::int64_t> shape_;
  std::vector<double> data_;
};

std::int64_t shape_numel(const std::vector<std::int64_t>& shape);

/// C = A x B on the trailing two axes. Leading axes must match, or one
/// operand may be rank-2 and is then shared across the other's batch.
/// trans_a / trans_b transpose the trailing two axes of the inputs.
Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false,
              bool trans_b = false);

/// C += A x B with the same contract as matmul.
void matmul_acc(Tensor& c, const Tensor& a, const Tensor& b,
                bool trans_a = false, bool trans_b = false);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
void add_inplace(Tensor& a, const Tensor& b);
double sum(const Tensor& a);
double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace bugloc
