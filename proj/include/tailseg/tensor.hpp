#pragma once

#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace tailseg {

struct Shape {
  std::size_t rows = 0;
  std::size_t cols = 0;

  std::size_t size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;
  bool is_scalar() const { return rows == 1 && cols == 1; }

  std::string str() const {
    return "(" + std::to_string(rows) + "," + std::to_string(cols) + ")";
  }
};

/// Dense row-major matrix of 64-bit reals. The only tensor rank the lab
/// needs; vectors are 1xN or Nx1, scalars are 1x1.
class Tensor {
 public:
  Tensor() = default;

  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : shape_{rows, cols}, v_(rows * cols, fill) {}

  explicit Tensor(Shape s, double fill = 0.0) : Tensor(s.rows, s.cols, fill) {}

  Tensor(std::initializer_list<std::initializer_list<double>> rows) {
    shape_.rows = rows.size();
    shape_.cols = rows.size() ? rows.begin()->size() : 0;
    v_.reserve(shape_.size());
    for (const auto& r : rows) {
      if (r.size() != shape_.cols)
        throw std::invalid_argument("Tensor: ragged initializer");
      v_.insert(v_.end(), r.begin(), r.end());
    }
  }

  static Tensor scalar(double x) {
    Tensor t(1, 1);
    t.v_[0] = x;
    return t;
  }

  static Tensor from_values(std::size_t rows, std::size_t cols,
                            std::vector<double> values) {
    if (values.size() != rows * cols)
      throw std::invalid_argument("Tensor: value count does not match shape");
    Tensor t;
    t.shape_ = {rows, cols};
    t.v_ = std::move(values);
    return t;
  }

  Shape shape() const { return shape_; }
  std::size_t rows() const { return shape_.rows; }
  std::size_t cols() const { return shape_.cols; }
  std::size_t size() const { return v_.size(); }

  double operator()(std::size_t r, std::size_t c) const {
    return v_[r * shape_.cols + c];
  }
  double& operator()(std::size_t r, std::size_t c) {
    return v_[r * shape_.cols + c];
  }

  double at(std::size_t r, std::size_t c) const {
    if (r >= shape_.rows || c >= shape_.cols)
      throw std::out_of_range("Tensor::at: index out of range");
    return (*this)(r, c);
  }

  double item() const {
    if (!shape_.is_scalar())
      throw std::logic_error("Tensor::item: tensor is " + shape_.str() +
                             ", not scalar");
    return v_[0];
  }

  std::span<const double> values() const { return v_; }
  std::span<double> values() { return v_; }
  const double* data() const { return v_.data(); }
  double* data() { return v_.data(); }

  void fill(double x) { std::fill(v_.begin(), v_.end(), x); }

  bool all_finite() const {
    for (double x : v_)
      if (!std::isfinite(x)) return false;
    return true;
  }

  double frobenius_norm() const {
    double s = 0.0;
    for (double x : v_) s += x * x;
    return std::sqrt(s);
  }

  bool operator==(const Tensor&) const = default;

 private:
  Shape shape_;
  std::vector<double> v_;
};

}  // namespace tailseg
