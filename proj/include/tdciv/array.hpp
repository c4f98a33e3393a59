#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "tdciv/errors.hpp"

namespace tdciv::ad {

// Dense row-major array of doubles. Rank is 1 (vector) or 2 (matrix);
// scalars are represented as rank-1 arrays of size 1.
class Array {
 public:
  Array() = default;

  static Array zeros(std::size_t n) { return Array(std::vector<std::size_t>{n}); }
  static Array zeros(std::size_t rows, std::size_t cols) {
    return Array(std::vector<std::size_t>{rows, cols});
  }
  static Array scalar(double v) {
    Array a = zeros(1);
    a.data_[0] = v;
    return a;
  }
  static Array from_vector(std::vector<double> v) {
    Array a;
    a.shape_ = {v.size()};
    a.data_ = std::move(v);
    return a;
  }
  static Array from_matrix(std::size_t rows, std::size_t cols, std::vector<double> v) {
    if (v.size() != rows * cols)
      throw ShapeError("from_matrix: data size " + std::to_string(v.size()) + " != " +
                       std::to_string(rows) + "x" + std::to_string(cols));
    Array a;
    a.shape_ = {rows, cols};
    a.data_ = std::move(v);
    return a;
  }

  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  std::size_t rows() const { return rank() == 2 ? shape_[0] : shape_.empty() ? 0 : 1; }
  std::size_t cols() const { return rank() == 2 ? shape_[1] : shape_.empty() ? 0 : shape_[0]; }
  const std::vector<std::size_t>& shape() const { return shape_; }

  bool same_shape(const Array& o) const { return shape_ == o.shape_; }
  bool is_scalar() const { return size() == 1; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
  double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  std::string shape_str() const {
    std::string s = "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(shape_[i]);
    }
    return s + "]";
  }

  bool operator==(const Array& o) const { return shape_ == o.shape_ && data_ == o.data_; }

 private:
  explicit Array(std::vector<std::size_t> shape) : shape_(std::move(shape)) {
    std::size_t n = shape_.empty() ? 0 : 1;
    for (std::size_t d : shape_) n *= d;
    data_.assign(n, 0.0);
  }

  std::vector<std::size_t> shape_;
  std::vector<double> data_;
};

}  // namespace tdciv::ad
