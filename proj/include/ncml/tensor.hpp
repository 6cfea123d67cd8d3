#pragma once

#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ncml/errors.hpp"

namespace ncml::ad {

// Dense row-major tensor of 64-bit reals. Rank 1 and 2 cover everything the
// density model needs; the invariant product(shape) == data.size() is
// enforced on construction.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> shape)
      : shape_(std::move(shape)), data_(checked_size(shape_), 0.0) {}

  Tensor(std::vector<int> shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != checked_size(shape_)) {
      throw NumericError("tensor: shape/data size mismatch (shape " +
                         shape_string(shape_) + ", data " +
                         std::to_string(data_.size()) + ")");
    }
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    int n = static_cast<int>(v.size());
    return Tensor({n}, std::move(v));
  }
  static Tensor zeros_like(const Tensor& other) { return Tensor(other.shape_); }
  static Tensor full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
  }

  const std::vector<int>& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& values() { return data_; }
  const std::vector<double>& values() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<size_t>(i)]; }

  // rank-2 accessors
  int rows() const { return shape_.at(0); }
  int cols() const { return shape_.at(1); }
  double& at(int r, int c) { return data_[static_cast<size_t>(r) * cols() + c]; }
  double at(int r, int c) const { return data_[static_cast<size_t>(r) * cols() + c]; }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  static std::string shape_string(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
      if (i) out += "x";
      out += std::to_string(s[i]);
    }
    return out + "]";
  }
  std::string shape_string() const { return shape_string(shape_); }

 private:
  static std::int64_t checked_size(const std::vector<int>& shape) {
    if (shape.empty()) throw NumericError("tensor: empty shape");
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 1) throw NumericError("tensor: shape entry < 1 in " + shape_string(shape));
      n *= d;
    }
    return n;
  }

  std::vector<int> shape_;
  std::vector<double> data_;
};

}  // namespace ncml::ad
