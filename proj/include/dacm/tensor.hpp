#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "dacm/errors.hpp"

namespace dacm {

// Dense row-major tensor of doubles. Rank up to 6. All math in this
// project runs in double precision.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(std::vector<int> dims) : dims_(std::move(dims)) {
    data_.assign(static_cast<std::size_t>(numel_of(dims_)), 0.0);
  }

  Tensor(std::vector<int> dims, std::vector<double> data)
      : dims_(std::move(dims)), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != numel_of(dims_))
      throw DimensionError("tensor data size does not match dims");
  }

  static Tensor zeros(std::vector<int> dims) { return Tensor(std::move(dims)); }

  static Tensor full(std::vector<int> dims, double value) {
    Tensor t(std::move(dims));
    for (double& v : t.data_) v = value;
    return t;
  }

  static Tensor scalar(double value) { return Tensor({1}, {value}); }

  const std::vector<int>& dims() const { return dims_; }
  int rank() const { return static_cast<int>(dims_.size()); }
  int dim(int i) const { return dims_[static_cast<std::size_t>(i)]; }

  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

  double* data() { return data_.data(); }
  const double* data() const { return data_.data(); }
  std::vector<double>& vec() { return data_; }
  const std::vector<double>& vec() const { return data_; }

  double& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  double operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  double& at(int a) { return data_[static_cast<std::size_t>(a)]; }
  double at(int a) const { return data_[static_cast<std::size_t>(a)]; }
  double& at(int a, int b) { return data_[idx2(a, b)]; }
  double at(int a, int b) const { return data_[idx2(a, b)]; }
  double& at(int a, int b, int c) { return data_[idx3(a, b, c)]; }
  double at(int a, int b, int c) const { return data_[idx3(a, b, c)]; }
  double& at(int a, int b, int c, int d) { return data_[idx4(a, b, c, d)]; }
  double at(int a, int b, int c, int d) const { return data_[idx4(a, b, c, d)]; }

  bool same_dims(const Tensor& o) const { return dims_ == o.dims_; }

  static std::int64_t numel_of(const std::vector<int>& dims) {
    std::int64_t n = 1;
    for (int d : dims) {
      if (d < 0) throw DimensionError("negative dim");
      n *= d;
    }
    return n;
  }

  std::string dims_str() const {
    std::string s = "(";
    for (std::size_t i = 0; i < dims_.size(); ++i) {
      if (i) s += ",";
      s += std::to_string(dims_[i]);
    }
    return s + ")";
  }

 private:
  std::size_t idx2(int a, int b) const {
    return static_cast<std::size_t>(a) * dims_[1] + b;
  }
  std::size_t idx3(int a, int b, int c) const {
    return (static_cast<std::size_t>(a) * dims_[1] + b) * dims_[2] + c;
  }
  std::size_t idx4(int a, int b, int c, int d) const {
    return ((static_cast<std::size_t>(a) * dims_[1] + b) * dims_[2] + c) * dims_[3] + d;
  }

  std::vector<int> dims_;
  std::vector<double> data_;
};

}  // namespace dacm
