#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "amgru/error.hpp"
#include "amgru/memory.hpp"

namespace amgru {

/// Dense row-major matrix of doubles.
class Tensor {
 public:
  using Storage = std::vector<double, memory::TrackingAllocator<double>>;

  Tensor() = default;
  Tensor(std::size_t rows, std::size_t cols, double fill = 0.0)
      : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Tensor(std::size_t rows, std::size_t cols, std::initializer_list<double> values)
      : rows_(rows), cols_(cols), data_(values) {
    require(data_.size() == rows * cols, ErrorKind::ShapeMismatch,
            "initializer has " + std::to_string(data_.size()) + " values for a " +
                std::to_string(rows) + "x" + std::to_string(cols) + " tensor");
  }

  static Tensor identity(std::size_t n) {
    Tensor t(n, n);
    for (std::size_t i = 0; i < n; ++i) t(i, i) = 1.0;
    return t;
  }

  std::size_t rows() const noexcept { return rows_; }
  std::size_t cols() const noexcept { return cols_; }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  std::span<double> values() noexcept { return data_; }
  std::span<const double> values() const noexcept { return data_; }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const double> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

  void fill(double v) { std::fill(data_.begin(), data_.end(), v); }

  bool same_shape(const Tensor& o) const noexcept { return rows_ == o.rows_ && cols_ == o.cols_; }

  bool all_finite() const noexcept {
    for (double v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  std::string shape_string() const {
    return std::to_string(rows_) + "x" + std::to_string(cols_);
  }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.rows_ == b.rows_ && a.cols_ == b.cols_ && a.data_ == b.data_;
  }

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  Storage data_;
};

inline void require_shape(const Tensor& a, std::size_t rows, std::size_t cols,
                          const char* what) {
  if (a.rows() != rows || a.cols() != cols)
    throw Error(ErrorKind::ShapeMismatch, std::string(what) + ": expected " +
                                              std::to_string(rows) + "x" +
                                              std::to_string(cols) + ", got " +
                                              a.shape_string());
}

inline double max_abs_diff(const Tensor& a, const Tensor& b) {
  require(a.same_shape(b), ErrorKind::ShapeMismatch, "max_abs_diff: shapes differ");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace amgru
