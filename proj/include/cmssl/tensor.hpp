#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace cmssl {

/// Thrown for malformed user input (bad shapes, out-of-range labels, empty sets).
class InputError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Thrown for inconsistent configuration (missing K, unknown keys, bad schedule).
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense NCHW tensor. Matrices are stored as (rows, cols, 1, 1).
template <class T>
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h = 1, int w = 1, T fill = T(0))
      : shape_{n, c, h, w}, data_(static_cast<std::size_t>(n) * c * h * w, fill) {}

  int n() const { return shape_[0]; }
  int c() const { return shape_[1]; }
  int h() const { return shape_[2]; }
  int w() const { return shape_[3]; }
  const std::array<int, 4>& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  /// Elements per batch entry.
  std::size_t stride() const { return static_cast<std::size_t>(shape_[1]) * shape_[2] * shape_[3]; }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }
  std::span<T> span() { return data_; }
  std::span<const T> span() const { return data_; }
  std::span<T> row(int i) { return {data_.data() + i * stride(), stride()}; }
  std::span<const T> row(int i) const { return {data_.data() + i * stride(), stride()}; }

  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }
  T& at(int i, int j) { return data_[i * stride() + j]; }
  const T& at(int i, int j) const { return data_[i * stride() + j]; }

  void resize(int n, int c, int h = 1, int w = 1) {
    shape_ = {n, c, h, w};
    data_.assign(static_cast<std::size_t>(n) * c * h * w, T(0));
  }
  void zero() { std::fill(data_.begin(), data_.end(), T(0)); }
  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  std::vector<T>& vec() { return data_; }
  const std::vector<T>& vec() const { return data_; }

 private:
  std::array<int, 4> shape_{0, 0, 0, 0};
  std::vector<T> data_;
};

std::string shape_string(const std::array<int, 4>& s);

}  // namespace cmssl
