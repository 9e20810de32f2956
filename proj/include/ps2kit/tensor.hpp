#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "ps2kit/errors.hpp"

namespace ps2kit {

/// Dense row-major tensor. Rank is dynamic; NCHW for image batches,
/// CHW for single images and maps.
template <typename T>
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), T(0));
  }
  Tensor(std::vector<int> shape, T fill) : shape_(std::move(shape)) {
    data_.assign(static_cast<std::size_t>(count(shape_)), fill);
  }

  static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
  static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }

  const std::vector<int>& shape() const { return shape_; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_[static_cast<std::size_t>(i)]; }
  std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const { return data_.empty(); }

  T* data() { return data_.data(); }
  const T* data() const { return data_.data(); }

  T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  // NCHW accessor
  T& at(int n, int c, int h, int w) {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  const T& at(int n, int c, int h, int w) const {
    return data_[static_cast<std::size_t>(((static_cast<std::int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
  }
  // CHW accessor
  T& at(int c, int h, int w) {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
  }
  const T& at(int c, int h, int w) const {
    return data_[static_cast<std::size_t>((static_cast<std::int64_t>(c) * shape_[1] + h) * shape_[2] + w)];
  }
  // matrix accessor
  T& at(int r, int c) { return data_[static_cast<std::size_t>(static_cast<std::int64_t>(r) * shape_[1] + c)]; }
  const T& at(int r, int c) const { return data_[static_cast<std::size_t>(static_cast<std::int64_t>(r) * shape_[1] + c)]; }

  void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

  Tensor reshaped(std::vector<int> shape) const {
    if (count(shape) != numel()) throw shape_error("reshape: element count mismatch");
    Tensor out = *this;
    out.shape_ = std::move(shape);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

  template <typename U>
  Tensor<U> cast() const {
    Tensor<U> out(shape_);
    for (std::int64_t i = 0; i < numel(); ++i) out[i] = static_cast<U>(data_[static_cast<std::size_t>(i)]);
    return out;
  }

  static std::int64_t count(const std::vector<int>& shape) {
    std::int64_t n = 1;
    for (int d : shape) {
      if (d < 0) throw shape_error("negative dimension");
      n *= d;
    }
    return n;
  }

 private:
  std::vector<int> shape_;
  std::vector<T> data_;
};

template <typename T>
std::string shape_str(const Tensor<T>& t) {
  std::string s = "(";
  for (int i = 0; i < t.ndim(); ++i) s += (i ? "," : "") + std::to_string(t.dim(i));
  return s + ")";
}

using TensorF = Tensor<float>;

}  // namespace ps2kit
