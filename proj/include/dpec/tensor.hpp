#pragma once

#include <Eigen/Core>

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dpec/error.hpp"

namespace dpec {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

Index numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major n-dimensional array. Images are NCHW, token maps NHWC.
///
/// A scalar is represented with shape {1}. Storage is an Eigen column array so
/// element-wise math can be written as Eigen expressions over `array()`.
template <typename Scalar>
class Tensor {
 public:
  using Array = Eigen::Array<Scalar, Eigen::Dynamic, 1>;

  Tensor() : shape_{1}, data_(Array::Zero(1)) {}
  explicit Tensor(Shape shape) : Tensor(std::move(shape), Scalar(0)) {}
  Tensor(Shape shape, Scalar fill);
  Tensor(Shape shape, Array data);
  Tensor(Shape shape, std::initializer_list<Scalar> values);

  static Tensor scalar(Scalar v) { return Tensor(Shape{1}, v); }

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index axis) const;
  Index size() const { return data_.size(); }

  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }
  std::span<Scalar> values() { return {data_.data(), static_cast<std::size_t>(data_.size())}; }
  std::span<const Scalar> values() const {
    return {data_.data(), static_cast<std::size_t>(data_.size())};
  }
  Array& array() { return data_; }
  const Array& array() const { return data_; }

  Index offset(std::span<const Index> index) const;
  std::vector<Index> unravel(Index offset) const;

  Scalar& at(std::initializer_list<Index> index) {
    return data_[offset({index.begin(), index.size()})];
  }
  Scalar at(std::initializer_list<Index> index) const {
    return data_[offset({index.begin(), index.size()})];
  }
  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  Scalar item() const;

  Tensor reshaped(Shape shape) const;

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>().eval());
  }

  bool operator==(const Tensor& other) const {
    return shape_ == other.shape_ && (data_ == other.data_).all();
  }

 private:
  Shape shape_;
  Array data_;
};

template <typename Scalar>
Tensor<Scalar> zeros_like(const Tensor<Scalar>& t) {
  return Tensor<Scalar>(t.shape());
}

/// Largest |a-b| / max(1, |a|, |b|) over all elements.
template <typename Scalar>
double max_rel_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b);

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace dpec
