#include "dpec/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace dpec {

const char* to_string(ErrorCode code) {
  switch (code) {
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DivisionDomain: return "DivisionDomain";
    case ErrorCode::AxisOutOfRange: return "AxisOutOfRange";
    case ErrorCode::NonScalarRoot: return "NonScalarRoot";
    case ErrorCode::NonFiniteInput: return "NonFiniteInput";
    case ErrorCode::MissingDenoiser: return "MissingDenoiser";
    case ErrorCode::MissingStage1Checkpoint: return "MissingStage1Checkpoint";
    case ErrorCode::NonFiniteLoss: return "NonFiniteLoss";
    case ErrorCode::IoError: return "IoError";
    case ErrorCode::UnsupportedFormat: return "UnsupportedFormat";
    case ErrorCode::PairingError: return "PairingError";
    case ErrorCode::StageUnavailable: return "StageUnavailable";
    case ErrorCode::ConfigError: return "ConfigError";
    case ErrorCode::CheckpointError: return "CheckpointError";
  }
  return "Unknown";
}

Index numel(const Shape& shape) {
  Index n = 1;
  for (Index d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace {

void check_shape(const Shape& shape) {
  for (Index d : shape) {
    if (d < 1) throw Error(ErrorCode::ShapeMismatch, "non-positive dimension in " + shape_str(shape));
  }
}

}  // namespace

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)) {
  check_shape(shape_);
  data_ = Array::Constant(numel(shape_), fill);
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, Array data) : shape_(std::move(shape)), data_(std::move(data)) {
  check_shape(shape_);
  if (numel(shape_) != data_.size()) {
    throw Error(ErrorCode::ShapeMismatch,
                "buffer of " + std::to_string(data_.size()) + " for shape " + shape_str(shape_));
  }
}

template <typename Scalar>
Tensor<Scalar>::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : shape_(std::move(shape)) {
  check_shape(shape_);
  if (numel(shape_) != static_cast<Index>(values.size())) {
    throw Error(ErrorCode::ShapeMismatch, "initializer size does not match " + shape_str(shape_));
  }
  data_.resize(static_cast<Index>(values.size()));
  std::copy(values.begin(), values.end(), data_.data());
}

template <typename Scalar>
Index Tensor<Scalar>::dim(Index axis) const {
  if (axis < 0) axis += rank();
  if (axis < 0 || axis >= rank()) {
    throw Error(ErrorCode::AxisOutOfRange, "axis " + std::to_string(axis) + " of " + shape_str(shape_));
  }
  return shape_[static_cast<std::size_t>(axis)];
}

template <typename Scalar>
Index Tensor<Scalar>::offset(std::span<const Index> index) const {
  if (static_cast<Index>(index.size()) != rank()) {
    throw Error(ErrorCode::ShapeMismatch, "index rank does not match " + shape_str(shape_));
  }
  Index off = 0;
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] < 0 || index[i] >= shape_[i]) {
      throw Error(ErrorCode::AxisOutOfRange, "index out of range for " + shape_str(shape_));
    }
    off = off * shape_[i] + index[i];
  }
  return off;
}

template <typename Scalar>
std::vector<Index> Tensor<Scalar>::unravel(Index offset) const {
  std::vector<Index> index(shape_.size());
  for (std::size_t i = shape_.size(); i-- > 0;) {
    index[i] = offset % shape_[i];
    offset /= shape_[i];
  }
  return index;
}

template <typename Scalar>
Scalar Tensor<Scalar>::item() const {
  if (size() != 1) throw Error(ErrorCode::ShapeMismatch, "item() on " + shape_str(shape_));
  return data_[0];
}

template <typename Scalar>
Tensor<Scalar> Tensor<Scalar>::reshaped(Shape shape) const {
  return Tensor(std::move(shape), data_);
}

template <typename Scalar>
double max_rel_diff(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (a.shape() != b.shape()) {
    throw Error(ErrorCode::ShapeMismatch, shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  double worst = 0.0;
  for (Index i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    const double denom = std::max({1.0, std::abs(x), std::abs(y)});
    worst = std::max(worst, std::abs(x - y) / denom);
  }
  return worst;
}

template class Tensor<float>;
template class Tensor<double>;
template double max_rel_diff(const Tensor<float>&, const Tensor<float>&);
template double max_rel_diff(const Tensor<double>&, const Tensor<double>&);

}  // namespace dpec
