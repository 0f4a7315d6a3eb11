#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "mexit/errors.hpp"

namespace mexit {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

inline Index shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

/// Dense row-major n-dimensional array. Image batches are NCHW.
template <typename Scalar_>
class Tensor {
 public:
  using Scalar = Scalar_;

  Tensor() = default;

  explicit Tensor(Shape shape) : shape_(std::move(shape)) {
    check_extents();
    data_ = Vector<Scalar>::Zero(shape_size(shape_));
  }

  Tensor(Shape shape, Vector<Scalar> data) : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (shape_size(shape_) != data_.size())
      throw ConfigError("tensor data length " + std::to_string(data_.size()) +
                        " does not match shape " + shape_string(shape_));
  }

  Tensor(Shape shape, std::initializer_list<Scalar> values)
      : Tensor(std::move(shape), Vector<Scalar>(Eigen::Map<const Vector<Scalar>>(
                                     values.begin(), static_cast<Index>(values.size())))) {}

  const Shape& shape() const { return shape_; }
  Index rank() const { return static_cast<Index>(shape_.size()); }
  Index dim(Index i) const { return shape_[static_cast<std::size_t>(i)]; }
  Index size() const { return data_.size(); }
  bool empty() const { return shape_.empty(); }

  Vector<Scalar>& vec() { return data_; }
  const Vector<Scalar>& vec() const { return data_; }
  Scalar* data() { return data_.data(); }
  const Scalar* data() const { return data_.data(); }

  Scalar& operator[](Index i) { return data_[i]; }
  Scalar operator[](Index i) const { return data_[i]; }

  /// Number of elements per leading-dimension slice.
  Index slice_size() const { return shape_.empty() ? 0 : size() / shape_[0]; }

  Eigen::Map<Vector<Scalar>> slice(Index n) {
    return {data_.data() + n * slice_size(), slice_size()};
  }
  Eigen::Map<const Vector<Scalar>> slice(Index n) const {
    return {data_.data() + n * slice_size(), slice_size()};
  }

  /// Copy of rows [first, first+count) along the leading dimension.
  Tensor rows(Index first, Index count) const {
    Shape s = shape_;
    s[0] = count;
    return Tensor(std::move(s), data_.segment(first * slice_size(), count * slice_size()));
  }

  Tensor gather(const std::vector<Index>& indices) const {
    Shape s = shape_;
    s[0] = static_cast<Index>(indices.size());
    Tensor out(std::move(s));
    const Index stride = slice_size();
    for (std::size_t k = 0; k < indices.size(); ++k)
      out.vec().segment(static_cast<Index>(k) * stride, stride) = slice(indices[k]);
    return out;
  }

  Tensor reshaped(Shape shape) const { return Tensor(std::move(shape), data_); }

  template <typename Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape_, data_.template cast<Other>());
  }

  bool all_finite() const { return data_.allFinite(); }

  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_extents() const {
    for (Index e : shape_)
      if (e <= 0) throw ConfigError("tensor extents must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  Vector<Scalar> data_;
};

using Tensorf = Tensor<float>;
using Tensord = Tensor<double>;

}  // namespace mexit
