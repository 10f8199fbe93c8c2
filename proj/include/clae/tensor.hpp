#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "clae/errors.hpp"

namespace clae {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

inline bool all_finite(std::span<const double> values) {
  for (double v : values)
    if (!std::isfinite(v)) return false;
  return true;
}

// Dense row-major array of doubles with an optional gradient slot.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, double fill = 0.0)
      : shape_(std::move(shape)) {
    check_shape();
    data_.assign(shape_size(shape_), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_shape();
    require(data_.size() == shape_size(shape_),
            "tensor data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_string(shape_));
  }

  static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows) {
    require(rows.size() > 0, "matrix literal needs at least one row");
    const std::size_t cols = rows.begin()->size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& row : rows) {
      require(row.size() == cols, "ragged matrix literal");
      data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
  }

  static Tensor vector(std::initializer_list<double> values) {
    return Tensor({values.size()}, std::vector<double>(values));
  }

  static Tensor scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }
  std::size_t dim(std::size_t axis) const {
    require(axis < shape_.size(), "axis out of range");
    return shape_[axis];
  }
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const {
    require(rank() == 2, "cols() requires a rank-2 tensor, got " + shape_string(shape_));
    return shape_[1];
  }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  std::vector<double>& values() noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }
  double& at(std::size_t r, std::size_t c) { return data_[r * shape_[1] + c]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * shape_[1] + c]; }

  std::span<double> row(std::size_t r) {
    const std::size_t c = data_.size() / shape_[0];
    return std::span<double>(data_).subspan(r * c, c);
  }
  std::span<const double> row(std::size_t r) const {
    const std::size_t c = data_.size() / shape_[0];
    return std::span<const double>(data_).subspan(r * c, c);
  }

  double item() const {
    require(data_.size() == 1, "item() on tensor of shape " + shape_string(shape_));
    return data_[0];
  }

  bool finite() const { return all_finite(data_); }

  bool has_grad() const noexcept { return grad_.has_value(); }
  const std::vector<double>& grad() const {
    require(grad_.has_value(), "tensor has no gradient");
    return *grad_;
  }
  void set_grad(std::vector<double> g) {
    require(g.size() == data_.size(), "gradient length mismatch");
    grad_ = std::move(g);
  }
  void clear_grad() noexcept { grad_.reset(); }

  Tensor reshaped(Shape shape) const {
    Tensor out(std::move(shape), data_);
    return out;
  }

  // Value equality; gradients are ignored.
  friend bool operator==(const Tensor& a, const Tensor& b) {
    return a.shape_ == b.shape_ && a.data_ == b.data_;
  }

 private:
  void check_shape() const {
    require(!shape_.empty(), "tensor shape must have at least one dimension");
    for (std::size_t d : shape_)
      require(d > 0, "tensor dimensions must be positive, got " + shape_string(shape_));
  }

  Shape shape_;
  std::vector<double> data_;
  std::optional<std::vector<double>> grad_;
};

}  // namespace clae
