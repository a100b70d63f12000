#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "etm/core/precision.hpp"

namespace ETM_NS {

using Shape = std::vector<std::int64_t>;

std::int64_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major float32 array. Value type; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, real fill = 0.0f);
  Tensor(Shape shape, std::vector<real> values);

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }
  bool empty() const noexcept { return shape_.empty() && data_.empty(); }

  std::span<real> data() noexcept { return data_; }
  std::span<const real> data() const noexcept { return data_; }
  real* ptr() noexcept { return data_.data(); }
  const real* ptr() const noexcept { return data_.data(); }

  real& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  real operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  /// Value of a single-element tensor.
  real item() const;

  Tensor reshaped(Shape shape) const;
  void fill(real value);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<real> data_;
};

bool same_shape(const Tensor& a, const Tensor& b);

/// True when shapes match and every element has the same bit pattern.
bool bitwise_equal(const Tensor& a, const Tensor& b);

real max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace etm
