#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "etm/core/tensor.hpp"

namespace ETM_NS {

/// Dense row-major int32 array for label and prediction maps.
class IntTensor {
 public:
  IntTensor() = default;
  explicit IntTensor(Shape shape, std::int32_t fill = 0)
      : shape_(std::move(shape)), data_(static_cast<std::size_t>(shape_numel(shape_)), fill) {}
  IntTensor(Shape shape, std::vector<std::int32_t> values);

  const Shape& shape() const noexcept { return shape_; }
  std::int64_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::int64_t numel() const noexcept { return static_cast<std::int64_t>(data_.size()); }

  std::span<std::int32_t> data() noexcept { return data_; }
  std::span<const std::int32_t> data() const noexcept { return data_; }
  std::int32_t& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
  std::int32_t operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

  bool operator==(const IntTensor&) const = default;

 private:
  Shape shape_;
  std::vector<std::int32_t> data_;
};

}  // namespace etm
