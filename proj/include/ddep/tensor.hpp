#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace ddep {

/// Extents of a tensor, outermost first (batch, channel, height, width).
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int> dims);
  explicit Shape(std::vector<int> dims);

  int rank() const { return static_cast<int>(dims_.size()); }
  int operator[](int axis) const { return dims_.at(static_cast<std::size_t>(axis)); }
  std::size_t numel() const;
  const std::vector<int>& dims() const { return dims_; }
  std::string str() const;

  bool operator==(const Shape& other) const = default;

 private:
  std::vector<int> dims_;
};

/// Dense row-major float32 array. Value semantics; copies are deep.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int dim(int axis) const { return shape_[axis]; }
  int rank() const { return shape_.rank(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  std::span<float> data() { return data_; }
  std::span<const float> data() const { return data_; }
  float* ptr() { return data_.data(); }
  const float* ptr() const { return data_.data(); }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  /// 4-D accessor (n, c, h, w) for NCHW tensors.
  float& at(int n, int c, int h, int w);
  float at(int n, int c, int h, int w) const;
  /// Rank-3 (C x H x W) access.
  float& at(int c, int h, int w) { return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w]; }
  float at(int c, int h, int w) const { return data_[(static_cast<std::size_t>(c) * shape_[1] + h) * shape_[2] + w]; }

  Tensor reshaped(Shape shape) const;
  void fill(float value);
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<float> data_;
};

/// Throws ShapeMismatch naming both shapes when they differ.
void check_same_shape(const Tensor& a, const Tensor& b, const char* context);

}  // namespace ddep
