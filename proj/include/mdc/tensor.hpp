#pragma once

#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdc {

/// Dense 4-D shape in NCHW order. Parameters and scalars use the same layout
/// (a scalar is 1x1x1x1, a conv kernel is Cout x Cin x K x K).
struct Shape {
  int n = 1;
  int c = 1;
  int h = 1;
  int w = 1;

  std::size_t numel() const {
    return static_cast<std::size_t>(n) * c * h * w;
  }
  bool operator==(const Shape&) const = default;
  std::string str() const;
};

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

void require_same_shape(const Shape& a, const Shape& b, const char* what);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f)
      : shape_(shape), data_(shape.numel(), fill) {}
  Tensor(Shape shape, std::vector<float> values);

  const Shape& shape() const { return shape_; }
  int n() const { return shape_.n; }
  int c() const { return shape_.c; }
  int h() const { return shape_.h; }
  int w() const { return shape_.w; }
  std::size_t numel() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }
  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }

  float& at(int n, int c, int h, int w) { return data_[index(n, c, h, w)]; }
  float at(int n, int c, int h, int w) const {
    return data_[index(n, c, h, w)];
  }
  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  std::size_t index(int n, int c, int h, int w) const {
    return ((static_cast<std::size_t>(n) * shape_.c + c) * shape_.h + h) *
               shape_.w +
           w;
  }

  /// Pointer to the start of plane (n, c).
  float* plane(int n, int c) { return data_.data() + index(n, c, 0, 0); }
  const float* plane(int n, int c) const {
    return data_.data() + index(n, c, 0, 0);
  }

  void fill(float v);
  void reshape(Shape shape);

  /// Copies batch item `n` into a new 1xCxHxW tensor.
  Tensor item(int n) const;
  /// Stacks equally-shaped tensors along N.
  static Tensor stack(std::span<const Tensor> items);
  /// Spatial window [top, top+height) x [left, left+width) of every plane.
  Tensor crop(int top, int left, int height, int width) const;

 private:
  Shape shape_{0, 0, 0, 0};
  std::vector<float> data_;
};

double max_abs_diff(const Tensor& a, const Tensor& b);
bool bit_identical(const Tensor& a, const Tensor& b);

}  // namespace mdc
