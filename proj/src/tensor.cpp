#include "mdc/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace mdc {

std::string Shape::str() const {
  return std::to_string(n) + "x" + std::to_string(c) + "x" + std::to_string(h) +
         "x" + std::to_string(w);
}

void require_same_shape(const Shape& a, const Shape& b, const char* what) {
  if (!(a == b)) {
    throw ShapeError(std::string(what) + ": shape mismatch " + a.str() +
                     " vs " + b.str());
  }
}

Tensor::Tensor(Shape shape, std::vector<float> values)
    : shape_(shape), data_(std::move(values)) {
  if (data_.size() != shape_.numel()) {
    throw ShapeError("Tensor: " + std::to_string(data_.size()) +
                     " values for shape " + shape_.str());
  }
}

void Tensor::fill(float v) { std::fill(data_.begin(), data_.end(), v); }

void Tensor::reshape(Shape shape) {
  if (shape.numel() != data_.size()) {
    throw ShapeError("reshape: " + shape_.str() + " -> " + shape.str());
  }
  shape_ = shape;
}

Tensor Tensor::item(int n) const {
  Tensor out({1, shape_.c, shape_.h, shape_.w});
  const std::size_t per = out.numel();
  std::memcpy(out.data(), data_.data() + per * n, per * sizeof(float));
  return out;
}

Tensor Tensor::stack(std::span<const Tensor> items) {
  if (items.empty()) return {};
  Shape s = items.front().shape();
  s.n = 0;
  for (const auto& t : items) s.n += t.n();
  Tensor out(s);
  float* dst = out.data();
  for (const auto& t : items) {
    Shape ts = t.shape();
    ts.n = 1;
    if (ts.c != s.c || ts.h != s.h || ts.w != s.w) {
      throw ShapeError("stack: mixed shapes");
    }
    std::memcpy(dst, t.data(), t.numel() * sizeof(float));
    dst += t.numel();
  }
  return out;
}

Tensor Tensor::crop(int top, int left, int height, int width) const {
  if (top < 0 || left < 0 || top + height > shape_.h ||
      left + width > shape_.w) {
    throw ShapeError("crop window outside " + shape_.str());
  }
  Tensor out({shape_.n, shape_.c, height, width});
  for (int n = 0; n < shape_.n; ++n) {
    for (int c = 0; c < shape_.c; ++c) {
      for (int y = 0; y < height; ++y) {
        const float* src = &data_[index(n, c, top + y, left)];
        std::copy(src, src + width, &out.at(n, c, y, 0));
      }
    }
  }
  return out;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  require_same_shape(a.shape(), b.shape(), "max_abs_diff");
  double m = 0.0;
  for (std::size_t i = 0; i < a.numel(); ++i) {
    m = std::max(m, std::abs(static_cast<double>(a[i]) - b[i]));
  }
  return m;
}

bool bit_identical(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() &&
         std::memcmp(a.data(), b.data(), a.numel() * sizeof(float)) == 0;
}

}  // namespace mdc
