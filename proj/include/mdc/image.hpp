#pragma once

#include <filesystem>
#include <stdexcept>

#include "mdc/tensor.hpp"

namespace mdc {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// RGB image with intensities in [0,1], stored as a 1x3xHxW tensor.
struct ImageTensor {
  Tensor data;

  ImageTensor() = default;
  explicit ImageTensor(Tensor t);
  static ImageTensor zeros(int height, int width);

  int height() const { return data.h(); }
  int width() const { return data.w(); }
  /// Throws if the tensor is not 1x3xHxW or any value leaves [0,1].
  void validate() const;
};

/// Reflect-pads the spatial dims of a tensor up to the next multiple of
/// `multiple` (padding on the bottom/right edges only).
Tensor reflect_pad_to_multiple(const Tensor& t, int multiple);
/// Mirror index for arbitrary overhang (period 2n-2).
int reflect_index(int i, int n);

void clamp01(Tensor& t);

// 8-bit RGB file I/O. 255 maps to exactly 1.0.
ImageTensor read_png(const std::filesystem::path& path);
void write_png(const ImageTensor& image, const std::filesystem::path& path);
ImageTensor read_ppm(const std::filesystem::path& path);
void write_ppm(const ImageTensor& image, const std::filesystem::path& path);
/// Dispatches on extension (.png, .ppm).
ImageTensor read_image(const std::filesystem::path& path);
void write_image(const ImageTensor& image, const std::filesystem::path& path);

std::uint8_t to_u8(float v);

}  // namespace mdc
