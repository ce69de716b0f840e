#include "mdc/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <vector>

namespace mdc {

ImageTensor::ImageTensor(Tensor t) : data(std::move(t)) {}

ImageTensor ImageTensor::zeros(int height, int width) {
  return ImageTensor(Tensor({1, 3, height, width}));
}

void ImageTensor::validate() const {
  const Shape& s = data.shape();
  if (s.n != 1 || s.c != 3 || s.h < 1 || s.w < 1) {
    throw ShapeError("ImageTensor: expected 1x3xHxW, got " + s.str());
  }
  for (float v : data.values()) {
    if (!(v >= 0.0f && v <= 1.0f)) {
      throw std::domain_error("ImageTensor: value outside [0,1]");
    }
  }
}

int reflect_index(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n - 2;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

Tensor reflect_pad_to_multiple(const Tensor& t, int multiple) {
  const Shape& s = t.shape();
  const int ph = (s.h + multiple - 1) / multiple * multiple;
  const int pw = (s.w + multiple - 1) / multiple * multiple;
  if (ph == s.h && pw == s.w) return t;
  Tensor out({s.n, s.c, ph, pw});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int y = 0; y < ph; ++y) {
        const int sy = reflect_index(y, s.h);
        for (int x = 0; x < pw; ++x) out.at(n, c, y, x) = t.at(n, c, sy, reflect_index(x, s.w));
      }
  return out;
}

void clamp01(Tensor& t) {
  for (float& v : t.values()) v = std::clamp(v, 0.0f, 1.0f);
}

std::uint8_t to_u8(float v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0f, 1.0f) * 255.0f));
}

namespace {

ImageTensor from_interleaved(const std::uint8_t* rgb, int width, int height) {
  ImageTensor img = ImageTensor::zeros(height, width);
  for (int y = 0; y < height; ++y)
    for (int x = 0; x < width; ++x)
      for (int c = 0; c < 3; ++c)
        img.data.at(0, c, y, x) = rgb[(static_cast<std::size_t>(y) * width + x) * 3 + c] / 255.0f;
  return img;
}

std::vector<std::uint8_t> to_interleaved(const ImageTensor& image) {
  const int h = image.height();
  const int w = image.width();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(h) * w * 3);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c)
        rgb[(static_cast<std::size_t>(y) * w + x) * 3 + c] = to_u8(image.data.at(0, c, y, x));
  return rgb;
}

}  // namespace

ImageTensor read_png(const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&image, path.c_str())) {
    throw IoError("cannot read PNG " + path.string() + ": " + image.message);
  }
  image.format = PNG_FORMAT_RGB;
  std::vector<std::uint8_t> buffer(PNG_IMAGE_SIZE(image));
  if (!png_image_finish_read(&image, nullptr, buffer.data(), 0, nullptr)) {
    png_image_free(&image);
    throw IoError("cannot decode PNG " + path.string() + ": " + image.message);
  }
  return from_interleaved(buffer.data(), static_cast<int>(image.width),
                          static_cast<int>(image.height));
}

void write_png(const ImageTensor& img, const std::filesystem::path& path) {
  png_image image{};
  image.version = PNG_IMAGE_VERSION;
  image.width = static_cast<png_uint_32>(img.width());
  image.height = static_cast<png_uint_32>(img.height());
  image.format = PNG_FORMAT_RGB;
  const auto rgb = to_interleaved(img);
  if (!png_image_write_to_file(&image, path.c_str(), 0, rgb.data(), 0, nullptr)) {
    throw IoError("cannot write PNG " + path.string() + ": " + image.message);
  }
}

ImageTensor read_ppm(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::string magic;
  in >> magic;
  auto next_int = [&in]() {
    int v = 0;
    while (in >> std::ws && in.peek() == '#') {
      std::string comment;
      std::getline(in, comment);
    }
    if (!(in >> v)) throw IoError("malformed PPM header");
    return v;
  };
  if (magic != "P6") throw IoError(path.string() + ": only binary P6 PPM is supported");
  const int w = next_int();
  const int h = next_int();
  const int maxval = next_int();
  if (maxval != 255 || w < 1 || h < 1) throw IoError(path.string() + ": unsupported PPM");
  in.get();
  std::vector<std::uint8_t> rgb(static_cast<std::size_t>(w) * h * 3);
  if (!in.read(reinterpret_cast<char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()))) {
    throw IoError(path.string() + ": truncated PPM");
  }
  return from_interleaved(rgb.data(), w, h);
}

void write_ppm(const ImageTensor& image, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << "P6\n" << image.width() << " " << image.height() << "\n255\n";
  const auto rgb = to_interleaved(image);
  out.write(reinterpret_cast<const char*>(rgb.data()), static_cast<std::streamsize>(rgb.size()));
}

ImageTensor read_image(const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".png" || ext == ".PNG") return read_png(path);
  if (ext == ".ppm" || ext == ".PPM") return read_ppm(path);
  throw IoError("unsupported image type: " + path.string());
}

void write_image(const ImageTensor& image, const std::filesystem::path& path) {
  const auto ext = path.extension().string();
  if (ext == ".ppm" || ext == ".PPM") {
    write_ppm(image, path);
  } else {
    write_png(image, path);
  }
}

}  // namespace mdc
