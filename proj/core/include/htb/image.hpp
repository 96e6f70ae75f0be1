#pragma once

#include <cstddef>
#include <vector>

namespace htb {

// H x W x C image, row-major HWC, intensities on the 8-bit scale [0, 255].
// Values are real so sub-integer poison perturbations survive.
struct ImageTensor {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<float> pixels;
  int label = -1;  // category id, -1 when unlabeled

  ImageTensor() = default;
  ImageTensor(int h, int w, int c, float fill = 0.0f, int lbl = -1)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * w * c, fill), label(lbl) {}

  std::size_t size() const noexcept { return pixels.size(); }
  bool empty() const noexcept { return pixels.empty(); }

  std::size_t index(int y, int x, int c) const noexcept {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  float& at(int y, int x, int c) noexcept { return pixels[index(y, x, c)]; }
  float at(int y, int x, int c) const noexcept { return pixels[index(y, x, c)]; }

  bool same_shape(const ImageTensor& o) const noexcept {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool in_range() const noexcept {
    for (float v : pixels)
      if (!(v >= 0.0f && v <= 255.0f)) return false;
    return true;
  }

  friend bool operator==(const ImageTensor&, const ImageTensor&) = default;
};

struct ImageDims {
  int height = 0;
  int width = 0;
  int channels = 0;
};

inline ImageDims dims_of(const ImageTensor& img) {
  return {img.height, img.width, img.channels};
}

}  // namespace htb
