#pragma once

// Planar float images with values in [0,1], plus conversions to tensors.

#include <algorithm>
#include <cstdint>
#include <string>
#include <vector>

#include "dsat/tensor.hpp"

namespace dsat {

struct ImageBuffer {
  int height = 0, width = 0, channels = 0;
  std::vector<float> pixels;  // [channels][height][width]

  ImageBuffer() = default;
  ImageBuffer(int h, int w, int c, float fill = 0.0f)
      : height(h), width(w), channels(c),
        pixels(static_cast<std::size_t>(h) * static_cast<std::size_t>(w) * static_cast<std::size_t>(c), fill) {
    if (h <= 0 || w <= 0 || (c != 1 && c != 3))
      throw DimensionError("ImageBuffer: invalid geometry " + std::to_string(h) + "x" +
                           std::to_string(w) + "x" + std::to_string(c));
  }

  std::size_t index(int c, int y, int x) const {
    return (static_cast<std::size_t>(c) * height + y) * width + x;
  }
  float& at(int c, int y, int x) { return pixels[index(c, y, x)]; }
  float at(int c, int y, int x) const { return pixels[index(c, y, x)]; }

  bool operator==(const ImageBuffer&) const = default;
};

template <class T>
Tensor<T> to_tensor(const ImageBuffer& img) {
  return Tensor<T>({img.channels, img.height, img.width},
                   std::vector<T>(img.pixels.begin(), img.pixels.end()));
}

/// Tensor [C,H,W] -> image, clamping to [0,1].
template <class T>
ImageBuffer to_image(const Tensor<T>& t) {
  if (t.rank() != 3) throw DimensionError("to_image: expected [C,H,W], got " + to_string(t.shape()));
  ImageBuffer img(static_cast<int>(t.dim(1)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(0)));
  for (std::size_t i = 0; i < img.pixels.size(); ++i)
    img.pixels[i] = static_cast<float>(std::clamp<T>(t.data()[i], T(0), T(1)));
  return img;
}

inline ImageBuffer crop(const ImageBuffer& img, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || y0 + h > img.height || x0 + w > img.width)
    throw DimensionError("crop: window outside image");
  ImageBuffer out(h, w, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) out.at(c, y, x) = img.at(c, y0 + y, x0 + x);
  return out;
}

/// One of the 8 rotations/flips of the square's symmetry group.
/// Bit 0: horizontal flip, bit 1: vertical flip, bit 2: transpose.
inline ImageBuffer dihedral(const ImageBuffer& img, int code) {
  const bool hflip = code & 1, vflip = code & 2, transpose = code & 4;
  const int H = transpose ? img.width : img.height, W = transpose ? img.height : img.width;
  ImageBuffer out(H, W, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int sy = transpose ? x : y, sx = transpose ? y : x;
        if (vflip) sy = img.height - 1 - sy;
        if (hflip) sx = img.width - 1 - sx;
        out.at(c, y, x) = img.at(c, sy, sx);
      }
  return out;
}

/// Luma (ITU-R BT.601, studio range) for RGB; grayscale passes through.
inline std::vector<double> luma(const ImageBuffer& img) {
  const std::size_t n = static_cast<std::size_t>(img.height) * img.width;
  std::vector<double> y(n);
  if (img.channels == 1) {
    for (std::size_t i = 0; i < n; ++i) y[i] = img.pixels[i];
    return y;
  }
  for (std::size_t i = 0; i < n; ++i)
    y[i] = (16.0 + 65.481 * img.pixels[i] + 128.553 * img.pixels[n + i] + 24.966 * img.pixels[2 * n + i]) /
           255.0;
  return y;
}

}  // namespace dsat
