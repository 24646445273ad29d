#pragma once

// Separable cubic (Keys, a = -0.5) resampling with pixel-centre alignment.
// Downscaling widens the kernel by the scale factor (antialiasing).

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsat/image.hpp"

namespace dsat {

inline double cubic_kernel(double x, double a = -0.5) {
  const double ax = std::abs(x), ax2 = ax * ax, ax3 = ax2 * ax;
  if (ax <= 1.0) return (a + 2.0) * ax3 - (a + 3.0) * ax2 + 1.0;
  if (ax < 2.0) return a * ax3 - 5.0 * a * ax2 + 8.0 * a * ax - 4.0 * a;
  return 0.0;
}

namespace detail {

struct AxisWeights {
  int taps = 0;
  std::vector<int> index;      // [out][taps] source indices after mirroring
  std::vector<double> weight;  // [out][taps], each row sums to 1
};

// Half-sample symmetric extension: -1 -> 0, n -> n-1.
inline int mirror(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * n;
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - 1 - i;
}

inline AxisWeights axis_weights(int in, int out) {
  const double f = static_cast<double>(out) / in;
  const double kscale = f < 1.0 ? f : 1.0;
  const double width = 4.0 / kscale;
  AxisWeights w;
  w.taps = static_cast<int>(std::ceil(width)) + 2;
  w.index.resize(static_cast<std::size_t>(out * w.taps));
  w.weight.resize(static_cast<std::size_t>(out * w.taps));
  for (int i = 0; i < out; ++i) {
    const double u = (i + 0.5) / f - 0.5;
    const int left = static_cast<int>(std::floor(u - width / 2.0));
    double total = 0.0;
    for (int t = 0; t < w.taps; ++t) {
      const int j = left + t;
      const double v = kscale * cubic_kernel(kscale * (u - j));
      w.index[i * w.taps + t] = mirror(j, in);
      w.weight[i * w.taps + t] = v;
      total += v;
    }
    for (int t = 0; t < w.taps; ++t) w.weight[i * w.taps + t] /= total;
  }
  return w;
}

}  // namespace detail

/// Resamples to out_h x out_w. Computation is in double, stored as float.
inline ImageBuffer resize_cubic(const ImageBuffer& img, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw DimensionError("resize_cubic: empty target");
  const auto wx = detail::axis_weights(img.width, out_w);
  const auto wy = detail::axis_weights(img.height, out_h);
  ImageBuffer out(out_h, out_w, img.channels);
  std::vector<double> rows(static_cast<std::size_t>(img.height) * out_w);
  for (int c = 0; c < img.channels; ++c) {
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int t = 0; t < wx.taps; ++t)
          acc += wx.weight[x * wx.taps + t] * img.at(c, y, wx.index[x * wx.taps + t]);
        rows[static_cast<std::size_t>(y) * out_w + x] = acc;
      }
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double acc = 0.0;
        for (int t = 0; t < wy.taps; ++t)
          acc += wy.weight[y * wy.taps + t] * rows[static_cast<std::size_t>(wy.index[y * wy.taps + t]) * out_w + x];
        out.at(c, y, x) = static_cast<float>(acc);
      }
  }
  return out;
}

/// Downscale by an integer factor; dimensions must be divisible by s.
inline ImageBuffer bicubic_downsample(const ImageBuffer& img, int s) {
  if (s < 1 || img.height % s != 0 || img.width % s != 0)
    throw DimensionError("bicubic_downsample: " + std::to_string(img.height) + "x" +
                         std::to_string(img.width) + " not divisible by " + std::to_string(s));
  if (s == 1) return img;
  return resize_cubic(img, img.height / s, img.width / s);
}

/// Upscale by an integer factor with the same kernel family.
inline ImageBuffer bicubic_upsample(const ImageBuffer& img, int s) {
  if (s < 1) throw DimensionError("bicubic_upsample: scale must be >= 1");
  if (s == 1) return img;
  return resize_cubic(img, img.height * s, img.width * s);
}

}  // namespace dsat
