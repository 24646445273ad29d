#pragma once

// Image quality metrics on the luma channel and a cluster-separability score
// for degradation embeddings.

#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <string>
#include <vector>

#include "dsat/image.hpp"
#include "dsat/resample.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

inline constexpr double kPsnrCap = 100.0;

namespace detail {

inline void require_same_geometry(const ImageBuffer& a, const ImageBuffer& b, const char* who) {
  if (a.height != b.height || a.width != b.width || a.channels != b.channels)
    throw DimensionError(std::string(who) + ": image shapes differ (" + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + "x" + std::to_string(a.channels) + " vs " +
                         std::to_string(b.height) + "x" + std::to_string(b.width) + "x" +
                         std::to_string(b.channels) + ")");
}

}  // namespace detail

/// PSNR in dB on the luma channel after removing `border_crop` pixels from
/// every edge. Identical inputs give kPsnrCap.
inline double psnr(const ImageBuffer& a, const ImageBuffer& b, int border_crop = 0) {
  detail::require_same_geometry(a, b, "psnr");
  if (2 * border_crop >= a.height || 2 * border_crop >= a.width)
    throw DimensionError("psnr: border crop removes the whole image");
  const auto ya = luma(a), yb = luma(b);
  double se = 0.0;
  std::int64_t n = 0;
  for (int y = border_crop; y < a.height - border_crop; ++y)
    for (int x = border_crop; x < a.width - border_crop; ++x) {
      const double d = ya[static_cast<std::size_t>(y) * a.width + x] - yb[static_cast<std::size_t>(y) * a.width + x];
      se += d * d;
      ++n;
    }
  const double mse = se / static_cast<double>(n);
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

namespace detail {

inline std::vector<double> gaussian_window(int size, double sigma) {
  std::vector<double> g(static_cast<std::size_t>(size));
  const int r = size / 2;
  double total = 0.0;
  for (int i = 0; i < size; ++i) total += g[i] = std::exp(-double((i - r) * (i - r)) / (2 * sigma * sigma));
  for (auto& v : g) v /= total;
  return g;
}

// Valid-mode separable filtering of an h x w plane.
inline std::vector<double> filter_valid(const std::vector<double>& src, int h, int w,
                                        const std::vector<double>& g) {
  const int k = static_cast<int>(g.size()), ho = h - k + 1, wo = w - k + 1;
  std::vector<double> tmp(static_cast<std::size_t>(h) * wo), out(static_cast<std::size_t>(ho) * wo);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += g[t] * src[static_cast<std::size_t>(y) * w + x + t];
      tmp[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  for (int y = 0; y < ho; ++y)
    for (int x = 0; x < wo; ++x) {
      double acc = 0.0;
      for (int t = 0; t < k; ++t) acc += g[t] * tmp[static_cast<std::size_t>(y + t) * wo + x];
      out[static_cast<std::size_t>(y) * wo + x] = acc;
    }
  return out;
}

}  // namespace detail

/// Mean SSIM on luma: 11x11 Gaussian window (sigma 1.5), K1 = 0.01,
/// K2 = 0.03, dynamic range 1, valid windows only.
inline double ssim(const ImageBuffer& a, const ImageBuffer& b, int border_crop = 0) {
  detail::require_same_geometry(a, b, "ssim");
  constexpr int kWin = 11;
  const int h = a.height - 2 * border_crop, w = a.width - 2 * border_crop;
  if (h < kWin || w < kWin) throw DimensionError("ssim: image smaller than the 11x11 window");
  const auto la = luma(a), lb = luma(b);
  std::vector<double> pa(static_cast<std::size_t>(h) * w), pb(pa.size());
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const auto src = static_cast<std::size_t>(y + border_crop) * a.width + x + border_crop;
      pa[static_cast<std::size_t>(y) * w + x] = la[src];
      pb[static_cast<std::size_t>(y) * w + x] = lb[src];
    }
  std::vector<double> aa(pa.size()), bb(pa.size()), ab(pa.size());
  for (std::size_t i = 0; i < pa.size(); ++i) {
    aa[i] = pa[i] * pa[i];
    bb[i] = pb[i] * pb[i];
    ab[i] = pa[i] * pb[i];
  }
  const auto g = detail::gaussian_window(kWin, 1.5);
  const auto mu_a = detail::filter_valid(pa, h, w, g), mu_b = detail::filter_valid(pb, h, w, g);
  const auto e_aa = detail::filter_valid(aa, h, w, g), e_bb = detail::filter_valid(bb, h, w, g);
  const auto e_ab = detail::filter_valid(ab, h, w, g);
  constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
  double total = 0.0;
  for (std::size_t i = 0; i < mu_a.size(); ++i) {
    const double ma = mu_a[i], mb = mu_b[i];
    const double va = e_aa[i] - ma * ma, vb = e_bb[i] - mb * mb, cov = e_ab[i] - ma * mb;
    total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (va + vb + C2));
  }
  return total / static_cast<double>(mu_a.size());
}

/// Cubic upsampling of an LR image, the reference every SR model must beat.
inline ImageBuffer bicubic_baseline(const ImageBuffer& lr, int s) { return bicubic_upsample(lr, s); }

/// Mean silhouette coefficient under cosine distance. rows is [n, d]
/// row-major; labels assign each row to a cluster. Needs >= 2 clusters of
/// >= 2 points each, and no point may carry two labels. Zero vectors have
/// cosine distance 1 to everything.
inline double separability(const std::vector<double>& rows, std::size_t dim, const std::vector<int>& labels) {
  const std::size_t n = labels.size();
  if (dim == 0 || rows.size() != n * dim) throw DimensionError("separability: rows do not match labels");
  std::map<int, std::size_t> counts;
  for (int l : labels) ++counts[l];
  if (counts.size() < 2) throw ParameterError("separability: need at least two clusters");
  for (const auto& [l, c] : counts)
    if (c < 2) throw ParameterError("separability: cluster " + std::to_string(l) + " is a singleton");
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j)
      if (labels[i] != labels[j] &&
          std::equal(rows.begin() + static_cast<std::ptrdiff_t>(i * dim),
                     rows.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim),
                     rows.begin() + static_cast<std::ptrdiff_t>(j * dim)))
        throw ParameterError("separability: point " + std::to_string(i) + " appears in two clusters");

  std::vector<double> unit(rows);
  std::vector<bool> zero(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < dim; ++c) s += unit[i * dim + c] * unit[i * dim + c];
    if (s == 0.0) {
      zero[i] = true;
      continue;
    }
    const double inv = 1.0 / std::sqrt(s);
    for (std::size_t c = 0; c < dim; ++c) unit[i * dim + c] *= inv;
  }
  const auto dist = [&](std::size_t i, std::size_t j) {
    if (zero[i] || zero[j]) return 1.0;
    double dot = 0.0;
    for (std::size_t c = 0; c < dim; ++c) dot += unit[i * dim + c] * unit[j * dim + c];
    return 1.0 - dot;
  };

  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    std::map<int, double> sums;
    for (std::size_t j = 0; j < n; ++j)
      if (j != i) sums[labels[j]] += dist(i, j);
    const double a = sums[labels[i]] / static_cast<double>(counts[labels[i]] - 1);
    double b = std::numeric_limits<double>::infinity();
    for (const auto& [l, s] : sums)
      if (l != labels[i]) b = std::min(b, s / static_cast<double>(counts[l]));
    const double denom = std::max(a, b);
    total += denom > 0.0 ? (b - a) / denom : 0.0;
  }
  return total / static_cast<double>(n);
}

}  // namespace dsat
