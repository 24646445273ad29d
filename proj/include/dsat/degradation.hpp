#pragma once

// Synthetic degradation: LR = (HR conv k) downsample_s + n, with Gaussian
// blur kernels (isotropic or anisotropic), cubic downsampling, and additive
// white Gaussian noise. Also the paired-patch batch builder used in training.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <iostream>
#include <numbers>
#include <optional>
#include <random>
#include <string>
#include <variant>
#include <vector>

#include "dsat/image.hpp"
#include "dsat/resample.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

struct Isotropic {
  double sigma = 1.0;
};

/// Covariance R(theta) diag(lambda1, lambda2) R(theta)^T.
struct Anisotropic {
  double lambda1 = 1.0, lambda2 = 1.0, theta = 0.0;
};

struct DegradationSpec {
  std::variant<Isotropic, Anisotropic> kind = Isotropic{};
  int kernel_size = 21;
  int scale = 2;
  double noise_sigma = 0.0;  // std of AWGN on the [0,255] scale

  bool isotropic() const { return std::holds_alternative<Isotropic>(kind); }
};

/// Upper end of the isotropic width range for a scale factor.
inline double max_isotropic_sigma(int scale) {
  switch (scale) {
    case 2: return 2.0;
    case 3: return 3.0;
    case 4: return 4.0;
    default: throw ParameterError("scale must be 2, 3 or 4, got " + std::to_string(scale));
  }
}

/// Throws ParameterError when the spec falls outside the sampled ranges.
inline void validate(const DegradationSpec& s) {
  if (s.kernel_size <= 0 || s.kernel_size % 2 == 0)
    throw ParameterError("kernel_size must be a positive odd integer");
  const double smax = max_isotropic_sigma(s.scale);
  if (!(s.noise_sigma >= 0.0 && s.noise_sigma <= 25.0))
    throw ParameterError("noise_sigma must lie in [0,25]");
  if (const auto* iso = std::get_if<Isotropic>(&s.kind)) {
    if (!(iso->sigma >= 0.2 && iso->sigma <= smax))
      throw ParameterError("isotropic sigma " + std::to_string(iso->sigma) + " outside [0.2," +
                           std::to_string(smax) + "]");
  } else {
    const auto& a = std::get<Anisotropic>(s.kind);
    if (!(a.lambda1 >= 0.2 && a.lambda1 <= 4.0 && a.lambda2 >= 0.2 && a.lambda2 <= 4.0))
      throw ParameterError("anisotropic eigenvalues must lie in [0.2,4]");
    if (!(a.theta >= 0.0 && a.theta < std::numbers::pi))
      throw ParameterError("anisotropic angle must lie in [0,pi)");
  }
}

/// 2x2 covariance of the kernel's Gaussian, row-major {s00, s01, s10, s11}.
inline std::array<double, 4> kernel_covariance(const DegradationSpec& s) {
  if (const auto* iso = std::get_if<Isotropic>(&s.kind)) {
    const double v = iso->sigma * iso->sigma;
    return {v, 0.0, 0.0, v};
  }
  const auto& a = std::get<Anisotropic>(s.kind);
  const double c = std::cos(a.theta), sn = std::sin(a.theta);
  // R diag(l1,l2) R^T with R = [[c,-s],[s,c]]
  return {c * c * a.lambda1 + sn * sn * a.lambda2, c * sn * (a.lambda1 - a.lambda2),
          c * sn * (a.lambda1 - a.lambda2), sn * sn * a.lambda1 + c * c * a.lambda2};
}

/// Gaussian density on the integer grid centred at 0, normalised to sum 1.
/// Returned as [kernel_size, kernel_size] indexed [y][x].
inline Tensor<double> gaussian_kernel(const DegradationSpec& s) {
  if (s.kernel_size <= 0 || s.kernel_size % 2 == 0)
    throw ParameterError("kernel_size must be a positive odd integer");
  const int n = s.kernel_size, r = n / 2;
  std::vector<double> k(static_cast<std::size_t>(n * n));
  if (const auto* iso = std::get_if<Isotropic>(&s.kind)) {
    if (!(iso->sigma > 0)) throw ParameterError("isotropic sigma must be positive");
    const double inv = 1.0 / (2.0 * iso->sigma * iso->sigma);
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x) k[(y + r) * n + x + r] = std::exp(-double(x * x + y * y) * inv);
  } else {
    const auto& a = std::get<Anisotropic>(s.kind);
    if (!(a.lambda1 > 0 && a.lambda2 > 0)) throw ParameterError("anisotropic eigenvalues must be positive");
    const auto cov = kernel_covariance(s);
    // Covariance is indexed (x, y): first axis horizontal.
    const double det = cov[0] * cov[3] - cov[1] * cov[2];
    if (!(det > 0) || !(cov[0] > 0)) throw ParameterError("degenerate kernel covariance");
    const double i00 = cov[3] / det, i01 = -cov[1] / det, i11 = cov[0] / det;
    for (int y = -r; y <= r; ++y)
      for (int x = -r; x <= r; ++x)
        k[(y + r) * n + x + r] = std::exp(-0.5 * (i00 * x * x + 2.0 * i01 * x * y + i11 * y * y));
  }
  double total = 0.0;
  for (double v : k) total += v;
  for (double& v : k) v /= total;
  return Tensor<double>({n, n}, std::move(k));
}

namespace detail {

// Mirror without edge repeat: -1 -> 1, n -> n-2.
inline int reflect101(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

}  // namespace detail

/// Same-size convolution with reflect padding (kernel is point-symmetric).
inline ImageBuffer blur(const ImageBuffer& img, const Tensor<double>& kernel) {
  const int n = static_cast<int>(kernel.dim(0)), r = n / 2;
  if (img.height < n || img.width < n)
    throw DimensionError("blur: image " + std::to_string(img.height) + "x" + std::to_string(img.width) +
                         " is smaller than the " + std::to_string(n) + "x" + std::to_string(n) + " kernel");
  const auto& k = kernel.vec();
  ImageBuffer out(img.height, img.width, img.channels);
  std::vector<int> xi(static_cast<std::size_t>(img.width + 2 * r));
  for (int x = -r; x < img.width + r; ++x) xi[x + r] = detail::reflect101(x, img.width);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        double acc = 0.0;
        for (int dy = -r; dy <= r; ++dy) {
          const int sy = detail::reflect101(y - dy, img.height);
          const double* krow = k.data() + (dy + r) * n;
          for (int dx = -r; dx <= r; ++dx) acc += krow[dx + r] * img.at(c, sy, xi[x - dx + r]);
        }
        out.at(c, y, x) = static_cast<float>(acc);
      }
  return out;
}

/// (hr conv k) downsample_s + n, clamped to [0,1]. hr is cropped to a
/// multiple of the scale first. Deterministic in rng_seed.
inline ImageBuffer degrade(const ImageBuffer& hr, const DegradationSpec& spec, std::uint64_t rng_seed) {
  const int s = spec.scale;
  if (s < 1) throw ParameterError("degrade: scale must be positive");
  const int H = hr.height / s * s, W = hr.width / s * s;
  if (H < spec.kernel_size || W < spec.kernel_size)
    throw DimensionError("degrade: image " + std::to_string(hr.height) + "x" + std::to_string(hr.width) +
                         " too small for a " + std::to_string(spec.kernel_size) + "-tap kernel at scale " +
                         std::to_string(s));
  const ImageBuffer src = (H == hr.height && W == hr.width) ? hr : crop(hr, 0, 0, H, W);
  auto lr = bicubic_downsample(blur(src, gaussian_kernel(spec)), s);
  if (spec.noise_sigma > 0.0) {
    std::mt19937_64 rng(rng_seed);
    std::normal_distribution<double> noise(0.0, spec.noise_sigma / 255.0);
    for (auto& v : lr.pixels) v = static_cast<float>(v + noise(rng));
  }
  for (auto& v : lr.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return lr;
}

enum class SpecMode { isotropic_noisefree, general };

/// Uniform draw from the training ranges for a scale factor.
inline DegradationSpec sample_spec(std::mt19937_64& rng, int scale, SpecMode mode) {
  DegradationSpec s;
  s.scale = scale;
  if (mode == SpecMode::isotropic_noisefree) {
    s.kind = Isotropic{std::uniform_real_distribution<double>(0.2, max_isotropic_sigma(scale))(rng)};
    s.noise_sigma = 0.0;
  } else {
    std::uniform_real_distribution<double> lam(0.2, 4.0), ang(0.0, std::numbers::pi),
        noise(0.0, 25.0);
    Anisotropic a;
    a.lambda1 = lam(rng);
    a.lambda2 = lam(rng);
    a.theta = ang(rng);
    s.kind = a;
    s.noise_sigma = noise(rng);
  }
  return s;
}

/// Where training degradations come from: one of the sampled families, or
/// a fixed list drawn uniformly (toy sets with known cluster labels).
struct SpecFamily {
  SpecMode mode = SpecMode::isotropic_noisefree;
  std::vector<DegradationSpec> fixed;

  /// Returns the spec and its cluster label (index into `fixed`, or -1).
  std::pair<DegradationSpec, int> draw(std::mt19937_64& rng, int scale) const {
    if (fixed.empty()) return {sample_spec(rng, scale, mode), -1};
    const auto i = std::uniform_int_distribution<std::size_t>(0, fixed.size() - 1)(rng);
    auto s = fixed[i];
    s.scale = scale;
    return {s, static_cast<int>(i)};
  }

  /// Two isotropic widths, noise-free: the separability toy setting.
  static SpecFamily two_spec(double sigma_a, double sigma_b, int scale) {
    SpecFamily f;
    for (double sg : {sigma_a, sigma_b}) {
      DegradationSpec s;
      s.kind = Isotropic{sg};
      s.scale = scale;
      f.fixed.push_back(s);
    }
    return f;
  }
};

struct BatchConfig {
  int images = 16;    // B
  int lr_patch = 48;  // LR patch side
  int scale = 2;
  bool augment = true;
  SpecFamily family;
};

/// Two LR patches per selected image, each with its aligned HR patch.
/// Patch 2i and 2i+1 come from image i and share specs[i].
struct TrainBatch {
  std::vector<ImageBuffer> hr, lr;
  std::vector<DegradationSpec> specs;
  std::vector<int> labels;          // per image; -1 when not from a fixed family
  std::vector<int> source_index;    // per image, index into the pool
  std::vector<int> image_of_patch;  // per patch

  int images() const { return static_cast<int>(specs.size()); }
};

using WarningSink = std::function<void(const std::string&)>;

inline void warn_stderr(const std::string& msg) { std::cerr << "warning: " << msg << '\n'; }

inline TrainBatch make_batch(const std::vector<ImageBuffer>& pool, std::mt19937_64& rng,
                             const BatchConfig& cfg, const WarningSink& warn = warn_stderr) {
  if (pool.empty()) throw DataError("make_batch: empty image pool");
  const int hp = cfg.lr_patch * cfg.scale;
  std::vector<int> usable;
  for (std::size_t i = 0; i < pool.size(); ++i) {
    if (pool[i].height >= hp && pool[i].width >= hp)
      usable.push_back(static_cast<int>(i));
    else if (warn)
      warn("skipping image " + std::to_string(i) + " (" + std::to_string(pool[i].height) + "x" +
           std::to_string(pool[i].width) + ") smaller than the " + std::to_string(hp) + "px HR patch");
  }
  if (usable.empty()) throw DataError("make_batch: no image large enough for " + std::to_string(hp) + "px patches");

  std::vector<int> chosen;
  if (static_cast<std::size_t>(cfg.images) <= usable.size()) {
    auto order = usable;
    std::shuffle(order.begin(), order.end(), rng);
    chosen.assign(order.begin(), order.begin() + cfg.images);
  } else {
    std::uniform_int_distribution<std::size_t> pick(0, usable.size() - 1);
    for (int i = 0; i < cfg.images; ++i) chosen.push_back(usable[pick(rng)]);
  }

  TrainBatch batch;
  for (int i = 0; i < cfg.images; ++i) {
    const ImageBuffer* src = &pool[static_cast<std::size_t>(chosen[i])];
    ImageBuffer augmented;
    if (cfg.augment) {
      augmented = dihedral(*src, static_cast<int>(rng() % 8));
      src = &augmented;
    }
    auto [spec, label] = cfg.family.draw(rng, cfg.scale);
    batch.specs.push_back(spec);
    batch.labels.push_back(label);
    batch.source_index.push_back(chosen[i]);
    for (int p = 0; p < 2; ++p) {
      const int y0 = std::uniform_int_distribution<int>(0, src->height - hp)(rng);
      const int x0 = std::uniform_int_distribution<int>(0, src->width - hp)(rng);
      auto hr = crop(*src, y0, x0, hp, hp);
      batch.lr.push_back(degrade(hr, spec, rng()));
      batch.hr.push_back(std::move(hr));
      batch.image_of_patch.push_back(i);
    }
  }
  return batch;
}

/// Procedural RGB test image: smooth gradient background, random sharp-edged
/// rectangles, disks and stripe patches. Deterministic in seed.
inline ImageBuffer synthetic_image(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(size, size, 3);
  double base[3], gx[3], gy[3];
  for (int c = 0; c < 3; ++c) {
    base[c] = 0.2 + 0.6 * u(rng);
    gx[c] = (u(rng) - 0.5) * 0.4;
    gy[c] = (u(rng) - 0.5) * 0.4;
  }
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        img.at(c, y, x) = static_cast<float>(base[c] + gx[c] * x / size + gy[c] * y / size);

  const int shapes = 6 + static_cast<int>(rng() % 6);
  for (int s = 0; s < shapes; ++s) {
    double col[3];
    for (double& v : col) v = u(rng);
    const int kind = static_cast<int>(rng() % 3);
    const double cx = u(rng) * size, cy = u(rng) * size;
    const double ext = (0.08 + 0.25 * u(rng)) * size;
    const double freq = 0.3 + 0.9 * u(rng), angle = u(rng) * std::numbers::pi;
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double dx = x - cx, dy = y - cy;
        bool inside = false;
        double alpha = 1.0;
        if (kind == 0) {
          inside = std::abs(dx) < ext && std::abs(dy) < ext * 0.7;
        } else if (kind == 1) {
          inside = dx * dx + dy * dy < ext * ext;
        } else {
          inside = std::abs(dx) < ext && std::abs(dy) < ext;
          const double t = dx * std::cos(angle) + dy * std::sin(angle);
          alpha = std::sin(freq * t) > 0 ? 1.0 : 0.0;
        }
        if (!inside) continue;
        for (int c = 0; c < 3; ++c) {
          float& p = img.at(c, y, x);
          p = static_cast<float>(alpha * col[c] + (1.0 - alpha) * p);
        }
      }
  }
  for (auto& v : img.pixels) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

/// Stationary dead-leaves texture: small discs and squares with independent
/// colours on a grey ground. Two crops of one texture share no more content
/// statistics than crops of different textures.
inline ImageBuffer synthetic_texture(int size, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImageBuffer img(size, size, 3, 0.5f);
  const int shapes = size * size / 40;
  for (int s = 0; s < shapes; ++s) {
    float col[3];
    for (float& v : col) v = static_cast<float>(u(rng));
    const double cx = u(rng) * size, cy = u(rng) * size, ext = 2.0 + 6.0 * u(rng);
    const bool disc = rng() % 2 == 1;
    const int y0 = std::max(0, static_cast<int>(cy - ext)), y1 = std::min(size, static_cast<int>(cy + ext) + 1);
    const int x0 = std::max(0, static_cast<int>(cx - ext)), x1 = std::min(size, static_cast<int>(cx + ext) + 1);
    for (int y = y0; y < y1; ++y)
      for (int x = x0; x < x1; ++x) {
        const double dx = x - cx, dy = y - cy;
        if (disc && dx * dx + dy * dy > ext * ext) continue;
        for (int c = 0; c < 3; ++c) img.at(c, y, x) = col[c];
      }
  }
  return img;
}

enum class SyntheticKind { scene, texture };

inline std::vector<ImageBuffer> synthetic_pool(int count, int size, std::uint64_t seed,
                                               SyntheticKind kind = SyntheticKind::scene) {
  std::vector<ImageBuffer> pool;
  for (int i = 0; i < count; ++i) {
    const auto s = seed * 7919 + static_cast<std::uint64_t>(i);
    pool.push_back(kind == SyntheticKind::texture ? synthetic_texture(size, s) : synthetic_image(size, s));
  }
  return pool;
}

}  // namespace dsat
