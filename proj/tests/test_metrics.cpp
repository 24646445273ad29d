#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "dsat/degradation.hpp"
#include "dsat/metrics.hpp"

using namespace dsat;

namespace {

ImageBuffer noisy(const ImageBuffer& img, double sd, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, sd);
  auto out = img;
  for (auto& v : out.pixels) v = static_cast<float>(v + n(rng));
  return out;
}

}  // namespace

TEST(Psnr, ConstantOffsetIsTwentyDecibels) {
  ImageBuffer a(40, 40, 1, 0.3f), b(40, 40, 1, 0.4f);
  EXPECT_NEAR(psnr(a, b), 20.0, 0.01);
  EXPECT_NEAR(psnr(a, b, 4), 20.0, 0.01);
}

TEST(Psnr, IdenticalImagesHitTheCap) {
  const auto img = synthetic_image(32, 1);
  EXPECT_EQ(psnr(img, img), kPsnrCap);
}

TEST(Psnr, SymmetricAndShapeChecked) {
  const auto a = synthetic_image(32, 2), b = synthetic_image(32, 3);
  EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
  EXPECT_THROW(psnr(a, synthetic_image(33, 2)), DimensionError);
  EXPECT_THROW(psnr(a, ImageBuffer(32, 32, 1)), DimensionError);
  EXPECT_THROW(psnr(a, b, 16), DimensionError);
}

TEST(Psnr, GaussianNoiseLevel) {
  ImageBuffer gray(512, 512, 1, 0.5f);
  EXPECT_NEAR(psnr(gray, noisy(gray, 0.05, 4)), 20.0 * std::log10(1.0 / 0.05), 0.1);
}

TEST(Psnr, UsesLumaForColour) {
  // A pure-blue offset moves luma by 24.966/255 of the offset.
  ImageBuffer a(16, 16, 3, 0.5f);
  auto b = a;
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) b.at(2, y, x) += 0.1f;
  EXPECT_NEAR(psnr(a, b), -20.0 * std::log10(0.1 * 24.966 / 255.0), 1e-3);
}

TEST(Ssim, IdentityIsOneAndSymmetric) {
  const auto a = synthetic_image(48, 5), b = noisy(a, 0.05, 6);
  EXPECT_EQ(ssim(a, a), 1.0);
  EXPECT_NEAR(ssim(a, b), ssim(b, a), 1e-9);
  EXPECT_LE(ssim(a, b), 1.0);
  EXPECT_GE(ssim(a, b), -1.0);
}

TEST(Ssim, AnticorrelatedBinaryImageIsNegative) {
  ImageBuffer a(32, 32, 1);
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) a.at(0, y, x) = ((x / 3 + y / 2) % 2) ? 1.0f : 0.0f;
  auto b = a;
  for (auto& v : b.pixels) v = 1.0f - v;
  EXPECT_LT(ssim(a, b), 0.0);
}

TEST(Ssim, DecreasesWithNoise) {
  ImageBuffer gray(64, 64, 1);
  const auto base = synthetic_image(64, 7);
  const auto y = luma(base);
  for (std::size_t i = 0; i < gray.pixels.size(); ++i) gray.pixels[i] = static_cast<float>(y[i]);
  EXPECT_GT(ssim(gray, noisy(gray, 0.02, 8)), ssim(gray, noisy(gray, 0.1, 8)));
}

TEST(Ssim, WindowMustFit) {
  EXPECT_THROW(ssim(ImageBuffer(10, 40, 1), ImageBuffer(10, 40, 1)), DimensionError);
  EXPECT_THROW(ssim(ImageBuffer(20, 20, 1), ImageBuffer(20, 20, 1), 5), DimensionError);
}

TEST(Separability, OrthogonalTightClusters) {
  std::mt19937_64 rng(9);
  std::normal_distribution<double> jitter(0.0, 0.01);
  std::vector<double> rows;
  std::vector<int> labels;
  for (int i = 0; i < 20; ++i) {
    const int l = i % 2;
    for (int d = 0; d < 8; ++d) rows.push_back((d == l ? 1.0 : 0.0) + jitter(rng));
    labels.push_back(l);
  }
  EXPECT_GT(separability(rows, 8, labels), 0.9);
}

TEST(Separability, ShuffledLabelsGiveNull) {
  std::mt19937_64 rng(10);
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> rows;
  std::vector<int> labels;
  for (int i = 0; i < 60; ++i) {
    const int l = i % 2;
    for (int d = 0; d < 8; ++d) rows.push_back((d == l ? 3.0 : 0.0) + n(rng));
    labels.push_back(l);
  }
  EXPECT_GT(separability(rows, 8, labels), 0.3);
  double total = 0;
  for (int t = 0; t < 20; ++t) {
    std::shuffle(labels.begin(), labels.end(), rng);
    const double s = separability(rows, 8, labels);
    EXPECT_NEAR(s, 0.0, 0.1);
    total += s;
  }
  EXPECT_NEAR(total / 20, 0.0, 0.05);
}

TEST(Separability, Preconditions) {
  const std::vector<double> rows{1, 0, 0.9, 0.1, 0, 1, 0.1, 0.9};
  EXPECT_NO_THROW(separability(rows, 2, {0, 0, 1, 1}));
  EXPECT_THROW(separability(rows, 2, {0, 0, 0, 0}), ParameterError);
  EXPECT_THROW(separability(rows, 2, {0, 0, 0, 1}), ParameterError);
  EXPECT_THROW(separability(rows, 2, {0, 1, 1}), DimensionError);
  const std::vector<double> dup{1, 0, 1, 0, 0, 1, 0, 1};
  EXPECT_THROW(separability(dup, 2, {0, 1, 1, 0}), ParameterError);
}

TEST(Separability, ZeroVectorsAreFarFromEverything) {
  const std::vector<double> rows{0, 0, 1, 0, 0, 1, 0, 1};
  const double s = separability(rows, 2, {0, 0, 1, 1});
  EXPECT_TRUE(std::isfinite(s));
}
