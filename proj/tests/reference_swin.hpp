#pragma once

// Plain shifted-window-attention SR forward assembled directly from ops and the
// network's named parameters. No DCL and no value modulation.

#include <cmath>
#include <string>
#include <vector>

#include "dsat/network.hpp"

namespace reference {

using dsat::Tensor;
namespace ops = dsat::ops;

template <class T>
Tensor<T> param(const dsat::DsatNet<T>& net, const std::string& name) {
  const auto* p = net.params().find(name);
  if (!p) throw std::runtime_error("reference: no parameter " + name);
  return *p;
}

template <class T>
Tensor<T> conv(const dsat::DsatNet<T>& net, const Tensor<T>& x, const std::string& name) {
  const auto w = param(net, name + ".weight");
  return ops::conv2d(x, w, param(net, name + ".bias"), (w.dim(2) - 1) / 2);
}

template <class T>
Tensor<T> linear(const dsat::DsatNet<T>& net, const Tensor<T>& x, const std::string& name) {
  return ops::linear(x, param(net, name + ".weight"), param(net, name + ".bias"));
}

/// Swin's slice construction: label the (0,-M), (-M,-s), (-s,end) bands of
/// the padded map, then mask pairs of window positions with different labels.
inline std::vector<double> swin_mask(std::int64_t H, std::int64_t W, std::int64_t M, std::int64_t s) {
  std::vector<int> img(static_cast<std::size_t>(H * W), 0);
  const std::int64_t hs[4] = {0, H - M, H - s, H}, ws[4] = {0, W - M, W - s, W};
  int cnt = 0;
  for (int a = 0; a < 3; ++a)
    for (int b = 0; b < 3; ++b) {
      for (auto y = hs[a]; y < hs[a + 1]; ++y)
        for (auto x = ws[b]; x < ws[b + 1]; ++x) img[y * W + x] = cnt;
      ++cnt;
    }
  const auto N = M * M, nW = (H / M) * (W / M);
  std::vector<double> mask(static_cast<std::size_t>(nW * N * N));
  for (std::int64_t w = 0; w < nW; ++w) {
    const auto oy = (w / (W / M)) * M, ox = (w % (W / M)) * M;
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t j = 0; j < N; ++j)
        mask[(w * N + i) * N + j] =
            img[(oy + i / M) * W + ox + i % M] != img[(oy + j / M) * W + ox + j % M] ? -1e4 : 0.0;
  }
  return mask;
}

template <class T>
Tensor<T> attention(const dsat::DsatNet<T>& net, const Tensor<T>& win, const std::string& name,
                    const Tensor<T>& mask) {
  const auto heads = net.config().heads;
  const auto nW = win.dim(0), N = win.dim(1), C = win.dim(2), d = C / heads;
  const auto qkv = linear(net, win, name + ".qkv");
  const auto to_heads = [&](const Tensor<T>& t) {
    return ops::reshape(ops::permute(ops::reshape(t, {nW, N, heads, d}), {0, 2, 1, 3}), {nW * heads, N, d});
  };
  const auto q = to_heads(ops::slice_last(qkv, 0, C));
  const auto k = to_heads(ops::slice_last(qkv, C, C));
  const auto v = to_heads(ops::slice_last(qkv, 2 * C, C));
  auto a = ops::reshape(ops::scale(ops::bmm(q, k, true), T(1) / std::sqrt(T(d))), {nW, heads, N, N});
  const auto M = static_cast<std::int64_t>(std::lround(std::sqrt(double(N))));
  std::vector<std::int64_t> rows(static_cast<std::size_t>(N * N));
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < N; ++j)
      rows[i * N + j] = (i / M - j / M + M - 1) * (2 * M - 1) + (i % M - j % M + M - 1);
  const auto bias = ops::reshape(ops::permute(ops::gather_rows(param(net, name + ".relative_bias"), rows), {1, 0}),
                                 {heads, N, N});
  a = ops::add_trailing(a, bias);
  if (mask.defined()) a = ops::add(a, mask);
  a = ops::softmax(a);
  auto out = ops::bmm(ops::reshape(a, {nW * heads, N, N}), v);
  out = ops::reshape(ops::permute(ops::reshape(out, {nW, heads, N, d}), {0, 2, 1, 3}), {nW, N, C});
  return linear(net, out, name + ".proj");
}

template <class T>
Tensor<T> swin_layer(const dsat::DsatNet<T>& net, const Tensor<T>& X, const std::string& name, bool shifted) {
  const auto M = static_cast<std::int64_t>(net.config().window), heads = net.config().heads;
  const auto H = X.dim(0), W = X.dim(1);
  const auto Hp = (H + M - 1) / M * M, Wp = (W + M - 1) / M * M;
  auto x = ops::layer_norm(X, param(net, name + ".norm1.weight"), param(net, name + ".norm1.bias"));
  if (Hp != H || Wp != W) x = ops::pad_reflect_hw(x, Hp - H, Wp - W);
  const auto s = shifted ? M / 2 : 0;
  Tensor<T> mask;
  if (s > 0) {
    x = ops::cyclic_shift(x, -s, -s);
    const auto m = swin_mask(Hp, Wp, M, s);
    const auto nW = (Hp / M) * (Wp / M), N = M * M;
    std::vector<T> full;
    for (std::int64_t w = 0; w < nW; ++w)
      for (std::int64_t h = 0; h < heads; ++h) full.insert(full.end(), m.begin() + w * N * N, m.begin() + (w + 1) * N * N);
    mask = Tensor<T>({nW, heads, N, N}, std::move(full));
  }
  auto y = ops::window_reverse(attention(net, ops::window_partition(x, M), name + ".attn", mask), M, Hp, Wp);
  if (s > 0) y = ops::cyclic_shift(y, s, s);
  if (Hp != H || Wp != W) y = ops::crop_hw(y, H, W);
  const auto x1 = ops::add(X, y);
  const auto h = ops::layer_norm(x1, param(net, name + ".norm2.weight"), param(net, name + ".norm2.bias"));
  return ops::add(x1, linear(net, ops::gelu(linear(net, h, name + ".mlp.fc1")), name + ".mlp.fc2"));
}

template <class T>
Tensor<T> forward(const dsat::DsatNet<T>& net, const Tensor<T>& lq) {
  const auto& cfg = net.config();
  const auto f0 = conv(net, lq, "shallow");
  auto f = f0;
  for (int i = 0; i < cfg.blocks; ++i) {
    const auto b = "body." + std::to_string(i);
    auto x = f;
    for (int j = 0; j < cfg.layers; ++j)
      x = ops::hwc_to_chw(swin_layer(net, ops::chw_to_hwc(x), b + ".cmt." + std::to_string(j) + ".stl", j % 2 == 1));
    f = ops::add(f, conv(net, x, b + ".conv"));
  }
  auto x = ops::add(f0, conv(net, f, "body_conv"));
  const auto steps = dsat::DsatNet<T>::upsample_steps(cfg.scale);
  for (std::size_t i = 0; i < steps.size(); ++i)
    x = ops::pixel_shuffle(conv(net, x, "head.up" + std::to_string(i)), steps[i]);
  return conv(net, x, "head.last");
}

}  // namespace reference
