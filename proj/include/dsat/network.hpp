#pragma once

// Degradation-modulated window-attention SR network.
//
//   lq -> shallow conv -> K x DRSTB -> conv -> (+ shallow) -> upsampling head
//
// A DRSTB stacks L CMT blocks and a 3x3 conv with a block residual. A CMT is
// a degradation-aware depthwise conv layer (DCL) followed by a Swin layer
// (STL) whose value projection is scaled channel-wise by D2.

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "dsat/layers.hpp"
#include "dsat/ops.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

struct DsatConfig {
  int blocks = 2;          // K
  int layers = 2;          // L, CMTs per DRSTB
  int channels = 36;       // C
  int window = 8;          // M
  int heads = 2;
  int scale = 2;
  double mlp_ratio = 2.0;
  int in_channels = 3;
  int degradation_dim = 256;
  int modulation_hidden = 64;
  bool dcl = true;                // dynamic convolution branch
  bool attention_weights = true;  // D2 modulation of V
  std::uint64_t seed = 0;

  int head_dim() const { return channels / heads; }
  int mlp_hidden() const { return static_cast<int>(std::lround(mlp_ratio * channels)); }

  void validate() const {
    if (blocks < 0 || layers < 0 || channels <= 0 || window <= 0 || heads <= 0)
      throw ConfigError("model: non-positive architecture extent");
    if (channels % heads != 0)
      throw ConfigError("model: channels (" + std::to_string(channels) +
                        ") not divisible by heads (" + std::to_string(heads) + ")");
    if (scale != 1 && scale != 2 && scale != 3 && scale != 4)
      throw ConfigError("model: scale must be 1, 2, 3 or 4");
    if (mlp_ratio <= 0) throw ConfigError("model: mlp_ratio must be positive");
  }

  /// Full-size configuration (K=6, L=6, M=8, C=180, 6 heads).
  static DsatConfig full(int scale) {
    DsatConfig c;
    c.blocks = 6;
    c.layers = 6;
    c.channels = 180;
    c.window = 8;
    c.heads = 6;
    c.mlp_ratio = 4.0;
    c.scale = scale;
    return c;
  }

  static DsatConfig desk(int scale) {
    DsatConfig c;
    c.scale = scale;
    return c;
  }
};

/// How D reaches the network.
enum class Modulation {
  learned,   // D1/D2 generated from D, subject to the config flags
  identity,  // D1 forced to 0 and D2 forced to 1 at every CMT
  none,      // DCL skipped and V unmodulated: plain window-attention SR
};

template <class T>
struct ForwardOptions {
  Modulation modulation = Modulation::learned;
  // Receives every post-softmax attention tensor [nW, heads, N, N].
  std::vector<Tensor<T>>* attention_probe = nullptr;
};

template <class T>
struct DclParams {
  bool has_kernel = false, has_scale = false;
  Linear<T> kernel_fc1, kernel_fc2;  // D -> C*9, reshaped to [C,1,3,3]
  Linear<T> scale_fc1, scale_fc2;    // 1x1 convs on the expanded D -> C, sigmoid
};

template <class T>
struct AttentionParams {
  Linear<T> qkv;               // [C, 3C]: P_Q | P_K | P_V
  Linear<T> proj;
  Tensor<T> relative_bias;     // [(2M-1)^2, heads]
};

template <class T>
struct StlParams {
  LayerNorm<T> norm1, norm2;
  AttentionParams<T> attn;
  Linear<T> fc1, fc2;
  bool shifted = false;
};

template <class T>
struct CmtParams {
  DclParams<T> dcl;
  StlParams<T> stl;
};

template <class T>
struct DrstbParams {
  std::vector<CmtParams<T>> cmts;
  Conv2d<T> conv;
};

/// Swin relative-position lookup: entry (i, j) of an M^2 x M^2 window.
inline std::vector<std::int64_t> relative_position_index(std::int64_t M) {
  const auto N = M * M;
  std::vector<std::int64_t> idx(static_cast<std::size_t>(N * N));
  for (std::int64_t i = 0; i < N; ++i)
    for (std::int64_t j = 0; j < N; ++j) {
      const auto dy = i / M - j / M + M - 1;
      const auto dx = i % M - j % M + M - 1;
      idx[i * N + j] = dy * (2 * M - 1) + dx;
    }
  return idx;
}

/// Additive mask [nW, N, N] for shifted windows on an H x W map: pairs whose
/// pre-shift regions differ get `masked_value`, others 0.
inline std::vector<double> shifted_window_mask(std::int64_t H, std::int64_t W, std::int64_t M,
                                               std::int64_t shift, double masked_value = -1e4) {
  std::vector<int> region(static_cast<std::size_t>(H * W));
  const auto band = [M, shift](std::int64_t i, std::int64_t n) {
    if (i < n - M) return 0;
    if (i < n - shift) return 1;
    return 2;
  };
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t x = 0; x < W; ++x) region[y * W + x] = band(y, H) * 3 + band(x, W);
  const auto N = M * M, nwx = W / M, nw = (H / M) * nwx;
  std::vector<double> mask(static_cast<std::size_t>(nw * N * N), 0.0);
  for (std::int64_t w = 0; w < nw; ++w) {
    const auto oy = (w / nwx) * M, ox = (w % nwx) * M;
    for (std::int64_t i = 0; i < N; ++i)
      for (std::int64_t j = 0; j < N; ++j) {
        const int ri = region[(oy + i / M) * W + ox + i % M];
        const int rj = region[(oy + j / M) * W + ox + j % M];
        if (ri != rj) mask[(w * N + i) * N + j] = masked_value;
      }
  }
  return mask;
}

/// Multi-head self-attention inside each window with the value projection
/// scaled channel-wise by `d2` (undefined = no modulation). windows is
/// [nW, N, C]; mask, if defined, is [nW, heads, N, N].
template <class T>
Tensor<T> degradation_msa(const Tensor<T>& windows, const AttentionParams<T>& p,
                          const Tensor<T>& d2, const Tensor<T>& mask, std::int64_t heads,
                          std::vector<Tensor<T>>* probe = nullptr) {
  using namespace ops;
  const auto nW = windows.dim(0), N = windows.dim(1), C = windows.dim(2);
  if (C % heads != 0) throw DimensionError("degradation_msa: channels not divisible by heads");
  const auto d = C / heads;
  if (d2.defined() && d2.numel() != C)
    throw DimensionError("degradation_msa: D2 has " + std::to_string(d2.numel()) +
                         " entries, expected heads*d = " + std::to_string(C));
  const auto qkv = p.qkv(windows);
  const auto q = slice_last(qkv, 0, C);
  const auto k = slice_last(qkv, C, C);
  auto v = slice_last(qkv, 2 * C, C);
  // Head h sees the slice D2[h*d, (h+1)*d) as its 1 x d weight.
  if (d2.defined()) v = mul_last_dim(v, d2);

  const auto split = [&](const Tensor<T>& t) {
    return reshape(permute(reshape(t, {nW, N, heads, d}), {0, 2, 1, 3}), {nW * heads, N, d});
  };
  auto attn = scale(bmm(split(q), split(k), /*transpose_b=*/true), T(1) / std::sqrt(T(d)));
  attn = reshape(attn, {nW, heads, N, N});

  const auto M = static_cast<std::int64_t>(std::lround(std::sqrt(static_cast<double>(N))));
  const auto bias = reshape(
      permute(gather_rows(p.relative_bias, relative_position_index(M)), {1, 0}), {heads, N, N});
  attn = add_trailing(attn, bias);
  if (mask.defined()) attn = add(attn, mask);
  attn = softmax(attn);
  if (probe) probe->push_back(attn);

  auto out = bmm(reshape(attn, {nW * heads, N, N}), split(v));
  out = reshape(permute(reshape(out, {nW, heads, N, d}), {0, 2, 1, 3}), {nW, N, C});
  return p.proj(out);
}

/// X' = DMSA(LN(X)) + X ; X'' = MLP(LN(X')) + X'. X is [H,W,C].
template <class T>
Tensor<T> stl_forward(const Tensor<T>& X, const StlParams<T>& p, const Tensor<T>& d2,
                      std::int64_t window, std::int64_t heads,
                      std::vector<Tensor<T>>* probe = nullptr) {
  using namespace ops;
  const auto H = X.dim(0), W = X.dim(1);
  const auto Hp = (H + window - 1) / window * window, Wp = (W + window - 1) / window * window;
  auto x = p.norm1(X);
  if (Hp != H || Wp != W) x = pad_reflect_hw(x, Hp - H, Wp - W);
  const auto shift = p.shifted ? window / 2 : 0;
  Tensor<T> mask;
  if (shift > 0) {
    x = cyclic_shift(x, -shift, -shift);
    const auto m = shifted_window_mask(Hp, Wp, window, shift);
    const auto nW = (Hp / window) * (Wp / window), N = window * window;
    std::vector<T> full(static_cast<std::size_t>(nW * heads * N * N));
    for (std::int64_t w = 0; w < nW; ++w)
      for (std::int64_t h = 0; h < heads; ++h)
        std::copy(m.begin() + w * N * N, m.begin() + (w + 1) * N * N,
                  full.begin() + (w * heads + h) * N * N);
    mask = Tensor<T>({nW, heads, N, N}, std::move(full));
  }
  auto y = degradation_msa(window_partition(x, window), p.attn, d2, mask, heads, probe);
  y = window_reverse(y, window, Hp, Wp);
  if (shift > 0) y = cyclic_shift(y, shift, shift);
  if (Hp != H || Wp != W) y = crop_hw(y, H, W);
  const auto x1 = add(X, y);
  const auto mlp = p.fc2(gelu(p.fc1(p.norm2(x1))));
  return add(x1, mlp);
}

/// F + dwconv(F, D1) * D2 per channel. F is [C,H,W].
template <class T>
Tensor<T> dcl_forward(const Tensor<T>& F, const Tensor<T>& d1, const Tensor<T>& d2) {
  auto y = ops::depthwise_conv2d(F, d1);
  if (d2.defined()) y = ops::mul_channels(y, d2);
  return ops::add(F, y);
}

template <class T>
struct Modulations {
  Tensor<T> d1;  // [C,1,3,3] or undefined
  Tensor<T> d2;  // [C] or undefined
};

/// D1 = reshape(FC2(act(FC1(D)))), D2 = sigmoid(conv1x1(act(conv1x1(D expanded)))).
/// The 1x1 convolutions act on a 1x1 expansion of D, so they are affine maps
/// and D2 is constant over H x W.
template <class T>
Modulations<T> generate_modulation(const Tensor<T>& D, const DclParams<T>& p,
                                   std::int64_t channels) {
  using namespace ops;
  Modulations<T> m;
  const auto row = reshape(D, {1, D.numel()});
  if (p.has_kernel)
    m.d1 = reshape(p.kernel_fc2(leaky_relu(p.kernel_fc1(row), T(0.1))), {channels, 1, 3, 3});
  if (p.has_scale) m.d2 = reshape(sigmoid(p.scale_fc2(leaky_relu(p.scale_fc1(row), T(0.1)))), {channels});
  return m;
}

template <class T>
class DsatNet {
 public:
  explicit DsatNet(const DsatConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Initializer init(cfg_.seed);
    const auto C = cfg_.channels;
    shallow_ = make_conv<T>(params_, "shallow", cfg_.in_channels, C, 3, init);
    for (int i = 0; i < cfg_.blocks; ++i) {
      DrstbParams<T> blk;
      const auto bname = "body." + std::to_string(i);
      for (int j = 0; j < cfg_.layers; ++j) {
        const auto name = bname + ".cmt." + std::to_string(j);
        CmtParams<T> cmt;
        auto& dcl = cmt.dcl;
        const auto Dd = cfg_.degradation_dim, hid = cfg_.modulation_hidden;
        dcl.has_kernel = cfg_.dcl;
        dcl.has_scale = cfg_.dcl || cfg_.attention_weights;
        if (dcl.has_kernel) {
          dcl.kernel_fc1 = make_linear<T>(params_, name + ".dcl.kernel_fc1", Dd, hid, init);
          dcl.kernel_fc2 = make_linear<T>(params_, name + ".dcl.kernel_fc2", hid, C * 9, init);
        }
        if (dcl.has_scale) {
          dcl.scale_fc1 = make_linear<T>(params_, name + ".dcl.scale_conv1", Dd, hid, init);
          dcl.scale_fc2 = make_linear<T>(params_, name + ".dcl.scale_conv2", hid, C, init);
        }
        auto& stl = cmt.stl;
        stl.shifted = (j % 2) == 1;
        stl.norm1 = make_layer_norm<T>(params_, name + ".stl.norm1", C);
        stl.attn.qkv = make_linear<T>(params_, name + ".stl.attn.qkv", C, 3 * C, init,
                                      LinearInit::trunc_normal);
        const auto span = 2 * cfg_.window - 1;
        stl.attn.relative_bias = params_.add(
            name + ".stl.attn.relative_bias",
            make_param<T>({span * span, cfg_.heads},
                          init.trunc_normal(static_cast<std::size_t>(span * span * cfg_.heads), 0.02)));
        stl.attn.proj = make_linear<T>(params_, name + ".stl.attn.proj", C, C, init,
                                       LinearInit::trunc_normal);
        stl.norm2 = make_layer_norm<T>(params_, name + ".stl.norm2", C);
        stl.fc1 = make_linear<T>(params_, name + ".stl.mlp.fc1", C, cfg_.mlp_hidden(), init,
                                 LinearInit::trunc_normal);
        stl.fc2 = make_linear<T>(params_, name + ".stl.mlp.fc2", cfg_.mlp_hidden(), C, init,
                                 LinearInit::trunc_normal);
        blk.cmts.push_back(std::move(cmt));
      }
      blk.conv = make_conv<T>(params_, bname + ".conv", C, C, 3, init);
      blocks_.push_back(std::move(blk));
    }
    body_conv_ = make_conv<T>(params_, "body_conv", C, C, 3, init);
    for (auto step : upsample_steps(cfg_.scale)) {
      const auto name = "head.up" + std::to_string(head_convs_.size());
      head_convs_.push_back(make_conv<T>(params_, name, C, C * step * step, 3, init));
    }
    tail_ = make_conv<T>(params_, "head.last", C, cfg_.in_channels, 3, init);
  }

  /// Pixel-shuffle factors of the reconstruction head.
  static std::vector<int> upsample_steps(int scale) {
    if (scale == 4) return {2, 2};
    if (scale == 1) return {};
    return {scale};
  }

  const DsatConfig& config() const { return cfg_; }
  ParamList<T>& params() { return params_; }
  const ParamList<T>& params() const { return params_; }
  const std::vector<DrstbParams<T>>& blocks() const { return blocks_; }
  std::vector<DrstbParams<T>>& blocks() { return blocks_; }

  Tensor<T> shallow_extract(const Tensor<T>& lq) const {
    if (lq.rank() != 3 || lq.dim(0) != cfg_.in_channels)
      throw DimensionError("shallow_extract: expected [" + std::to_string(cfg_.in_channels) +
                           ",H,W], got " + to_string(lq.shape()));
    return shallow_(lq);
  }

  Tensor<T> cmt_forward(const Tensor<T>& F, const CmtParams<T>& cmt, const Tensor<T>& D,
                        const ForwardOptions<T>& opt) const {
    using namespace ops;
    const auto C = cfg_.channels;
    Tensor<T> d1, d2_dcl, d2_attn;
    bool apply_dcl = false;
    switch (opt.modulation) {
      case Modulation::learned: {
        auto m = generate_modulation(D, cmt.dcl, C);
        apply_dcl = cfg_.dcl;
        d1 = m.d1;
        if (cfg_.dcl) d2_dcl = m.d2;
        if (cfg_.attention_weights) d2_attn = m.d2;
        break;
      }
      case Modulation::identity:
        apply_dcl = true;
        d1 = Tensor<T>::zeros({C, 1, 3, 3});
        d2_dcl = d2_attn = Tensor<T>::ones({C});
        break;
      case Modulation::none:
        break;
    }
    auto x = apply_dcl ? dcl_forward(F, d1, d2_dcl) : F;
    x = stl_forward(chw_to_hwc(x), cmt.stl, d2_attn, cfg_.window, cfg_.heads, opt.attention_probe);
    return hwc_to_chw(x);
  }

  /// L CMTs, a 3x3 conv, and the block residual.
  Tensor<T> drstb_forward(const Tensor<T>& F, const DrstbParams<T>& blk, const Tensor<T>& D,
                          const ForwardOptions<T>& opt = {}) const {
    auto x = F;
    for (const auto& cmt : blk.cmts) x = cmt_forward(x, cmt, D, opt);
    return ops::add(F, blk.conv(x));
  }

  /// I_SR = H_REC(F_0 + conv(F_K)). lq is [3,H,W], D is [degradation_dim].
  Tensor<T> forward(const Tensor<T>& lq, const Tensor<T>& D, const ForwardOptions<T>& opt = {}) const {
    if (opt.modulation == Modulation::learned && D.numel() != cfg_.degradation_dim)
      throw DimensionError("forward: degradation vector has " + std::to_string(D.numel()) +
                           " entries, expected " + std::to_string(cfg_.degradation_dim));
    const auto f0 = shallow_extract(lq);
    auto f = f0;
    for (const auto& blk : blocks_) f = drstb_forward(f, blk, D, opt);
    return reconstruct(ops::add(f0, body_conv_(f)));
  }

  Tensor<T> reconstruct(const Tensor<T>& features) const {
    auto x = features;
    const auto steps = upsample_steps(cfg_.scale);
    for (std::size_t i = 0; i < steps.size(); ++i) x = ops::pixel_shuffle(head_convs_[i](x), steps[i]);
    return tail_(x);
  }

 private:
  DsatConfig cfg_;
  ParamList<T> params_;
  Conv2d<T> shallow_;
  std::vector<DrstbParams<T>> blocks_;
  Conv2d<T> body_conv_;
  std::vector<Conv2d<T>> head_convs_;
  Conv2d<T> tail_;
};

}  // namespace dsat
