#pragma once

// Differentiable operations over dsat::Tensor.
//
// Image-like tensors are channel-first [C,H,W]; transformer features are
// channel-last [H,W,C] or [tokens,C]. Matrix products go through Eigen.

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <numbers>
#include <string>

#include "dsat/tensor.hpp"

namespace dsat::ops {

namespace detail {

using dsat::detail::make_result;
using dsat::detail::Node;
using dsat::detail::parent_grad;

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using Map = Eigen::Map<RowMat<T>>;
template <class T>
using CMap = Eigen::Map<const RowMat<T>>;

template <class T>
Map<T> mat(std::vector<T>& v, std::int64_t offset, std::int64_t rows, std::int64_t cols) {
  return Map<T>(v.data() + offset, rows, cols);
}
template <class T>
CMap<T> cmat(const std::vector<T>& v, std::int64_t offset, std::int64_t rows,
             std::int64_t cols) {
  return CMap<T>(v.data() + offset, rows, cols);
}

inline void require(bool ok, const std::string& what) {
  if (!ok) throw DimensionError(what);
}

template <class T>
void add_into(std::vector<T>* dst, const std::vector<T>& src) {
  if (!dst) return;
  for (std::size_t i = 0; i < src.size(); ++i) (*dst)[i] += src[i];
}

}  // namespace detail

using detail::require;

// ---------------------------------------------------------------------------
// Elementwise arithmetic
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "add: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.vec()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "add",
                                [](detail::Node<T>& self) {
                                  detail::add_into(detail::parent_grad(self, 0), self.grad);
                                  detail::add_into(detail::parent_grad(self, 1), self.grad);
                                });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "sub: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.vec()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "sub",
                                [](detail::Node<T>& self) {
                                  detail::add_into(detail::parent_grad(self, 0), self.grad);
                                  if (auto* gb = detail::parent_grad(self, 1))
                                    for (std::size_t i = 0; i < gb->size(); ++i)
                                      (*gb)[i] -= self.grad[i];
                                });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(),
          "mul: shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(a.data().begin(), a.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.vec()[i];
  return detail::make_result<T>(a.shape(), std::move(out), {&a, &b}, "mul",
                                [](detail::Node<T>& self) {
                                  const auto& av = self.parents[0]->data;
                                  const auto& bv = self.parents[1]->data;
                                  if (auto* ga = detail::parent_grad(self, 0))
                                    for (std::size_t i = 0; i < ga->size(); ++i)
                                      (*ga)[i] += self.grad[i] * bv[i];
                                  if (auto* gb = detail::parent_grad(self, 1))
                                    for (std::size_t i = 0; i < gb->size(); ++i)
                                      (*gb)[i] += self.grad[i] * av[i];
                                });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), {&a}, "scale",
                                [factor](detail::Node<T>& self) {
                                  if (auto* g = detail::parent_grad(self, 0))
                                    for (std::size_t i = 0; i < g->size(); ++i)
                                      (*g)[i] += self.grad[i] * factor;
                                });
}

/// x[..., *b.shape] + b, with b broadcast over the leading dimensions of x.
template <class T>
Tensor<T> add_trailing(const Tensor<T>& x, const Tensor<T>& b) {
  const auto n = b.numel();
  require(x.rank() >= b.rank() &&
              std::equal(b.shape().begin(), b.shape().end(), x.shape().end() - b.rank()),
          "add_trailing: " + to_string(b.shape()) + " is not a suffix of " +
              to_string(x.shape()));
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.vec()[i % n];
  return detail::make_result<T>(x.shape(), std::move(out), {&x, &b}, "add_trailing",
                                [n](detail::Node<T>& self) {
                                  detail::add_into(detail::parent_grad(self, 0), self.grad);
                                  if (auto* gb = detail::parent_grad(self, 1))
                                    for (std::size_t i = 0; i < self.grad.size(); ++i)
                                      (*gb)[i % n] += self.grad[i];
                                });
}

/// Channel-wise multiply over the last dimension: x[..., C] * w[C].
template <class T>
Tensor<T> mul_last_dim(const Tensor<T>& x, const Tensor<T>& w) {
  const auto c = x.dim(-1);
  require(w.numel() == c, "mul_last_dim: weight has " + std::to_string(w.numel()) +
                              " entries, expected " + std::to_string(c));
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= w.vec()[i % c];
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &w}, "mul_last_dim", [c](detail::Node<T>& self) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        if (auto* gx = detail::parent_grad(self, 0))
          for (std::size_t i = 0; i < gx->size(); ++i) (*gx)[i] += self.grad[i] * wv[i % c];
        if (auto* gw = detail::parent_grad(self, 1))
          for (std::size_t i = 0; i < self.grad.size(); ++i)
            (*gw)[i % c] += self.grad[i] * xv[i];
      });
}

/// Channel-wise multiply for channel-first maps: x[C, ...] * w[C].
template <class T>
Tensor<T> mul_channels(const Tensor<T>& x, const Tensor<T>& w) {
  const auto c = x.dim(0);
  require(w.numel() == c, "mul_channels: weight has " + std::to_string(w.numel()) +
                              " entries, expected " + std::to_string(c));
  const auto plane = x.numel() / c;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t ch = 0; ch < c; ++ch)
    for (std::int64_t i = 0; i < plane; ++i) out[ch * plane + i] *= w.vec()[ch];
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &w}, "mul_channels", [c, plane](detail::Node<T>& self) {
        const auto& xv = self.parents[0]->data;
        const auto& wv = self.parents[1]->data;
        auto* gx = detail::parent_grad(self, 0);
        auto* gw = detail::parent_grad(self, 1);
        for (std::int64_t ch = 0; ch < c; ++ch) {
          T acc = 0;
          for (std::int64_t i = 0; i < plane; ++i) {
            const auto k = ch * plane + i;
            if (gx) (*gx)[k] += self.grad[k] * wv[ch];
            acc += self.grad[k] * xv[k];
          }
          if (gw) (*gw)[ch] += acc;
        }
      });
}

template <class T>
Tensor<T> sum(const Tensor<T>& x) {
  T s = 0;
  for (auto v : x.data()) s += v;
  return detail::make_result<T>({1}, {s}, {&x}, "sum", [](detail::Node<T>& self) {
    if (auto* g = detail::parent_grad(self, 0))
      for (auto& v : *g) v += self.grad[0];
  });
}

template <class T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), T(1) / static_cast<T>(x.numel()));
}

/// Mean absolute error; the subgradient at ties is 0.
template <class T>
Tensor<T> l1_loss(const Tensor<T>& a, const Tensor<T>& b) {
  require(a.shape() == b.shape(), "l1_loss: shape mismatch " + to_string(a.shape()) + " vs " +
                                      to_string(b.shape()));
  T s = 0;
  for (std::size_t i = 0; i < a.vec().size(); ++i) s += std::abs(a.vec()[i] - b.vec()[i]);
  const T inv_n = T(1) / static_cast<T>(a.numel());
  return detail::make_result<T>({1}, {s * inv_n}, {&a, &b}, "l1_loss",
                                [inv_n](detail::Node<T>& self) {
                                  const auto& av = self.parents[0]->data;
                                  const auto& bv = self.parents[1]->data;
                                  auto* ga = detail::parent_grad(self, 0);
                                  auto* gb = detail::parent_grad(self, 1);
                                  const T g = self.grad[0] * inv_n;
                                  for (std::size_t i = 0; i < av.size(); ++i) {
                                    const T d = av[i] - bv[i];
                                    const T sgn = d > 0 ? T(1) : (d < 0 ? T(-1) : T(0));
                                    if (ga) (*ga)[i] += g * sgn;
                                    if (gb) (*gb)[i] -= g * sgn;
                                  }
                                });
}

// ---------------------------------------------------------------------------
// Activations
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> sigmoid(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v >= 0 ? T(1) / (T(1) + std::exp(-v)) : std::exp(v) / (T(1) + std::exp(v));
  auto result = detail::make_result<T>(x.shape(), std::move(out), {&x}, "sigmoid", nullptr);
  if (result.requires_grad()) {
    // The closure reads the output through the node itself.
    result.node()->backward = [](detail::Node<T>& self) {
      if (auto* g = detail::parent_grad(self, 0))
        for (std::size_t i = 0; i < g->size(); ++i) {
          const T y = self.data[i];
          (*g)[i] += self.grad[i] * y * (T(1) - y);
        }
    };
  }
  return result;
}

/// Exact (erf-based) GELU.
template <class T>
Tensor<T> gelu(const Tensor<T>& x) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = T(0.5) * v * (T(1) + std::erf(v * inv_sqrt2));
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x}, "gelu", [](detail::Node<T>& self) {
        constexpr T inv_sqrt2 = T(0.70710678118654752440);
        constexpr T inv_sqrt_2pi = T(0.39894228040143267794);
        const auto& xv = self.parents[0]->data;
        if (auto* g = detail::parent_grad(self, 0))
          for (std::size_t i = 0; i < g->size(); ++i) {
            const T v = xv[i];
            const T cdf = T(0.5) * (T(1) + std::erf(v * inv_sqrt2));
            const T pdf = inv_sqrt_2pi * std::exp(T(-0.5) * v * v);
            (*g)[i] += self.grad[i] * (cdf + v * pdf);
          }
      });
}

template <class T>
Tensor<T> leaky_relu(const Tensor<T>& x, T slope = T(0.1)) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (auto& v : out) v = v > 0 ? v : v * slope;
  return detail::make_result<T>(x.shape(), std::move(out), {&x}, "leaky_relu",
                                [slope](detail::Node<T>& self) {
                                  const auto& xv = self.parents[0]->data;
                                  if (auto* g = detail::parent_grad(self, 0))
                                    for (std::size_t i = 0; i < g->size(); ++i)
                                      (*g)[i] += self.grad[i] * (xv[i] > 0 ? T(1) : slope);
                                });
}

/// Softmax over the last dimension, stabilised by max subtraction.
template <class T>
Tensor<T> softmax(const Tensor<T>& x) {
  const auto n = x.dim(-1);
  const auto rows = x.numel() / n;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = out.data() + r * n;
    const T mx = *std::max_element(row, row + n);
    T z = 0;
    for (std::int64_t i = 0; i < n; ++i) z += (row[i] = std::exp(row[i] - mx));
    const T inv = T(1) / z;
    for (std::int64_t i = 0; i < n; ++i) row[i] *= inv;
  }
  auto result = detail::make_result<T>(x.shape(), std::move(out), {&x}, "softmax", nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [n, rows](detail::Node<T>& self) {
      auto* g = detail::parent_grad(self, 0);
      if (!g) return;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * n;
        const T* dy = self.grad.data() + r * n;
        T dot = 0;
        for (std::int64_t i = 0; i < n; ++i) dot += y[i] * dy[i];
        for (std::int64_t i = 0; i < n; ++i) (*g)[r * n + i] += y[i] * (dy[i] - dot);
      }
    };
  }
  return result;
}

/// LayerNorm over the last dimension with population variance.
template <class T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta,
                     T eps = T(1e-5)) {
  const auto d = x.dim(-1);
  require(d >= 2, "layer_norm: normalised dimension must be >= 2");
  require(gamma.numel() == d && beta.numel() == d,
          "layer_norm: affine parameters must have " + std::to_string(d) + " entries");
  const auto rows = x.numel() / d;
  std::vector<T> xhat(x.data().begin(), x.data().end());
  std::vector<T> rstd(static_cast<std::size_t>(rows));
  std::vector<T> out(xhat.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    T* row = xhat.data() + r * d;
    T mu = 0;
    for (std::int64_t i = 0; i < d; ++i) mu += row[i];
    mu /= static_cast<T>(d);
    T var = 0;
    for (std::int64_t i = 0; i < d; ++i) var += (row[i] - mu) * (row[i] - mu);
    var /= static_cast<T>(d);
    const T rs = T(1) / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::int64_t i = 0; i < d; ++i) {
      row[i] = (row[i] - mu) * rs;
      out[r * d + i] = row[i] * gamma.vec()[i] + beta.vec()[i];
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), {&x, &gamma, &beta}, "layer_norm",
      [d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](detail::Node<T>& self) {
        const auto& gv = self.parents[1]->data;
        auto* gx = detail::parent_grad(self, 0);
        auto* gg = detail::parent_grad(self, 1);
        auto* gb = detail::parent_grad(self, 2);
        std::vector<T> dxhat(static_cast<std::size_t>(d));
        for (std::int64_t r = 0; r < rows; ++r) {
          const T* dy = self.grad.data() + r * d;
          const T* xh = xhat.data() + r * d;
          T m1 = 0, m2 = 0;
          for (std::int64_t i = 0; i < d; ++i) {
            if (gg) (*gg)[i] += dy[i] * xh[i];
            if (gb) (*gb)[i] += dy[i];
            dxhat[i] = dy[i] * gv[i];
            m1 += dxhat[i];
            m2 += dxhat[i] * xh[i];
          }
          if (!gx) continue;
          m1 /= static_cast<T>(d);
          m2 /= static_cast<T>(d);
          for (std::int64_t i = 0; i < d; ++i)
            (*gx)[r * d + i] += rstd[r] * (dxhat[i] - m1 - xh[i] * m2);
        }
      });
}

/// x / ||x||_2 over the last dimension.
template <class T>
Tensor<T> l2_normalize(const Tensor<T>& x, T eps = T(1e-12)) {
  const auto d = x.dim(-1);
  const auto rows = x.numel() / d;
  std::vector<T> out(x.data().begin(), x.data().end());
  std::vector<T> norms(static_cast<std::size_t>(rows));
  for (std::int64_t r = 0; r < rows; ++r) {
    T s = 0;
    for (std::int64_t i = 0; i < d; ++i) s += out[r * d + i] * out[r * d + i];
    norms[r] = std::max(std::sqrt(s), eps);
    for (std::int64_t i = 0; i < d; ++i) out[r * d + i] /= norms[r];
  }
  auto result = detail::make_result<T>(x.shape(), std::move(out), {&x}, "l2_normalize", nullptr);
  if (result.requires_grad()) {
    result.node()->backward = [d, rows, norms = std::move(norms)](detail::Node<T>& self) {
      auto* g = detail::parent_grad(self, 0);
      if (!g) return;
      for (std::int64_t r = 0; r < rows; ++r) {
        const T* y = self.data.data() + r * d;
        const T* dy = self.grad.data() + r * d;
        T dot = 0;
        for (std::int64_t i = 0; i < d; ++i) dot += y[i] * dy[i];
        for (std::int64_t i = 0; i < d; ++i) (*g)[r * d + i] += (dy[i] - y[i] * dot) / norms[r];
      }
    };
  }
  return result;
}

// ---------------------------------------------------------------------------
// Affine maps and convolutions
// ---------------------------------------------------------------------------

/// y = x W + b applied over the last dimension; W is [d_in, d_out].
/// An undefined bias means no bias.
template <class T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  require(weight.rank() == 2, "linear: weight must be rank 2, got " + to_string(weight.shape()));
  const auto din = weight.dim(0), dout = weight.dim(1);
  require(x.dim(-1) == din, "linear: input trailing dim " + std::to_string(x.dim(-1)) +
                                " does not match weight " + to_string(weight.shape()));
  require(!bias.defined() || bias.numel() == dout,
          "linear: bias has " + (bias.defined() ? std::to_string(bias.numel()) : "0") +
              " entries, expected " + std::to_string(dout));
  const auto rows = x.numel() / din;
  Shape out_shape = x.shape();
  out_shape.back() = dout;
  std::vector<T> out(static_cast<std::size_t>(rows * dout));
  auto Y = detail::mat(out, 0, rows, dout);
  Y.noalias() = detail::cmat(x.vec(), 0, rows, din) * detail::cmat(weight.vec(), 0, din, dout);
  if (bias.defined())
    for (std::int64_t r = 0; r < rows; ++r)
      for (std::int64_t j = 0; j < dout; ++j) out[r * dout + j] += bias.vec()[j];
  return detail::make_result<T>(
      std::move(out_shape), std::move(out), {&x, &weight, &bias}, "linear",
      [rows, din, dout](detail::Node<T>& self) {
        auto dY = detail::cmat(self.grad, 0, rows, dout);
        if (auto* gx = detail::parent_grad(self, 0))
          detail::mat(*gx, 0, rows, din).noalias() +=
              dY * detail::cmat(self.parents[1]->data, 0, din, dout).transpose();
        if (auto* gw = detail::parent_grad(self, 1))
          detail::mat(*gw, 0, din, dout).noalias() +=
              detail::cmat(self.parents[0]->data, 0, rows, din).transpose() * dY;
        if (auto* gb = detail::parent_grad(self, 2))
          for (std::int64_t r = 0; r < rows; ++r)
            for (std::int64_t j = 0; j < dout; ++j) (*gb)[j] += self.grad[r * dout + j];
      });
}

/// Batched matrix product: a[B,n,k] x b[B,k,m] (or b[B,m,k] transposed).
template <class T>
Tensor<T> bmm(const Tensor<T>& a, const Tensor<T>& b, bool transpose_b = false) {
  require(a.rank() == 3 && b.rank() == 3 && a.dim(0) == b.dim(0),
          "bmm: expected matching rank-3 operands, got " + to_string(a.shape()) + " and " +
              to_string(b.shape()));
  const auto B = a.dim(0), n = a.dim(1), k = a.dim(2);
  const auto m = transpose_b ? b.dim(1) : b.dim(2);
  require((transpose_b ? b.dim(2) : b.dim(1)) == k,
          "bmm: inner dimensions differ: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
  std::vector<T> out(static_cast<std::size_t>(B * n * m));
  for (std::int64_t i = 0; i < B; ++i) {
    auto A = detail::cmat(a.vec(), i * n * k, n, k);
    auto C = detail::mat(out, i * n * m, n, m);
    if (transpose_b)
      C.noalias() = A * detail::cmat(b.vec(), i * m * k, m, k).transpose();
    else
      C.noalias() = A * detail::cmat(b.vec(), i * k * m, k, m);
  }
  return detail::make_result<T>(
      {B, n, m}, std::move(out), {&a, &b}, "bmm", [B, n, k, m, transpose_b](detail::Node<T>& self) {
        const auto& av = self.parents[0]->data;
        const auto& bv = self.parents[1]->data;
        auto* ga = detail::parent_grad(self, 0);
        auto* gb = detail::parent_grad(self, 1);
        for (std::int64_t i = 0; i < B; ++i) {
          auto dC = detail::cmat(self.grad, i * n * m, n, m);
          if (transpose_b) {
            auto Bm = detail::cmat(bv, i * m * k, m, k);
            if (ga) detail::mat(*ga, i * n * k, n, k).noalias() += dC * Bm;
            if (gb)
              detail::mat(*gb, i * m * k, m, k).noalias() +=
                  dC.transpose() * detail::cmat(av, i * n * k, n, k);
          } else {
            auto Bm = detail::cmat(bv, i * k * m, k, m);
            if (ga) detail::mat(*ga, i * n * k, n, k).noalias() += dC * Bm.transpose();
            if (gb)
              detail::mat(*gb, i * k * m, k, m).noalias() +=
                  detail::cmat(av, i * n * k, n, k).transpose() * dC;
          }
        }
      });
}

namespace detail {

struct ConvGeometry {
  std::int64_t c, h, w, k, stride, pad, ho, wo;
};

// cols[(c*k + ky)*k + kx, oy*wo + ox] = input[c, oy*s + ky - p, ox*s + kx - p] (0 outside).
template <class T>
void im2col(const std::vector<T>& in, const ConvGeometry& g, std::vector<T>& cols) {
  const auto hw = g.ho * g.wo;
  cols.assign(static_cast<std::size_t>(g.c * g.k * g.k * hw), T(0));
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        T* dst = cols.data() + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          const T* src = in.data() + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[oy * g.wo + ox] = src[ix];
          }
        }
      }
}

template <class T>
void col2im_add(const std::vector<T>& cols, const ConvGeometry& g, std::vector<T>& in_grad) {
  const auto hw = g.ho * g.wo;
  for (std::int64_t c = 0; c < g.c; ++c)
    for (std::int64_t ky = 0; ky < g.k; ++ky)
      for (std::int64_t kx = 0; kx < g.k; ++kx) {
        const T* src = cols.data() + ((c * g.k + ky) * g.k + kx) * hw;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const auto iy = oy * g.stride + ky - g.pad;
          if (iy < 0 || iy >= g.h) continue;
          T* dst = in_grad.data() + (c * g.h + iy) * g.w;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const auto ix = ox * g.stride + kx - g.pad;
            if (ix >= 0 && ix < g.w) dst[ix] += src[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace detail

/// Zero-padded 2-D cross-correlation. input [C_in,H,W], weight [C_out,C_in,k,k].
template <class T>
Tensor<T> conv2d(const Tensor<T>& input, const Tensor<T>& weight, const Tensor<T>& bias,
                 std::int64_t padding, std::int64_t stride = 1) {
  require(input.rank() == 3, "conv2d: input must be [C,H,W], got " + to_string(input.shape()));
  require(weight.rank() == 4 && weight.dim(2) == weight.dim(3),
          "conv2d: weight must be [C_out,C_in,k,k], got " + to_string(weight.shape()));
  require(weight.dim(1) == input.dim(0),
          "conv2d: weight expects " + std::to_string(weight.dim(1)) + " input channels, got " +
              std::to_string(input.dim(0)));
  const auto cout = weight.dim(0);
  require(!bias.defined() || bias.numel() == cout, "conv2d: bias length mismatch");
  detail::ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), weight.dim(2), stride, padding,
                         0, 0};
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  require(g.ho > 0 && g.wo > 0, "conv2d: kernel larger than padded input");
  const auto kk = g.c * g.k * g.k, hw = g.ho * g.wo;

  std::vector<T> cols;
  detail::im2col(input.vec(), g, cols);
  std::vector<T> out(static_cast<std::size_t>(cout * hw));
  detail::mat(out, 0, cout, hw).noalias() =
      detail::cmat(weight.vec(), 0, cout, kk) * detail::cmat(cols, 0, kk, hw);
  if (bias.defined())
    for (std::int64_t o = 0; o < cout; ++o)
      for (std::int64_t i = 0; i < hw; ++i) out[o * hw + i] += bias.vec()[o];

  return detail::make_result<T>(
      {cout, g.ho, g.wo}, std::move(out), {&input, &weight, &bias}, "conv2d",
      [g, cout, kk, hw, cols = std::move(cols)](detail::Node<T>& self) {
        auto dY = detail::cmat(self.grad, 0, cout, hw);
        if (auto* gw = detail::parent_grad(self, 1))
          detail::mat(*gw, 0, cout, kk).noalias() += dY * detail::cmat(cols, 0, kk, hw).transpose();
        if (auto* gb = detail::parent_grad(self, 2))
          for (std::int64_t o = 0; o < cout; ++o)
            for (std::int64_t i = 0; i < hw; ++i) (*gb)[o] += self.grad[o * hw + i];
        if (auto* gx = detail::parent_grad(self, 0)) {
          std::vector<T> dcols(static_cast<std::size_t>(kk * hw));
          detail::mat(dcols, 0, kk, hw).noalias() =
              detail::cmat(self.parents[1]->data, 0, cout, kk).transpose() * dY;
          detail::col2im_add(dcols, g, *gx);
        }
      });
}

/// Per-channel 3x3 convolution with zero padding 1; weight is [C,1,3,3].
template <class T>
Tensor<T> depthwise_conv2d(const Tensor<T>& input, const Tensor<T>& weight) {
  require(input.rank() == 3, "depthwise_conv2d: input must be [C,H,W]");
  const auto C = input.dim(0), H = input.dim(1), W = input.dim(2);
  require(weight.shape() == Shape{C, 1, 3, 3},
          "depthwise_conv2d: weight must be " + to_string({C, 1, 3, 3}) + ", got " +
              to_string(weight.shape()));
  const auto& x = input.vec();
  const auto& k = weight.vec();
  std::vector<T> out(x.size(), T(0));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t ky = 0; ky < 3; ++ky)
      for (std::int64_t kx = 0; kx < 3; ++kx) {
        const T wv = k[c * 9 + ky * 3 + kx];
        for (std::int64_t y = 0; y < H; ++y) {
          const auto iy = y + ky - 1;
          if (iy < 0 || iy >= H) continue;
          const auto x0 = std::max<std::int64_t>(0, 1 - kx);
          const auto x1 = std::min<std::int64_t>(W, W + 1 - kx);
          const T* src = x.data() + (c * H + iy) * W + kx - 1;
          T* dst = out.data() + (c * H + y) * W;
          for (std::int64_t xx = x0; xx < x1; ++xx) dst[xx] += wv * src[xx];
        }
      }
  return detail::make_result<T>(
      input.shape(), std::move(out), {&input, &weight}, "depthwise_conv2d",
      [C, H, W](detail::Node<T>& self) {
        const auto& xv = self.parents[0]->data;
        const auto& kv = self.parents[1]->data;
        auto* gx = detail::parent_grad(self, 0);
        auto* gk = detail::parent_grad(self, 1);
        for (std::int64_t c = 0; c < C; ++c)
          for (std::int64_t ky = 0; ky < 3; ++ky)
            for (std::int64_t kx = 0; kx < 3; ++kx) {
              const T wv = kv[c * 9 + ky * 3 + kx];
              T acc = 0;
              for (std::int64_t y = 0; y < H; ++y) {
                const auto iy = y + ky - 1;
                if (iy < 0 || iy >= H) continue;
                const auto x0 = std::max<std::int64_t>(0, 1 - kx);
                const auto x1 = std::min<std::int64_t>(W, W + 1 - kx);
                const auto src = (c * H + iy) * W + kx - 1;
                const T* dy = self.grad.data() + (c * H + y) * W;
                for (std::int64_t xx = x0; xx < x1; ++xx) {
                  acc += dy[xx] * xv[src + xx];
                  if (gx) (*gx)[src + xx] += dy[xx] * wv;
                }
              }
              if (gk) (*gk)[c * 9 + ky * 3 + kx] += acc;
            }
      });
}

/// Mean over the spatial dims of [C,H,W] -> [C].
template <class T>
Tensor<T> global_avg_pool(const Tensor<T>& x) {
  require(x.rank() == 3, "global_avg_pool: input must be [C,H,W]");
  const auto C = x.dim(0), plane = x.dim(1) * x.dim(2);
  std::vector<T> out(static_cast<std::size_t>(C), T(0));
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < plane; ++i) out[c] += x.vec()[c * plane + i];
    out[c] /= static_cast<T>(plane);
  }
  return detail::make_result<T>({C}, std::move(out), {&x}, "global_avg_pool",
                                [C, plane](detail::Node<T>& self) {
                                  if (auto* g = detail::parent_grad(self, 0))
                                    for (std::int64_t c = 0; c < C; ++c) {
                                      const T v = self.grad[c] / static_cast<T>(plane);
                                      for (std::int64_t i = 0; i < plane; ++i)
                                        (*g)[c * plane + i] += v;
                                    }
                                });
}

// ---------------------------------------------------------------------------
// Layout: reshape, permute, slicing, gathers
// ---------------------------------------------------------------------------

template <class T>
Tensor<T> reshape(const Tensor<T>& x, Shape shape) {
  check_shape(shape);
  require(numel(shape) == x.numel(),
          "reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  return detail::make_result<T>(std::move(shape), x.vec(), {&x}, "reshape",
                                [](detail::Node<T>& self) {
                                  detail::add_into(detail::parent_grad(self, 0), self.grad);
                                });
}

namespace detail {

// Index map of a permutation: src_index[i] is the input offset of output element i.
inline std::vector<std::int64_t> permute_index(const Shape& in, const std::vector<int>& perm,
                                               Shape& out_shape) {
  const auto r = in.size();
  out_shape.assign(r, 0);
  std::vector<std::int64_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i > 0; --i) in_strides[i - 1] = in_strides[i] * in[i];
  std::vector<std::int64_t> strides(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = in[static_cast<std::size_t>(perm[i])];
    strides[i] = in_strides[static_cast<std::size_t>(perm[i])];
  }
  std::vector<std::int64_t> index(static_cast<std::size_t>(numel(in)));
  std::vector<std::int64_t> counter(r, 0);
  std::int64_t offset = 0;
  for (auto& idx : index) {
    idx = offset;
    for (std::size_t d = r; d-- > 0;) {
      offset += strides[d];
      if (++counter[d] < out_shape[d]) break;
      offset -= strides[d] * out_shape[d];
      counter[d] = 0;
    }
  }
  return index;
}

template <class T>
Tensor<T> gather(const Tensor<T>& x, Shape out_shape, std::vector<std::int64_t> index,
                 const char* op) {
  std::vector<T> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) out[i] = x.vec()[static_cast<std::size_t>(index[i])];
  return make_result<T>(std::move(out_shape), std::move(out), {&x}, op,
                        [index = std::move(index)](Node<T>& self) {
                          if (auto* g = parent_grad(self, 0))
                            for (std::size_t i = 0; i < index.size(); ++i)
                              (*g)[static_cast<std::size_t>(index[i])] += self.grad[i];
                        });
}

}  // namespace detail

template <class T>
Tensor<T> permute(const Tensor<T>& x, const std::vector<int>& perm) {
  require(static_cast<std::int64_t>(perm.size()) == x.rank(), "permute: rank mismatch");
  Shape out_shape;
  auto index = detail::permute_index(x.shape(), perm, out_shape);
  return detail::gather(x, std::move(out_shape), std::move(index), "permute");
}

/// [C,H,W] <-> [H,W,C]
template <class T>
Tensor<T> chw_to_hwc(const Tensor<T>& x) {
  return permute(x, {1, 2, 0});
}
template <class T>
Tensor<T> hwc_to_chw(const Tensor<T>& x) {
  return permute(x, {2, 0, 1});
}

/// Columns [start, start+len) of the last dimension.
template <class T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t start, std::int64_t len) {
  const auto d = x.dim(-1);
  require(start >= 0 && len > 0 && start + len <= d, "slice_last: range out of bounds");
  const auto rows = x.numel() / d;
  Shape out_shape = x.shape();
  out_shape.back() = len;
  std::vector<std::int64_t> index(static_cast<std::size_t>(rows * len));
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::int64_t j = 0; j < len; ++j) index[r * len + j] = r * d + start + j;
  return detail::gather(x, std::move(out_shape), std::move(index), "slice_last");
}

/// Rows of a [R, C] table selected by `rows` -> [rows.size(), C].
template <class T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int64_t>& rows) {
  require(table.rank() == 2, "gather_rows: table must be rank 2");
  const auto c = table.dim(1);
  std::vector<std::int64_t> index(rows.size() * static_cast<std::size_t>(c));
  for (std::size_t i = 0; i < rows.size(); ++i) {
    require(rows[i] >= 0 && rows[i] < table.dim(0), "gather_rows: row index out of range");
    for (std::int64_t j = 0; j < c; ++j) index[i * c + j] = rows[i] * c + j;
  }
  return detail::gather(table, {static_cast<std::int64_t>(rows.size()), c}, std::move(index),
                        "gather_rows");
}

// ---------------------------------------------------------------------------
// Super-resolution specific rearrangements
// ---------------------------------------------------------------------------

/// [C*s*s, H, W] -> [C, H*s, W*s]; out[c, y*s+i, x*s+j] = in[c*s*s + i*s + j, y, x].
template <class T>
Tensor<T> pixel_shuffle(const Tensor<T>& x, std::int64_t s) {
  require(x.rank() == 3, "pixel_shuffle: input must be [C,H,W]");
  require(s >= 1 && x.dim(0) % (s * s) == 0,
          "pixel_shuffle: " + std::to_string(x.dim(0)) + " channels not divisible by " +
              std::to_string(s * s));
  const auto C = x.dim(0) / (s * s), H = x.dim(1), W = x.dim(2);
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t oy = 0; oy < H * s; ++oy)
      for (std::int64_t ox = 0; ox < W * s; ++ox) {
        const auto in_c = c * s * s + (oy % s) * s + (ox % s);
        index[(c * H * s + oy) * W * s + ox] = (in_c * H + oy / s) * W + ox / s;
      }
  return detail::gather(x, {C, H * s, W * s}, std::move(index), "pixel_shuffle");
}

/// Inverse of pixel_shuffle: [C, H*s, W*s] -> [C*s*s, H, W].
template <class T>
Tensor<T> pixel_unshuffle(const Tensor<T>& x, std::int64_t s) {
  require(x.rank() == 3, "pixel_unshuffle: input must be [C,H,W]");
  require(s >= 1 && x.dim(1) % s == 0 && x.dim(2) % s == 0,
          "pixel_unshuffle: spatial dims not divisible by " + std::to_string(s));
  const auto C = x.dim(0), H = x.dim(1) / s, W = x.dim(2) / s;
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  for (std::int64_t c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < s; ++i)
      for (std::int64_t j = 0; j < s; ++j)
        for (std::int64_t y = 0; y < H; ++y)
          for (std::int64_t xx = 0; xx < W; ++xx)
            index[(((c * s + i) * s + j) * H + y) * W + xx] =
                (c * H * s + y * s + i) * W * s + xx * s + j;
  return detail::gather(x, {C * s * s, H, W}, std::move(index), "pixel_unshuffle");
}

/// [H,W,C] -> [HW/M^2, M^2, C]; windows in row-major order over the window grid.
template <class T>
Tensor<T> window_partition(const Tensor<T>& x, std::int64_t M) {
  require(x.rank() == 3, "window_partition: input must be [H,W,C]");
  const auto H = x.dim(0), W = x.dim(1), C = x.dim(2);
  require(M > 0 && H % M == 0 && W % M == 0,
          "window_partition: " + std::to_string(H) + "x" + std::to_string(W) +
              " is not divisible by window " + std::to_string(M));
  const auto nw = W / M;
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  std::size_t o = 0;
  for (std::int64_t wy = 0; wy < H / M; ++wy)
    for (std::int64_t wx = 0; wx < nw; ++wx)
      for (std::int64_t iy = 0; iy < M; ++iy)
        for (std::int64_t ix = 0; ix < M; ++ix)
          for (std::int64_t c = 0; c < C; ++c)
            index[o++] = ((wy * M + iy) * W + wx * M + ix) * C + c;
  return detail::gather(x, {(H / M) * nw, M * M, C}, std::move(index), "window_partition");
}

/// Inverse of window_partition for an H x W map.
template <class T>
Tensor<T> window_reverse(const Tensor<T>& windows, std::int64_t M, std::int64_t H,
                         std::int64_t W) {
  require(windows.rank() == 3 && windows.dim(1) == M * M && H % M == 0 && W % M == 0 &&
              windows.dim(0) == (H / M) * (W / M),
          "window_reverse: " + to_string(windows.shape()) + " does not tile " +
              std::to_string(H) + "x" + std::to_string(W));
  const auto C = windows.dim(2), nw = W / M;
  std::vector<std::int64_t> index(static_cast<std::size_t>(windows.numel()));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t xx = 0; xx < W; ++xx) {
      const auto w = (y / M) * nw + xx / M;
      const auto t = (y % M) * M + xx % M;
      for (std::int64_t c = 0; c < C; ++c) index[(y * W + xx) * C + c] = (w * M * M + t) * C + c;
    }
  return detail::gather(windows, {H, W, C}, std::move(index), "window_reverse");
}

/// Toroidal roll of [H,W,C]: out[(y+dy) mod H, (x+dx) mod W] = in[y, x].
template <class T>
Tensor<T> cyclic_shift(const Tensor<T>& x, std::int64_t dy, std::int64_t dx) {
  require(x.rank() == 3, "cyclic_shift: input must be [H,W,C]");
  const auto H = x.dim(0), W = x.dim(1), C = x.dim(2);
  const auto mod = [](std::int64_t a, std::int64_t m) { return ((a % m) + m) % m; };
  std::vector<std::int64_t> index(static_cast<std::size_t>(x.numel()));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t xx = 0; xx < W; ++xx) {
      const auto sy = mod(y - dy, H), sx = mod(xx - dx, W);
      for (std::int64_t c = 0; c < C; ++c) index[(y * W + xx) * C + c] = (sy * W + sx) * C + c;
    }
  return detail::gather(x, x.shape(), std::move(index), "cyclic_shift");
}

/// Reflect-pads [H,W,C] at the bottom and right (mirror without edge repeat).
template <class T>
Tensor<T> pad_reflect_hw(const Tensor<T>& x, std::int64_t pad_h, std::int64_t pad_w) {
  require(x.rank() == 3, "pad_reflect_hw: input must be [H,W,C]");
  const auto H = x.dim(0), W = x.dim(1), C = x.dim(2);
  require(pad_h >= 0 && pad_w >= 0 && pad_h < H && pad_w < W,
          "pad_reflect_hw: padding must be smaller than the input");
  const auto reflect = [](std::int64_t i, std::int64_t n) { return i < n ? i : 2 * (n - 1) - i; };
  const auto Ho = H + pad_h, Wo = W + pad_w;
  std::vector<std::int64_t> index(static_cast<std::size_t>(Ho * Wo * C));
  for (std::int64_t y = 0; y < Ho; ++y)
    for (std::int64_t xx = 0; xx < Wo; ++xx)
      for (std::int64_t c = 0; c < C; ++c)
        index[(y * Wo + xx) * C + c] = (reflect(y, H) * W + reflect(xx, W)) * C + c;
  return detail::gather(x, {Ho, Wo, C}, std::move(index), "pad_reflect_hw");
}

/// Top-left H x W crop of [H',W',C].
template <class T>
Tensor<T> crop_hw(const Tensor<T>& x, std::int64_t H, std::int64_t W) {
  require(x.rank() == 3 && H <= x.dim(0) && W <= x.dim(1), "crop_hw: crop exceeds input");
  const auto Wi = x.dim(1), C = x.dim(2);
  std::vector<std::int64_t> index(static_cast<std::size_t>(H * W * C));
  for (std::int64_t y = 0; y < H; ++y)
    for (std::int64_t xx = 0; xx < W; ++xx)
      for (std::int64_t c = 0; c < C; ++c) index[(y * W + xx) * C + c] = (y * Wi + xx) * C + c;
  return detail::gather(x, {H, W, C}, std::move(index), "crop_hw");
}

}  // namespace dsat::ops
