#pragma once

// Degradation representation learning: a small conv encoder trained with a
// momentum-contrast objective against a queue of key embeddings.

#include <cmath>
#include <cstdint>
#include <deque>
#include <random>
#include <string>
#include <vector>

#include "dsat/layers.hpp"
#include "dsat/ops.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

struct EncoderConfig {
  std::vector<int> widths{64, 64, 128, 128, 256, 256};
  std::vector<int> strides{1, 1, 2, 1, 2, 1};
  int in_channels = 3;
  int patch = 48;
  int dim = 256;
  std::uint64_t seed = 1;

  void validate() const {
    if (widths.size() != strides.size() || widths.empty())
      throw ConfigError("encoder: widths and strides must be non-empty and equally long");
    for (int w : widths)
      if (w <= 0) throw ConfigError("encoder: widths must be positive");
    for (int s : strides)
      if (s != 1 && s != 2) throw ConfigError("encoder: strides must be 1 or 2");
    if (patch <= 0 || dim <= 0) throw ConfigError("encoder: patch and dim must be positive");
  }

  static EncoderConfig full() { return {}; }

  static EncoderConfig desk(int patch) {
    EncoderConfig c;
    c.widths = {16, 16, 32, 32, 64, 64};
    c.patch = patch;
    return c;
  }
};

/// theta_k <- m * theta_k + (1 - m) * theta_q, elementwise.
template <class T>
void momentum_update(const ParamList<T>& query, ParamList<T>& key, double m) {
  if (m < 0.0 || m > 1.0) throw ParameterError("momentum_update: m must lie in [0,1]");
  if (query.size() != key.size())
    throw DimensionError("momentum_update: parameter sets differ in length");
  for (std::size_t i = 0; i < key.size(); ++i) {
    const auto& q = query.items()[i].tensor;
    auto& k = key.items()[i].tensor;
    if (q.shape() != k.shape())
      throw DimensionError("momentum_update: shape mismatch at " + key.items()[i].name);
    auto kd = k.mutable_data();
    const auto qd = q.data();
    if (m == 1.0) continue;
    if (m == 0.0) {
      std::copy(qd.begin(), qd.end(), kd.begin());
      continue;
    }
    const T mk = static_cast<T>(m), mq = static_cast<T>(1.0 - m);
    for (std::size_t j = 0; j < kd.size(); ++j) kd[j] = mk * kd[j] + mq * qd[j];
  }
}

template <class T>
struct EncoderOutput {
  Tensor<T> representation;  // D: pre-normalisation vector fed to the SR network
  Tensor<T> embedding;       // unit-norm vector used by the contrastive loss
};

template <class T>
class DegradationEncoder {
 public:
  explicit DegradationEncoder(const EncoderConfig& cfg) : cfg_(cfg) {
    cfg_.validate();
    Initializer init(cfg_.seed);
    int cin = cfg_.in_channels;
    for (std::size_t i = 0; i < cfg_.widths.size(); ++i) {
      convs_.push_back(make_conv<T>(params_, "conv" + std::to_string(i), cin, cfg_.widths[i], 3,
                                    init, cfg_.strides[i], ConvInit::kaiming_leaky));
      cin = cfg_.widths[i];
    }
    fc1_ = make_linear<T>(params_, "mlp.fc1", cin, cfg_.dim, init, LinearInit::kaiming_leaky);
    fc2_ = make_linear<T>(params_, "mlp.fc2", cfg_.dim, cfg_.dim, init);
  }

  const EncoderConfig& config() const { return cfg_; }
  ParamList<T>& params() { return params_; }
  const ParamList<T>& params() const { return params_; }

  EncoderOutput<T> encode(const Tensor<T>& patch) const {
    // Global pooling makes any spatial extent valid; `patch` is the training crop.
    if (patch.rank() != 3 || patch.dim(0) != cfg_.in_channels)
      throw DimensionError("encode: expected [" + std::to_string(cfg_.in_channels) + ",H,W], got " +
                           to_string(patch.shape()));
    auto x = patch;
    for (const auto& c : convs_) x = ops::leaky_relu(c(x), T(0.1));
    auto h = ops::reshape(ops::global_avg_pool(x), {1, static_cast<std::int64_t>(cfg_.widths.back())});
    auto d = ops::reshape(fc2_(ops::leaky_relu(fc1_(h), T(0.1))), {cfg_.dim});
    return {d, ops::l2_normalize(d)};
  }

  /// Copies all weights from a congruent encoder (key encoder initialisation).
  void copy_from(const DegradationEncoder& other) { dsat::momentum_update(other.params_, params_, 0.0); }

 private:
  EncoderConfig cfg_;
  ParamList<T> params_;
  std::vector<Conv2d<T>> convs_;
  Linear<T> fc1_, fc2_;
};

/// Ring buffer of unit-norm key embeddings; oldest entries are evicted first.
class MomentumQueue {
 public:
  MomentumQueue(std::size_t capacity, std::size_t dim) : capacity_(capacity), dim_(dim) {
    if (capacity == 0 || dim == 0) throw ParameterError("MomentumQueue: capacity and dim must be positive");
  }

  /// Fills the queue with random unit vectors.
  void fill_random(std::mt19937_64& rng) {
    std::normal_distribution<double> n(0.0, 1.0);
    entries_.clear();
    for (std::size_t i = 0; i < capacity_; ++i) {
      std::vector<float> v(dim_);
      double s = 0;
      for (auto& x : v) {
        x = static_cast<float>(n(rng));
        s += double(x) * x;
      }
      const double inv = 1.0 / std::sqrt(s);
      for (auto& x : v) x = static_cast<float>(x * inv);
      entries_.push_back(std::move(v));
    }
  }

  void enqueue(const std::vector<float>& embedding) {
    if (embedding.size() != dim_) throw DimensionError("enqueue: embedding dimension mismatch");
    entries_.push_back(embedding);
    while (entries_.size() > capacity_) entries_.pop_front();
  }

  template <class T>
  void enqueue(const Tensor<T>& embedding) {
    enqueue(std::vector<float>(embedding.data().begin(), embedding.data().end()));
  }

  std::size_t size() const { return entries_.size(); }
  std::size_t capacity() const { return capacity_; }
  std::size_t dim() const { return dim_; }
  const std::deque<std::vector<float>>& entries() const { return entries_; }

  /// Oldest-first row-major [size, dim] copy.
  template <class T>
  std::vector<T> matrix() const {
    std::vector<T> out;
    out.reserve(entries_.size() * dim_);
    for (const auto& e : entries_) out.insert(out.end(), e.begin(), e.end());
    return out;
  }

  void assign(const std::vector<float>& flat, std::size_t count) {
    if (flat.size() != count * dim_ || count > capacity_)
      throw DimensionError("MomentumQueue::assign: inconsistent contents");
    entries_.clear();
    for (std::size_t i = 0; i < count; ++i)
      entries_.emplace_back(flat.begin() + static_cast<std::ptrdiff_t>(i * dim_),
                            flat.begin() + static_cast<std::ptrdiff_t>((i + 1) * dim_));
  }

 private:
  std::size_t capacity_, dim_;
  std::deque<std::vector<float>> entries_;
};

/// Contrastive degradation loss summed over the batch:
///
///   L = sum_i -log( exp(q_i.k_i/tau) / (exp(q_i.k_i/tau) + sum_j exp(q_i.n_j/tau)) )
///
/// queries and positives are [B, d]; negatives is [N, d] and never receives a
/// gradient. With include_positive=false the positive term is dropped from the
/// denominator (the literal form, which is unbounded below).
template <class T>
Tensor<T> degradation_loss(const Tensor<T>& queries, const Tensor<T>& positives,
                           const std::vector<T>& negatives, T tau, bool include_positive = true) {
  if (!(tau > 0)) throw ParameterError("degradation_loss: temperature must be positive");
  if (queries.rank() != 2 || queries.shape() != positives.shape())
    throw DimensionError("degradation_loss: queries and positives must both be [B,d]");
  const auto B = queries.dim(0), d = queries.dim(1);
  if (negatives.empty() || negatives.size() % static_cast<std::size_t>(d) != 0)
    throw DimensionError("degradation_loss: negative queue must be a non-empty [N,d] matrix");
  const auto N = static_cast<std::int64_t>(negatives.size()) / d;
  const auto& q = queries.vec();
  const auto& k = positives.vec();

  // Row i of probs: softmax over [positive, negatives...] (positive slot only
  // when it is part of the denominator).
  std::vector<T> probs(static_cast<std::size_t>(B * (N + 1)), T(0));
  T total = 0;
  std::vector<T> logits(static_cast<std::size_t>(N + 1));
  for (std::int64_t i = 0; i < B; ++i) {
    T pos = 0;
    for (std::int64_t c = 0; c < d; ++c) pos += q[i * d + c] * k[i * d + c];
    logits[0] = pos / tau;
    for (std::int64_t j = 0; j < N; ++j) {
      T s = 0;
      for (std::int64_t c = 0; c < d; ++c) s += q[i * d + c] * negatives[j * d + c];
      logits[j + 1] = s / tau;
    }
    const std::int64_t first = include_positive ? 0 : 1;
    T mx = logits[first];
    for (std::int64_t j = first; j <= N; ++j) mx = std::max(mx, logits[j]);
    T z = 0;
    for (std::int64_t j = first; j <= N; ++j) z += std::exp(logits[j] - mx);
    const T lse = mx + std::log(z);
    total += lse - logits[0];
    for (std::int64_t j = first; j <= N; ++j) probs[i * (N + 1) + j] = std::exp(logits[j] - lse);
  }

  return detail::make_result<T>(
      {1}, {total}, {&queries, &positives}, "degradation_loss",
      [B, d, N, tau, negatives, probs = std::move(probs)](detail::Node<T>& self) {
        const auto& qv = self.parents[0]->data;
        const auto& kv = self.parents[1]->data;
        auto* gq = detail::parent_grad(self, 0);
        auto* gk = detail::parent_grad(self, 1);
        const T g = self.grad[0] / tau;
        for (std::int64_t i = 0; i < B; ++i) {
          const T* p = probs.data() + i * (N + 1);
          // dL/dlogit_pos = p_pos - 1, dL/dlogit_neg_j = p_j.
          const T wpos = p[0] - T(1);
          for (std::int64_t c = 0; c < d; ++c) {
            if (gq) {
              T acc = wpos * kv[i * d + c];
              for (std::int64_t j = 0; j < N; ++j) acc += p[j + 1] * negatives[j * d + c];
              (*gq)[i * d + c] += g * acc;
            }
            if (gk) (*gk)[i * d + c] += g * wpos * qv[i * d + c];
          }
        }
      });
}

/// Stacks per-patch vectors [d] into [B, d].
template <class T>
Tensor<T> stack_rows(const std::vector<Tensor<T>>& rows) {
  if (rows.empty()) throw DimensionError("stack_rows: no rows");
  const auto d = rows.front().numel();
  std::vector<T> data;
  data.reserve(static_cast<std::size_t>(d) * rows.size());
  for (const auto& r : rows) {
    if (r.numel() != d) throw DimensionError("stack_rows: ragged rows");
    data.insert(data.end(), r.data().begin(), r.data().end());
  }
  const auto B = static_cast<std::int64_t>(rows.size());
  bool any = false;
  for (const auto& r : rows) any = any || r.requires_grad();
  if (!any || !grad_mode_enabled()) return Tensor<T>({B, d}, std::move(data));
  // Route the gradient of row i back to rows[i].
  Tensor<T> out({B, d}, std::move(data));
  auto& n = *out.node();
  n.requires_grad = true;
  n.op = "stack_rows";
  for (const auto& r : rows) n.parents.push_back(r.node());
  n.backward = [d](detail::Node<T>& self) {
    for (std::size_t i = 0; i < self.parents.size(); ++i)
      if (auto* g = detail::parent_grad(self, i))
        for (std::int64_t c = 0; c < d; ++c) (*g)[c] += self.grad[i * d + c];
  };
  return out;
}

}  // namespace dsat
