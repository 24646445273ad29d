#pragma once

#include <cmath>
#include <cstdint>
#include <vector>

#include "dsat/layers.hpp"

namespace dsat {

/// lr(epoch) = lr0 * 0.5^floor(epoch / period).
inline double step_decay_lr(double lr0, std::int64_t epoch, std::int64_t halving_period) {
  if (halving_period <= 0) throw ParameterError("halving period must be positive");
  return lr0 * std::pow(0.5, static_cast<double>(epoch / halving_period));
}

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Adam with bias correction. Moments are kept per parameter, in the order
/// the parameters were registered.
template <class T>
class Adam {
 public:
  explicit Adam(AdamOptions opt = {}) : opt_(opt) {}

  void attach(std::vector<Tensor<T>> params) {
    params_ = std::move(params);
    m_.clear();
    v_.clear();
    for (const auto& p : params_) {
      m_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
      v_.emplace_back(static_cast<std::size_t>(p.numel()), T(0));
    }
    steps_ = 0;
  }

  /// One update with the gradients currently stored on the parameters.
  /// Parameters without a gradient are treated as having a zero gradient.
  void step(double lr) {
    ++steps_;
    const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(steps_));
    const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(steps_));
    const T b1 = static_cast<T>(opt_.beta1), b2 = static_cast<T>(opt_.beta2);
    const T step_size = static_cast<T>(lr / bc1);
    const T inv_sqrt_bc2 = static_cast<T>(1.0 / std::sqrt(bc2));
    const T eps = static_cast<T>(opt_.eps);
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      auto data = p.mutable_data();
      const auto grad = p.grad();
      auto& m = m_[i];
      auto& v = v_[i];
      const bool has = !grad.empty();
      for (std::size_t j = 0; j < data.size(); ++j) {
        const T g = has ? grad[j] : T(0);
        m[j] = b1 * m[j] + (T(1) - b1) * g;
        v[j] = b2 * v[j] + (T(1) - b2) * g * g;
        data[j] -= step_size * m[j] / (std::sqrt(v[j]) * inv_sqrt_bc2 + eps);
      }
    }
  }

  void zero_grad() {
    for (auto& p : params_) p.zero_grad();
  }

  std::int64_t steps() const { return steps_; }
  void set_steps(std::int64_t s) { steps_ = s; }
  std::vector<std::vector<T>>& first_moments() { return m_; }
  std::vector<std::vector<T>>& second_moments() { return v_; }
  const std::vector<Tensor<T>>& parameters() const { return params_; }

 private:
  AdamOptions opt_;
  std::vector<Tensor<T>> params_;
  std::vector<std::vector<T>> m_, v_;
  std::int64_t steps_ = 0;
};

}  // namespace dsat
