#pragma once

// Named parameter storage and the small layer types the networks are built
// from. Layers are plain aggregates of Tensor handles; the ParamList owns the
// canonical name -> tensor mapping used by the optimizer and checkpoints.

#include <cmath>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "dsat/ops.hpp"
#include "dsat/tensor.hpp"

namespace dsat {

template <class T>
struct NamedParam {
  std::string name;
  Tensor<T> tensor;
};

template <class T>
class ParamList {
 public:
  Tensor<T> add(std::string name, Tensor<T> tensor) {
    for (const auto& p : items_)
      if (p.name == name) throw std::logic_error("duplicate parameter name: " + name);
    items_.push_back({std::move(name), tensor});
    return tensor;
  }

  const std::vector<NamedParam<T>>& items() const { return items_; }
  std::vector<NamedParam<T>>& items() { return items_; }
  std::size_t size() const { return items_.size(); }

  std::int64_t scalar_count() const {
    std::int64_t n = 0;
    for (const auto& p : items_) n += p.tensor.numel();
    return n;
  }

  const Tensor<T>* find(const std::string& name) const {
    for (const auto& p : items_)
      if (p.name == name) return &p.tensor;
    return nullptr;
  }

  void zero_grad() {
    for (auto& p : items_) p.tensor.zero_grad();
  }

 private:
  std::vector<NamedParam<T>> items_;
};

/// Seeded parameter initialisation. Values are drawn in double precision so
/// float and double instances built from one seed agree up to rounding.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  std::vector<double> uniform(std::size_t n, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> v(n);
    for (auto& x : v) x = dist(rng_);
    return v;
  }

  /// Normal(0, std) truncated to +-2 std by resampling.
  std::vector<double> trunc_normal(std::size_t n, double std) {
    std::normal_distribution<double> dist(0.0, std);
    std::vector<double> v(n);
    for (auto& x : v) {
      do x = dist(rng_);
      while (std::abs(x) > 2.0 * std);
    }
    return v;
  }

  std::mt19937_64& rng() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

template <class T>
Tensor<T> make_param(const Shape& shape, const std::vector<double>& values) {
  return Tensor<T>(shape, std::vector<T>(values.begin(), values.end()), true);
}

template <class T>
struct Conv2d {
  Tensor<T> weight, bias;
  std::int64_t padding = 1, stride = 1;

  Tensor<T> operator()(const Tensor<T>& x) const {
    return ops::conv2d(x, weight, bias, padding, stride);
  }
};

/// Weight init for a layer followed by a leaky ReLU with the given slope.
/// uniform_fan_in is the PyTorch default: U(+-1/sqrt(fan_in)) for weight and
/// bias. kaiming_leaky keeps activation variance through deep stacks:
/// U(+-sqrt(6 / ((1 + slope^2) fan_in))) with zero bias.
enum class ConvInit { uniform_fan_in, kaiming_leaky };

template <class T>
Conv2d<T> make_conv(ParamList<T>& params, const std::string& name, std::int64_t cin,
                    std::int64_t cout, std::int64_t k, Initializer& init,
                    std::int64_t stride = 1, ConvInit scheme = ConvInit::uniform_fan_in,
                    double slope = 0.1) {
  const double fan_in = static_cast<double>(cin * k * k);
  const auto n = static_cast<std::size_t>(cout * cin * k * k);
  Conv2d<T> c;
  if (scheme == ConvInit::kaiming_leaky) {
    const double bound = std::sqrt(6.0 / ((1.0 + slope * slope) * fan_in));
    c.weight = params.add(name + ".weight", make_param<T>({cout, cin, k, k}, init.uniform(n, bound)));
    c.bias = params.add(name + ".bias", Tensor<T>::zeros({cout}, true));
  } else {
    const double bound = 1.0 / std::sqrt(fan_in);
    c.weight = params.add(name + ".weight", make_param<T>({cout, cin, k, k}, init.uniform(n, bound)));
    c.bias = params.add(name + ".bias",
                        make_param<T>({cout}, init.uniform(static_cast<std::size_t>(cout), bound)));
  }
  c.padding = (k - 1) / 2;
  c.stride = stride;
  return c;
}

template <class T>
struct Linear {
  Tensor<T> weight, bias;  // weight is [d_in, d_out]

  Tensor<T> operator()(const Tensor<T>& x) const { return ops::linear(x, weight, bias); }
};

enum class LinearInit { uniform_fan_in, trunc_normal, kaiming_leaky };

template <class T>
Linear<T> make_linear(ParamList<T>& params, const std::string& name, std::int64_t din,
                      std::int64_t dout, Initializer& init,
                      LinearInit scheme = LinearInit::uniform_fan_in) {
  Linear<T> l;
  const auto n = static_cast<std::size_t>(din * dout);
  if (scheme == LinearInit::trunc_normal) {
    l.weight = params.add(name + ".weight", make_param<T>({din, dout}, init.trunc_normal(n, 0.02)));
    l.bias = params.add(name + ".bias", Tensor<T>::zeros({dout}, true));
  } else if (scheme == LinearInit::kaiming_leaky) {
    const double bound = std::sqrt(6.0 / (1.01 * static_cast<double>(din)));
    l.weight = params.add(name + ".weight", make_param<T>({din, dout}, init.uniform(n, bound)));
    l.bias = params.add(name + ".bias", Tensor<T>::zeros({dout}, true));
  } else {
    const double bound = 1.0 / std::sqrt(static_cast<double>(din));
    l.weight = params.add(name + ".weight", make_param<T>({din, dout}, init.uniform(n, bound)));
    l.bias = params.add(name + ".bias",
                        make_param<T>({dout}, init.uniform(static_cast<std::size_t>(dout), bound)));
  }
  return l;
}

template <class T>
struct LayerNorm {
  Tensor<T> gamma, beta;
  Tensor<T> operator()(const Tensor<T>& x) const { return ops::layer_norm(x, gamma, beta); }
};

template <class T>
LayerNorm<T> make_layer_norm(ParamList<T>& params, const std::string& name, std::int64_t d) {
  return {params.add(name + ".weight", Tensor<T>::ones({d}, true)),
          params.add(name + ".bias", Tensor<T>::zeros({d}, true))};
}

}  // namespace dsat
