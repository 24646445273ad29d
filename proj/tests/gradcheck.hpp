#pragma once

// Central finite-difference gradient oracle (double precision).

#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "dsat/ops.hpp"
#include "dsat/tensor.hpp"

namespace gradcheck {

using dsat::Tensor;
using Fn = std::function<Tensor<double>(const std::vector<Tensor<double>>&)>;

struct Report {
  double worst = 0.0;     // largest per-input relative error
  std::string worst_input;
  std::size_t coords = 0; // coordinates compared
};

// Fixed random weights turn any output into a scalar that depends on every entry.
inline std::vector<double> projection(std::size_t n, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(n);
  for (auto& v : w) v = u(rng);
  return w;
}

inline double project_value(const Tensor<double>& y, const std::vector<double>& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < w.size(); ++i) s += y.data()[i] * w[i];
  return s;
}

/// Compares backward() against (f(x+h) - f(x-h)) / 2h on every input.
/// max_coords > 0 samples that many coordinates per input. The error for an
/// input is ||analytic - numeric|| / max(||numeric||, floor) over its coordinates.
inline Report check(const Fn& f, std::vector<Tensor<double>> inputs, std::size_t max_coords = 0,
                    double h = 1e-4, double floor = 1e-6, std::uint64_t seed = 7) {
  for (auto& x : inputs) x.zero_grad();
  const auto y0 = f(inputs);
  const auto w = projection(static_cast<std::size_t>(y0.numel()), seed);
  const auto wt = Tensor<double>(y0.shape(), w);
  auto loss = dsat::ops::sum(dsat::ops::mul(y0, wt));
  loss.backward();

  Report rep;
  std::mt19937_64 pick(seed + 1);
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto& x = inputs[k];
    if (!x.requires_grad()) continue;
    const auto n = static_cast<std::size_t>(x.numel());
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), std::size_t{0});
    if (max_coords > 0 && max_coords < n) {
      std::shuffle(coords.begin(), coords.end(), pick);
      coords.resize(max_coords);
    }
    std::vector<double> analytic(n, 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    double diff2 = 0.0, ref2 = 0.0;
    for (auto c : coords) {
      auto data = x.mutable_data();
      const double orig = data[c];
      double fp, fm;
      {
        dsat::NoGradGuard ng;
        data[c] = orig + h;
        fp = project_value(f(inputs), w);
        data[c] = orig - h;
        fm = project_value(f(inputs), w);
      }
      data[c] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      diff2 += (analytic[c] - numeric) * (analytic[c] - numeric);
      ref2 += numeric * numeric;
    }
    const double rel = std::sqrt(diff2) / std::max(std::sqrt(ref2), floor);
    rep.coords += coords.size();
    if (rel > rep.worst) {
      rep.worst = rel;
      rep.worst_input = "input " + std::to_string(k);
    }
  }
  return rep;
}

/// Uniform values in [lo, hi], optionally kept away from zero by `gap`.
inline Tensor<double> random(dsat::Shape shape, std::uint64_t seed, double lo = -1.0, double hi = 1.0,
                             double gap = 0.0, bool requires_grad = true) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(dsat::numel(shape)));
  for (auto& x : v) {
    do x = u(rng);
    while (std::abs(x) < gap);
  }
  return Tensor<double>(std::move(shape), std::move(v), requires_grad);
}

}  // namespace gradcheck
