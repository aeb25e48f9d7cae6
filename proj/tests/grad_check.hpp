#pragma once

// Central finite-difference oracle for scalar functions of tensor leaves.
// Independent of the backward rules it checks: only forward values are used.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "ucan/tensor.hpp"

namespace ucan::testing {

using ScalarFn = std::function<Tensor(const std::vector<Tensor>&)>;

struct GradCheck {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
};

/// Relative error with an absolute floor so that vanishing components compare
/// on an absolute scale.
inline double rel_error(double a, double b, double floor = 1e-5) {
  return std::abs(a - b) / std::max({std::abs(a), std::abs(b), floor});
}

inline std::vector<std::vector<double>> numeric_gradients(const ScalarFn& f, std::vector<Tensor>& leaves,
                                                          double h = 1e-5) {
  std::vector<std::vector<double>> out;
  for (auto& leaf : leaves) {
    auto data = leaf.mutable_data();
    std::vector<double> g(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
      const double orig = data[i];
      data[i] = orig + h;
      const double up = f(leaves).item();
      data[i] = orig - h;
      const double down = f(leaves).item();
      data[i] = orig;
      g[i] = (up - down) / (2.0 * h);
    }
    out.push_back(std::move(g));
  }
  return out;
}

/// Compares backward() against central differences for every leaf element.
inline GradCheck check_gradients(const ScalarFn& f, std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  f(leaves).backward();
  std::vector<std::vector<double>> analytic;
  for (auto& l : leaves) analytic.emplace_back(l.grad().begin(), l.grad().end());
  const auto numeric = numeric_gradients(f, leaves, h);
  GradCheck r;
  for (std::size_t k = 0; k < leaves.size(); ++k) {
    for (std::size_t i = 0; i < numeric[k].size(); ++i) {
      r.max_rel_error = std::max(r.max_rel_error, rel_error(analytic[k][i], numeric[k][i]));
      ++r.checked;
    }
  }
  return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0,
                            bool requires_grad = true) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = u(rng);
  return Tensor(std::move(shape), std::move(v), requires_grad);
}

/// Values bounded away from zero (for kinks such as relu).
inline Tensor random_away_from_zero(Shape shape, std::mt19937_64& rng, double margin = 0.05) {
  std::uniform_real_distribution<double> u(margin, 1.0);
  std::bernoulli_distribution sign(0.5);
  std::vector<double> v(shape_numel(shape));
  for (auto& e : v) e = sign(rng) ? u(rng) : -u(rng);
  return Tensor(std::move(shape), std::move(v), true);
}

}  // namespace ucan::testing
