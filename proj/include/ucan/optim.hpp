#pragma once

#include <cstddef>
#include <span>
#include <vector>

namespace ucan {

/// Heavy-ball SGD: v <- momentum * v + g; w <- w - lr * v.
class SgdMomentum {
 public:
  SgdMomentum(double lr, double momentum) : lr_(lr), momentum_(momentum) {}

  /// `params` and `grads` are parallel lists of flat buffers.
  void step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads);

 private:
  double lr_;
  double momentum_;
  std::vector<std::vector<double>> velocity_;
};

/// Adam over a single flat parameter vector (used by the C&W attack).
class Adam {
 public:
  explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}

  void step(std::span<double> param, std::span<const double> grad);

 private:
  double lr_, beta1_, beta2_, eps_;
  std::size_t t_ = 0;
  std::vector<double> m_, v_;
};

}  // namespace ucan
