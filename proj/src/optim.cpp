#include "ucan/optim.hpp"

#include <cmath>

#include "ucan/errors.hpp"

namespace ucan {

void SgdMomentum::step(std::span<const std::span<double>> params, std::span<const std::span<const double>> grads) {
  if (params.size() != grads.size()) throw ContractError("SgdMomentum: params/grads length mismatch");
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) velocity_[i].assign(params[i].size(), 0.0);
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto& v = velocity_[i];
    if (v.size() != params[i].size() || grads[i].size() != v.size()) {
      throw ContractError("SgdMomentum: buffer size changed between steps");
    }
    for (std::size_t j = 0; j < v.size(); ++j) {
      v[j] = momentum_ * v[j] + grads[i][j];
      params[i][j] -= lr_ * v[j];
    }
  }
}

void Adam::step(std::span<double> param, std::span<const double> grad) {
  if (param.size() != grad.size()) throw ContractError("Adam: param/grad length mismatch");
  if (m_.empty()) {
    m_.assign(param.size(), 0.0);
    v_.assign(param.size(), 0.0);
  }
  ++t_;
  const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < param.size(); ++i) {
    m_[i] = beta1_ * m_[i] + (1.0 - beta1_) * grad[i];
    v_[i] = beta2_ * v_[i] + (1.0 - beta2_) * grad[i] * grad[i];
    const double mhat = m_[i] / bc1;
    const double vhat = v_[i] / bc2;
    param[i] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
  }
}

}  // namespace ucan
