#include "ucan/svm.hpp"

#include <algorithm>
#include <limits>

#include "ucan/errors.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

namespace {

constexpr double kTau = 1e-12;

std::vector<double> kernel_matrix(const std::vector<std::vector<double>>& X, double gamma) {
  const std::size_t n = X.size();
  std::vector<double> K(n * n);
  parallel_for(n, [&](std::size_t i) {
    for (std::size_t j = 0; j <= i; ++j) K[i * n + j] = rbf(X[i], X[j], gamma);
  });
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = i + 1; j < n; ++j) K[i * n + j] = K[j * n + i];
  }
  return K;
}

void check_inputs(const std::vector<std::vector<double>>& X, std::size_t n_labels, const SvmOptions& o) {
  if (X.empty() || X.size() != n_labels) throw DataError("svm: empty training set or label count mismatch");
  const std::size_t d = X.front().size();
  for (const auto& x : X) {
    if (x.size() != d) throw DimensionError("svm: ragged feature matrix");
  }
  if (!(o.C > 0.0) || !(o.tol > 0.0) || o.gamma < 0.0) throw ConfigError("svm: C, tol must be positive, gamma >= 0");
}

}  // namespace

double auto_gamma(const std::vector<std::vector<double>>& X) {
  if (X.empty() || X.front().empty()) throw DataError("svm: cannot size gamma from empty features");
  double sum = 0.0, sq = 0.0;
  std::size_t n = 0;
  for (const auto& x : X) {
    for (double v : x) {
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  const double mean = sum / static_cast<double>(n);
  const double var = std::max(sq / static_cast<double>(n) - mean * mean, 0.0);
  const double d = static_cast<double>(X.front().size());
  return var > 0.0 ? 1.0 / (d * var) : 1.0 / d;
}

RbfSvm RbfSvm::fit(const std::vector<std::vector<double>>& X, const std::vector<int>& y, const SvmOptions& options) {
  check_inputs(X, y.size(), options);
  const double gamma = options.gamma > 0.0 ? options.gamma : auto_gamma(X);
  return fit_kernel(X, kernel_matrix(X, gamma), y, gamma, options);
}

RbfSvm RbfSvm::fit_kernel(const std::vector<std::vector<double>>& X, const std::vector<double>& K,
                          const std::vector<int>& y, double gamma, const SvmOptions& options) {
  check_inputs(X, y.size(), options);
  const std::size_t n = X.size();
  if (K.size() != n * n) throw DimensionError("svm: kernel matrix size");
  bool pos = false, neg = false;
  for (int v : y) {
    if (v == 1) pos = true;
    else if (v == -1) neg = true;
    else throw DataError("svm: labels must be +1 or -1");
  }
  if (!pos || !neg) throw DataError("svm: need at least one sample per side");

  const double C = options.C;
  std::vector<double> alpha(n, 0.0), G(n, -1.0);
  auto Q = [&](std::size_t i, std::size_t j) { return static_cast<double>(y[i] * y[j]) * K[i * n + j]; };
  auto upper = [&](std::size_t t) { return alpha[t] >= C; };
  auto lower = [&](std::size_t t) { return alpha[t] <= 0.0; };

  std::size_t iter = 0;
  double gap = std::numeric_limits<double>::infinity();
  while (true) {
    // i maximises -y_t G_t over I_up.
    double gmax = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t i = -1;
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] == 1 ? !upper(t) : !lower(t)) {
        const double v = -y[t] * G[t];
        if (v > gmax) {
          gmax = v;
          i = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    double gmax2 = -std::numeric_limits<double>::infinity();
    std::ptrdiff_t j = -1;
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < n; ++t) {
      if (y[t] == 1 ? lower(t) : upper(t)) continue;
      const double v = y[t] * G[t];
      gmax2 = std::max(gmax2, v);
      if (i < 0) continue;
      const double grad_diff = gmax + v;
      if (grad_diff > 0.0) {
        const auto ii = static_cast<std::size_t>(i);
        double quad = K[ii * n + ii] + K[t * n + t] - 2.0 * K[ii * n + t];
        if (quad <= 0.0) quad = kTau;
        const double obj = -(grad_diff * grad_diff) / quad;
        if (obj < best) {
          best = obj;
          j = static_cast<std::ptrdiff_t>(t);
        }
      }
    }
    gap = gmax + gmax2;
    if (i < 0 || j < 0 || gap < options.tol) break;
    if (iter >= options.max_iter) {
      throw ConvergenceError("svm: iteration cap reached with KKT gap " + std::to_string(gap), gap);
    }
    ++iter;

    const auto a = static_cast<std::size_t>(i), b = static_cast<std::size_t>(j);
    const double old_a = alpha[a], old_b = alpha[b];
    if (y[a] != y[b]) {
      double quad = K[a * n + a] + K[b * n + b] + 2.0 * Q(a, b);
      if (quad <= 0.0) quad = kTau;
      const double delta = (-G[a] - G[b]) / quad;
      const double diff = alpha[a] - alpha[b];
      alpha[a] += delta;
      alpha[b] += delta;
      if (diff > 0.0) {
        if (alpha[b] < 0.0) {
          alpha[b] = 0.0;
          alpha[a] = diff;
        }
      } else if (alpha[a] < 0.0) {
        alpha[a] = 0.0;
        alpha[b] = -diff;
      }
      if (diff > 0.0) {
        if (alpha[a] > C) {
          alpha[a] = C;
          alpha[b] = C - diff;
        }
      } else if (alpha[b] > C) {
        alpha[b] = C;
        alpha[a] = C + diff;
      }
    } else {
      double quad = K[a * n + a] + K[b * n + b] - 2.0 * Q(a, b);
      if (quad <= 0.0) quad = kTau;
      const double delta = (G[a] - G[b]) / quad;
      const double sum = alpha[a] + alpha[b];
      alpha[a] -= delta;
      alpha[b] += delta;
      if (sum > C) {
        if (alpha[a] > C) {
          alpha[a] = C;
          alpha[b] = sum - C;
        }
      } else if (alpha[b] < 0.0) {
        alpha[b] = 0.0;
        alpha[a] = sum;
      }
      if (sum > C) {
        if (alpha[b] > C) {
          alpha[b] = C;
          alpha[a] = sum - C;
        }
      } else if (alpha[a] < 0.0) {
        alpha[a] = 0.0;
        alpha[b] = sum;
      }
    }
    const double da = alpha[a] - old_a, db = alpha[b] - old_b;
    for (std::size_t t = 0; t < n; ++t) G[t] += Q(a, t) * da + Q(b, t) * db;
  }

  // Bias from free vectors, or the midpoint of the feasible interval.
  double ub = std::numeric_limits<double>::infinity(), lb = -ub, free_sum = 0.0;
  std::size_t free_count = 0;
  for (std::size_t t = 0; t < n; ++t) {
    const double yg = y[t] * G[t];
    if (upper(t)) {
      if (y[t] == -1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (lower(t)) {
      if (y[t] == 1) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      free_sum += yg;
      ++free_count;
    }
  }
  const double rho = free_count > 0 ? free_sum / static_cast<double>(free_count) : 0.5 * (ub + lb);

  RbfSvm m;
  m.gamma_ = gamma;
  m.bias_ = -rho;
  m.dim_ = X.front().size();
  m.alpha_ = alpha;
  m.gap_ = std::max(gap, 0.0);
  m.iterations_ = iter;
  for (std::size_t t = 0; t < n; ++t) {
    if (alpha[t] > 0.0) {
      m.support_idx_.push_back(t);
      m.coef_.push_back(alpha[t] * y[t]);
      m.support_.insert(m.support_.end(), X[t].begin(), X[t].end());
    }
  }
  return m;
}

double RbfSvm::decision(std::span<const double> x) const {
  if (x.size() != dim_) throw DimensionError("svm: query dimension differs from training features");
  double v = bias_;
  for (std::size_t s = 0; s < coef_.size(); ++s) {
    v += coef_[s] * rbf({support_.data() + s * dim_, dim_}, x, gamma_);
  }
  return v;
}

void RbfSvm::append(Section& s, const std::string& prefix) const {
  s.set(prefix + "gamma", gamma_);
  s.set(prefix + "bias", bias_);
  s.set(prefix + "dim", dim_);
  s.set(prefix + "tensor", s.tensors.size());
  const std::size_t nsv = coef_.size();
  s.tensors.emplace_back(Shape{std::max<std::size_t>(nsv, 1), dim_},
                         nsv ? support_ : std::vector<double>(dim_, 0.0));
  s.tensors.emplace_back(Shape{std::max<std::size_t>(nsv, 1)}, nsv ? coef_ : std::vector<double>{0.0});
}

RbfSvm RbfSvm::read(const Section& s, const std::string& prefix) {
  RbfSvm m;
  m.gamma_ = s.get_double(prefix + "gamma");
  m.bias_ = s.get_double(prefix + "bias");
  m.dim_ = static_cast<std::size_t>(s.get_int(prefix + "dim"));
  const auto t = static_cast<std::size_t>(s.get_int(prefix + "tensor"));
  const auto& sv = s.tensor(t);
  const auto& coef = s.tensor(t + 1);
  if (sv.rank() != 2 || sv.dim(1) != m.dim_ || coef.numel() != sv.dim(0)) {
    throw FormatError("svm section '" + prefix + "' has inconsistent shapes");
  }
  m.support_.assign(sv.data().begin(), sv.data().end());
  m.coef_.assign(coef.data().begin(), coef.data().end());
  return m;
}

OvrSvm OvrSvm::fit(const std::vector<std::vector<double>>& X, const std::vector<std::size_t>& labels,
                   std::size_t classes, const SvmOptions& options) {
  check_inputs(X, labels.size(), options);
  if (classes < 2) throw ConfigError("svm: one-vs-rest needs at least two classes");
  const double gamma = options.gamma > 0.0 ? options.gamma : auto_gamma(X);
  const auto K = kernel_matrix(X, gamma);
  OvrSvm o;
  for (std::size_t c = 0; c < classes; ++c) {
    std::vector<int> y(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) y[i] = labels[i] == c ? 1 : -1;
    o.machines_.push_back(RbfSvm::fit_kernel(X, K, y, gamma, options));
  }
  return o;
}

std::vector<double> OvrSvm::decision_values(std::span<const double> x) const {
  std::vector<double> v;
  v.reserve(machines_.size());
  for (const auto& m : machines_) v.push_back(m.decision(x));
  return v;
}

void OvrSvm::append(Section& s, const std::string& prefix) const {
  s.set(prefix + "classes", machines_.size());
  for (std::size_t c = 0; c < machines_.size(); ++c) machines_[c].append(s, prefix + std::to_string(c) + ".");
}

OvrSvm OvrSvm::read(const Section& s, const std::string& prefix) {
  OvrSvm o;
  const auto n = static_cast<std::size_t>(s.get_int(prefix + "classes"));
  for (std::size_t c = 0; c < n; ++c) o.machines_.push_back(RbfSvm::read(s, prefix + std::to_string(c) + "."));
  return o;
}

}  // namespace ucan
