#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <span>
#include <vector>

#include "ucan/container.hpp"

namespace ucan {

struct SvmOptions {
  /// RBF width; 0 selects 1 / (dim * variance of all feature values).
  double gamma = 0.0;
  double C = 1.0;
  double tol = 1e-3;
  std::size_t max_iter = 100000;
};

double auto_gamma(const std::vector<std::vector<double>>& X);


/// Binary soft-margin RBF-SVM trained by SMO with second-order working-set
/// selection. decision(x) = sum_i alpha_i y_i K(x_i, x) + b.
class RbfSvm {
 public:
  /// y in {-1, +1}; throws ConvergenceError (carrying the KKT gap) when the
  /// iteration cap is hit.
  static RbfSvm fit(const std::vector<std::vector<double>>& X, const std::vector<int>& y, const SvmOptions& options);
  /// Same, over a precomputed n x n kernel matrix.
  static RbfSvm fit_kernel(const std::vector<std::vector<double>>& X, const std::vector<double>& K,
                           const std::vector<int>& y, double gamma, const SvmOptions& options);

  double decision(std::span<const double> x) const;

  double gamma() const { return gamma_; }
  double bias() const { return bias_; }
  /// Dual variables of every training point, in input order.
  const std::vector<double>& alphas() const { return alpha_; }
  /// Indices (into the training set) of the support vectors.
  const std::vector<std::size_t>& support_indices() const { return support_idx_; }
  std::size_t support_count() const { return coef_.size(); }
  /// Maximal KKT violation at termination.
  double kkt_gap() const { return gap_; }
  std::size_t iterations() const { return iterations_; }

  void append(Section& s, const std::string& prefix) const;
  static RbfSvm read(const Section& s, const std::string& prefix);

 private:
  double gamma_ = 1.0;
  double bias_ = 0.0;
  std::size_t dim_ = 0;
  std::vector<double> support_;  // row-major, support_count x dim
  std::vector<double> coef_;     // alpha_i y_i
  std::vector<double> alpha_;
  std::vector<std::size_t> support_idx_;
  double gap_ = 0.0;
  std::size_t iterations_ = 0;
};

/// One machine per class (class c versus the rest), sharing one kernel matrix.
class OvrSvm {
 public:
  static OvrSvm fit(const std::vector<std::vector<double>>& X, const std::vector<std::size_t>& labels,
                    std::size_t classes, const SvmOptions& options);
  std::vector<double> decision_values(std::span<const double> x) const;
  std::size_t classes() const { return machines_.size(); }
  const RbfSvm& machine(std::size_t c) const { return machines_[c]; }

  void append(Section& s, const std::string& prefix) const;
  static OvrSvm read(const Section& s, const std::string& prefix);

 private:
  std::vector<RbfSvm> machines_;
};

inline double rbf(std::span<const double> a, std::span<const double> b, double gamma) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return std::exp(-gamma * d);
}

}  // namespace ucan
