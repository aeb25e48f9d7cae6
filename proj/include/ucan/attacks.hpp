#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ucan/backbone.hpp"
#include "ucan/container.hpp"
#include "ucan/detectors.hpp"

namespace ucan {

struct AttackConfig {
  std::string name = "pgd";  // pgd | cw | ada-dknn
  double epsilon = 16.0 / 255.0;
  std::size_t steps = 200;
  /// PGD / ADA-DKNN sign-step size; unset means epsilon / 8.
  std::optional<double> step_size;
  bool random_start = true;
  double cw_c = 0.5;
  double cw_kappa = 0.0;
  double cw_lr = 1e-3;
  std::size_t ada_m = 100;
  double ada_lambda = 1.0;
  std::size_t ada_refresh = 50;
  std::uint64_t seed = 0;

  void validate() const;
  double alpha() const { return step_size ? *step_size : epsilon / 8.0; }
};

/// Default ADA-DKNN settings: 400 iterations, m = 100.
AttackConfig ada_defaults(double epsilon);

struct AdvBatch {
  std::string attack;
  AttackConfig config;
  std::vector<Tensor> originals;
  std::vector<Tensor> adversarials;
  std::vector<std::size_t> labels;
  std::vector<char> success;

  std::size_t size() const { return originals.size(); }
};

/// Differentiable classifier x -> logits.
using LogitFn = std::function<Tensor(const Tensor&)>;
LogitFn logits_of(const BackboneModel& model);

AdvBatch pgd(const LogitFn& f, std::span<const Tensor> x, std::span<const std::size_t> y, const AttackConfig& cfg);
AdvBatch pgd(const BackboneModel& model, std::span<const Tensor> x, std::span<const std::size_t> y,
             const AttackConfig& cfg);

/// C&W margin attack in tanh space, projected onto the epsilon ball after
/// every Adam step; returns the least-distorted successful iterate.
AdvBatch cw_linf(const LogitFn& f, std::span<const Tensor> x, std::span<const std::size_t> y, const AttackConfig& cfg);
AdvBatch cw_linf(const BackboneModel& model, std::span<const Tensor> x, std::span<const std::size_t> y,
                 const AttackConfig& cfg);

/// Sign-gradient ascent on CE - lambda * sum_s D_s, where D_s is the scaled
/// mean squared distance to the ada_m nearest train embeddings of the
/// nearest wrong class. Neighbours are re-chosen every ada_refresh steps.
AdvBatch ada_dknn(const FeatureExtractor& features, const DknnDetector& detector, std::span<const Tensor> x,
                  std::span<const std::size_t> y, const AttackConfig& cfg);

/// Fraction of samples whose prediction differs from the true label.
double attack_success_rate(const BackboneModel& model, const AdvBatch& batch);
double attack_success_rate(const LogitFn& f, const AdvBatch& batch);

void append_adv(Container& c, const AdvBatch& batch);
AdvBatch read_adv(const Container& c);
/// Container file plus a JSON sidecar (path + ".json") with the attack
/// name, config, seed and success flags.
void save_adv(const AdvBatch& batch, const std::filesystem::path& path);
AdvBatch load_adv(const std::filesystem::path& path);

}  // namespace ucan
