#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "ucan/attacks.hpp"
#include "ucan/auxiliary.hpp"
#include "ucan/backbone.hpp"
#include "ucan/dataset.hpp"
#include "ucan/detectors.hpp"

namespace ucan {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | cifar10
  SyntheticImageSpec synthetic{.per_class = 400};
  std::filesystem::path cifar_path;
  std::vector<std::size_t> cifar_classes;
};

struct AttackPlan {
  std::vector<std::string> names{"pgd", "cw"};
  /// Budgets in units of 1/255.
  std::vector<double> epsilons{8.0, 16.0};
  AttackConfig base;
  bool adaptive = true;
  std::size_t ada_steps = 400;
  /// Attack at most this many test samples; 0 means all.
  std::size_t max_samples = 0;
};

struct DetectorPlan {
  std::vector<std::string> kinds{"dknn", "dnr", "sad"};
  std::vector<std::string> sources{"raw", "ucan"};
  std::size_t k = 5;
  std::size_t dnr_max_train = 400;
  /// U-CAN input of DNR: "embedding" (p~_k) or "cosine" (CS_k).
  std::string dnr_input = "cosine";
  SvmOptions svm;
};

/// Everything a pipeline run needs. Loaded from an INI-style file; see
/// configs/reference.ini for every key and its default.
struct RunConfig {
  DataConfig data;
  SplitFractions split = kDefaultSplit;
  std::string architecture = "small_cnn";  // small_cnn | mlp
  std::vector<std::size_t> mlp_hidden{32, 16};
  BackboneTrainOptions backbone;
  ArcFaceConfig arcface;
  AuxTrainOptions aux{.epochs = 150};
  SelectionPolicy selection = SelectionPolicy::top(2);
  AttackPlan attacks;
  DetectorPlan detectors;
  bool successful_only = true;
  std::size_t bench_batch = 8;
  std::size_t bench_iterations = 10;
  std::vector<std::uint64_t> seeds{1};
  std::filesystem::path out_dir = "runs";
  std::size_t threads = 0;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

RunConfig load_config(const std::filesystem::path& path);
RunConfig parse_config(const std::string& text);
std::string dump_config(const RunConfig& cfg);

}  // namespace ucan
