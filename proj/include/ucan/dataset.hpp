#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

#include "ucan/container.hpp"
#include "ucan/tensor.hpp"

namespace ucan {

enum class Split : std::uint8_t { Unassigned = 0, Train = 1, Val = 2, Calib = 3, Test = 4 };
const char* split_name(Split s);

/// Samples of uniform shape with class labels in [0, classes).
struct LabeledDataset {
  Shape sample_shape;
  std::size_t classes = 0;
  std::vector<Tensor> samples;
  std::vector<std::size_t> labels;
  /// Index of each sample in the dataset it was split from.
  std::vector<std::size_t> ids;
  Split split = Split::Unassigned;

  std::size_t size() const { return samples.size(); }
  bool empty() const { return samples.empty(); }
  void push(Tensor sample, std::size_t label, std::size_t id);
  /// Throws DataError when shapes or labels are inconsistent.
  void validate() const;
  std::vector<std::size_t> class_counts() const;
  LabeledDataset subset(const std::vector<std::size_t>& indices) const;
};

/// Class-conditional images: a class-coloured Gaussian blob at a class-specific
/// location plus an oriented sinusoidal grating, over per-pixel noise.
/// `separation` scales both class cues relative to the noise.
struct SyntheticImageSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t image_size = 16;
  std::size_t channels = 3;
  double separation = 1.0;
  double noise = 0.15;
  double nuisance = 0.0;
  std::uint64_t seed = 0;
};
LabeledDataset gen_synthetic(const SyntheticImageSpec& spec);

/// Isotropic Gaussian blobs in [0,1]^dim (clipped), shaped dim x 1 x 1.
struct SyntheticBlobSpec {
  std::size_t classes = 4;
  std::size_t per_class = 100;
  std::size_t dim = 8;
  double separation = 1.0;
  std::uint64_t seed = 0;
};
LabeledDataset gen_blobs(const SyntheticBlobSpec& spec);

/// CIFAR-10 binary batch: records of 1 label byte + 3072 pixel bytes (R, G, B
/// planes of 32x32). Pixels scaled by 1/255. Empty `class_subset` keeps all
/// classes; otherwise labels are remapped to their position in the subset.
inline constexpr std::size_t kCifarRecordBytes = 3073;
LabeledDataset load_cifar10_binary(const std::filesystem::path& path,
                                   const std::vector<std::size_t>& class_subset = {});

struct DatasetSplits {
  LabeledDataset train, val, calib, test;
};
using SplitFractions = std::array<double, 4>;
inline constexpr SplitFractions kDefaultSplit = {0.6, 0.15, 0.1, 0.15};

/// Stratified, seeded four-way split (train/val/calib/test).
DatasetSplits split_dataset(const LabeledDataset& ds, const SplitFractions& fractions, std::uint64_t seed);

void append_dataset(Container& c, const std::string& section, const LabeledDataset& ds);
LabeledDataset read_dataset(const Container& c, const std::string& section);

}  // namespace ucan
