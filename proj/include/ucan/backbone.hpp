#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ucan/container.hpp"
#include "ucan/dataset.hpp"
#include "ucan/parallel.hpp"
#include "ucan/tensor.hpp"

namespace ucan {

enum class StageKind { Conv3x3, Dense, AvgPool2, MaxPool2, GlobalAvgPool };
enum class Activation { None, Relu };

struct StageSpec {
  StageKind kind = StageKind::Dense;
  std::size_t width = 0;  // output channels / units; unused for pooling
  Activation activation = Activation::None;
  bool tap = false;
};

/// Layer list of the target classifier. Tapped stages are numbered L_1..L_N
/// in order; the final stage is the dense classification head.
struct BackboneSpec {
  Shape input_shape;
  std::size_t classes = 0;
  std::vector<StageSpec> stages;

  /// conv3x3(8)+relu, pool, conv3x3(16)+relu, pool, conv3x3(32)+relu,
  /// global average pool, dense(classes). Taps after each activation and
  /// after the global pool (N = 4).
  static BackboneSpec small_cnn(Shape input_shape, std::size_t classes, bool max_pool = false);
  /// Dense+relu hidden layers, each tapped.
  static BackboneSpec mlp(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes);

  void validate() const;
  std::size_t tap_count() const;
  /// C x H x W of every tap (vectors reported as C x 1 x 1).
  std::vector<Shape> tap_shapes() const;

  std::string encode() const;
  static BackboneSpec decode(const std::string& text);
};

struct EpochRecord {
  std::size_t epoch = 0;
  double loss = 0.0;
  double val_accuracy = 0.0;
  /// Extra per-epoch metric (TCS for auxiliary training).
  double metric = 0.0;
};
using TrainLog = std::vector<EpochRecord>;

struct BackboneTrainOptions {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  /// Standard deviation of optional Gaussian input noise; 0 disables it.
  double noise_augment = 0.0;
  std::uint64_t seed = 0;
  const LabeledDataset* validation = nullptr;
};

class BackboneModel {
 public:
  BackboneModel(BackboneSpec spec, std::uint64_t init_seed);

  const BackboneSpec& spec() const { return spec_; }
  std::vector<Tensor>& parameters() { return params_; }
  const std::vector<Tensor>& parameters() const { return params_; }
  std::size_t parameter_count() const;

  bool frozen() const { return frozen_; }
  void freeze() { frozen_ = true; }
  std::uint32_t checksum() const;

  struct Output {
    Tensor logits;
    std::vector<Tensor> taps;
  };
  /// Logits and every tapped feature map z_k (rank 3).
  Output forward_with_taps(const Tensor& x) const;
  Tensor logits(const Tensor& x) const;
  std::size_t predict(const Tensor& x) const;

  /// Forward pass using an explicit parameter list laid out like parameters().
  Output run(const Tensor& x, std::span<const Tensor> params, bool keep_taps) const;

 private:
  BackboneSpec spec_;
  std::vector<Tensor> params_;
  bool frozen_ = false;
};

TrainLog train_backbone(BackboneModel& model, const LabeledDataset& data, const BackboneTrainOptions& options);
double accuracy(const BackboneModel& model, const LabeledDataset& data);

void append_backbone(Container& c, const BackboneModel& model);
BackboneModel read_backbone(const Container& c);
void serialize_model(const BackboneModel& model, const std::filesystem::path& path);
BackboneModel load_model(const std::filesystem::path& path);

/// Mean per-sample gradient over `batch`. Samples are processed in fixed-size
/// chunks on private parameter replicas and reduced in chunk order, so the
/// result does not depend on the thread count.
struct BatchGradient {
  std::vector<std::vector<double>> grads;
  double mean_loss = 0.0;
};
using SampleLoss = std::function<Tensor(std::span<const Tensor> replica, std::size_t sample)>;
BatchGradient batch_gradient(const std::vector<Tensor>& params, std::span<const std::size_t> batch,
                             const SampleLoss& loss);

/// Class-balanced epoch order: per-class shuffles interleaved round robin.
std::vector<std::size_t> balanced_order(const std::vector<std::size_t>& labels, std::size_t classes, Rng& rng);

}  // namespace ucan
