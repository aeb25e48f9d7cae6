#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "ucan/backbone.hpp"
#include "ucan/container.hpp"
#include "ucan/dataset.hpp"
#include "ucan/tensor.hpp"

namespace ucan {

/// Clamp applied to cosines before the arccos path of the angular margin.
inline constexpr double kArcClampDelta = 1e-7;

struct ArcFaceConfig {
  double scale = 64.0;   // s
  double margin = 0.5;   // m, radians
  std::size_t embed_dim = 16;  // d'
  std::size_t classes = 0;     // CL

  void validate() const;
};

/// Auxiliary head for one tapped layer: a 1x1 projection to d' channels,
/// global average pooling and l2 normalisation, plus ArcFace class centres.
struct AuxBlock {
  std::size_t layer = 0;  // 1-based tap index k
  Tensor proj_weight;     // d' x C_k
  Tensor proj_bias;       // d'
  Tensor centers;         // CL x d', stored unnormalised
  ArcFaceConfig config;

  static AuxBlock create(std::size_t layer, std::size_t channels, const ArcFaceConfig& config, Rng& rng);
  std::size_t channels() const { return proj_weight.dim(1); }
  std::size_t parameter_count() const;
  std::vector<Tensor> parameters() const { return {proj_weight, proj_bias, centers}; }
};

/// One block per tapped backbone layer, seeded.
std::vector<AuxBlock> init_aux_blocks(const BackboneModel& model, const ArcFaceConfig& config, std::uint64_t seed);

/// p~_k = normalize(pool(conv1x1(z_k))).
Tensor aux_forward(const AuxBlock& block, const Tensor& z);
/// Same embedding from an already pooled tap. Pooling commutes with the 1x1
/// projection, so this equals aux_forward up to rounding.
Tensor aux_forward_pooled(const Tensor& pooled, const Tensor& proj_weight, const Tensor& proj_bias);

/// CS_k[j] = <normalize(W_k[j]), p~_k>.
Tensor cosine_scores(const AuxBlock& block, const Tensor& embedding);
Tensor cosine_scores(const Tensor& centers, const Tensor& embedding);

/// Additive angular margin loss on a vector of cosines:
///   -log( e^{s cos(theta_y + m)} / (e^{s cos(theta_y + m)} + sum_{j != y} e^{s cos theta_j}) ).
/// The margin applies to the true class only.
Tensor arcface_loss(const Tensor& cosines, std::size_t label, const ArcFaceConfig& config);

/// Arithmetic mean of the per-layer losses.
Tensor global_loss(std::span<const Tensor> per_layer);

struct AuxTrainOptions {
  std::size_t epochs = 40;
  std::size_t batch_size = 32;
  double learning_rate = 0.01;
  double momentum = 0.9;
  std::uint64_t seed = 0;
  const LabeledDataset* validation = nullptr;
};

/// Trains every block jointly on the global loss. The backbone must be frozen
/// and is never modified.
TrainLog train_aux(const BackboneModel& model, std::vector<AuxBlock>& blocks, const LabeledDataset& data,
                   const AuxTrainOptions& options);

struct LayerScore {
  std::size_t layer = 0;
  double cs_plus = 0.0;
  double cs_minus = 0.0;
  double cs_avg = 0.0;
};

struct LayerScoreReport {
  std::vector<LayerScore> layers;
  double tcs = 0.0;
};

LayerScoreReport layer_scores(const BackboneModel& model, const std::vector<AuxBlock>& blocks,
                              const LabeledDataset& valset);

/// Scores from precomputed embeddings: embeddings[layer][sample], one centre
/// matrix per layer.
LayerScoreReport layer_scores_from(std::span<const Tensor> centers, const std::vector<std::vector<Tensor>>& embeddings,
                                   const std::vector<std::size_t>& labels, std::span<const std::size_t> layer_ids = {});

struct SelectionPolicy {
  enum class Kind { TopS, Offset };
  Kind kind = Kind::TopS;
  std::size_t value = 1;

  static SelectionPolicy top(std::size_t s) { return {Kind::TopS, s}; }
  static SelectionPolicy offset(std::size_t s) { return {Kind::Offset, s}; }
};

/// Top-S: layers with the largest cs_avg, in descending score order, ties to
/// the lower index. Offset s: {s, ..., N}.
std::vector<std::size_t> select_layers(std::span<const LayerScore> scores, const SelectionPolicy& policy);

void append_aux(Container& c, const std::vector<AuxBlock>& blocks);
std::vector<AuxBlock> read_aux(const Container& c);

}  // namespace ucan
