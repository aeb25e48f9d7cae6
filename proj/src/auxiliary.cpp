#include "ucan/auxiliary.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "ucan/ops.hpp"
#include "ucan/optim.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

void ArcFaceConfig::validate() const {
  if (!(scale > 0.0)) throw ConfigError("ArcFace scale must be positive");
  if (!(margin >= 0.0 && margin < std::numbers::pi / 2.0)) throw ConfigError("ArcFace margin must lie in [0, pi/2)");
  if (embed_dim < 2) throw ConfigError("embedding dimension d' must be at least 2");
  if (classes < 2) throw ConfigError("ArcFace needs at least 2 classes");
}

AuxBlock AuxBlock::create(std::size_t layer, std::size_t channels, const ArcFaceConfig& config, Rng& rng) {
  config.validate();
  if (channels == 0) throw ConfigError("auxiliary block over a zero-channel tap");
  AuxBlock b;
  b.layer = layer;
  b.config = config;
  const double bound = std::sqrt(6.0 / static_cast<double>(channels));
  std::uniform_real_distribution<double> unif(-bound, bound);
  std::vector<double> w(config.embed_dim * channels);
  for (auto& v : w) v = unif(rng);
  b.proj_weight = Tensor({config.embed_dim, channels}, std::move(w));
  b.proj_bias = Tensor({config.embed_dim});
  std::normal_distribution<double> gauss(0.0, 1.0);
  std::vector<double> centers(config.classes * config.embed_dim);
  for (std::size_t r = 0; r < config.classes; ++r) {
    double sq = 0.0;
    for (std::size_t c = 0; c < config.embed_dim; ++c) {
      auto& v = centers[r * config.embed_dim + c];
      v = gauss(rng);
      sq += v * v;
    }
    const double n = std::sqrt(sq);
    for (std::size_t c = 0; c < config.embed_dim; ++c) centers[r * config.embed_dim + c] /= n;
  }
  b.centers = Tensor({config.classes, config.embed_dim}, std::move(centers));
  return b;
}

std::size_t AuxBlock::parameter_count() const {
  return proj_weight.numel() + proj_bias.numel() + centers.numel();
}

std::vector<AuxBlock> init_aux_blocks(const BackboneModel& model, const ArcFaceConfig& config, std::uint64_t seed) {
  ArcFaceConfig cfg = config;
  cfg.classes = model.spec().classes;
  Rng rng(derive_seed(seed, 0xA0B1));
  std::vector<AuxBlock> blocks;
  const auto shapes = model.spec().tap_shapes();
  for (std::size_t k = 0; k < shapes.size(); ++k) blocks.push_back(AuxBlock::create(k + 1, shapes[k][0], cfg, rng));
  return blocks;
}

Tensor aux_forward(const AuxBlock& block, const Tensor& z) {
  const auto projected = ops::conv1x1(z, block.proj_weight, block.proj_bias);
  return ops::l2_normalize(ops::global_avg_pool(projected));
}

Tensor aux_forward_pooled(const Tensor& pooled, const Tensor& proj_weight, const Tensor& proj_bias) {
  return ops::l2_normalize(ops::dense(pooled, proj_weight, proj_bias));
}

Tensor cosine_scores(const Tensor& centers, const Tensor& embedding) {
  if (centers.rank() != 2 || embedding.rank() != 1 || centers.dim(1) != embedding.dim(0)) {
    throw DimensionError("cosine_scores: centres " + shape_str(centers.shape()) + " vs embedding " +
                         shape_str(embedding.shape()));
  }
  const auto unit = ops::normalize_rows(centers);
  return ops::matmul(unit, embedding.reshape({embedding.numel(), 1})).reshape({centers.dim(0)});
}

Tensor cosine_scores(const AuxBlock& block, const Tensor& embedding) { return cosine_scores(block.centers, embedding); }

Tensor arcface_loss(const Tensor& cosines, std::size_t label, const ArcFaceConfig& config) {
  if (cosines.rank() != 1) throw DimensionError("arcface_loss: expected a vector of cosines");
  const std::size_t n = cosines.numel();
  if (label >= n) {
    throw IndexError("arcface_loss: class " + std::to_string(label) + " outside [0, " + std::to_string(n) + ")");
  }
  if (!(config.scale > 0.0) || !(config.margin >= 0.0 && config.margin < std::numbers::pi / 2.0)) {
    throw ConfigError("arcface_loss: invalid scale or margin");
  }
  const double s = config.scale, m = config.margin;
  auto cs = cosines.data();

  // Target logit s * cos(theta_y + m), theta_y = arccos(clamped cosine).
  double target = cs[label];
  double dtarget = 1.0;
  if (m > 0.0) {
    const double lo = -1.0 + kArcClampDelta, hi = 1.0 - kArcClampDelta;
    const double c = std::clamp(cs[label], lo, hi);
    const double sin_theta = std::sqrt(1.0 - c * c);
    const bool inside = cs[label] > lo && cs[label] < hi;
    if (c >= -std::cos(m)) {
      target = c * std::cos(m) - sin_theta * std::sin(m);
      dtarget = inside ? std::cos(m) + std::sin(m) * c / sin_theta : 0.0;
    } else {
      // theta_y + m would pass pi, where cos(theta_y + m) turns back up and
      // rewards moving away from the centre. Continue linearly instead.
      target = -1.0 + (c + std::cos(m));
      dtarget = inside ? 1.0 : 0.0;
    }
  }
  std::vector<double> z(n);
  for (std::size_t j = 0; j < n; ++j) z[j] = s * (j == label ? target : cs[j]);
  const double mx = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double v : z) total += std::exp(v - mx);
  const double loss = std::log(total) + mx - z[label];
  auto probs = ops::softmax(z);
  return Tensor::from_op(Shape{}, {loss}, {cosines}, [label, s, dtarget, probs = std::move(probs)](detail::Node& self) {
    auto& in = *self.inputs[0];
    if (!in.requires_grad) return;
    auto& g = in.ensure_grad();
    for (std::size_t j = 0; j < probs.size(); ++j) {
      const double dz = probs[j] - (j == label ? 1.0 : 0.0);
      g[j] += self.grad[0] * dz * s * (j == label ? dtarget : 1.0);
    }
  });
}

Tensor global_loss(std::span<const Tensor> per_layer) {
  if (per_layer.empty()) throw ContractError("global_loss: no per-layer losses");
  return ops::mean_of(per_layer);
}

namespace {

// Spatial means of every tap, per sample: pooled[sample][layer].
std::vector<std::vector<Tensor>> pooled_taps(const BackboneModel& model, const LabeledDataset& data) {
  std::vector<std::vector<Tensor>> out(data.size());
  parallel_for(data.size(), [&](std::size_t i) {
    const auto fw = model.forward_with_taps(data.samples[i]);
    for (const auto& z : fw.taps) out[i].push_back(ops::global_avg_pool(z));
  });
  return out;
}

LayerScoreReport scores_from_pooled(const std::vector<AuxBlock>& blocks, const std::vector<std::vector<Tensor>>& pooled,
                                    const std::vector<std::size_t>& labels) {
  std::vector<std::vector<Tensor>> emb(blocks.size());
  std::vector<Tensor> centers;
  std::vector<std::size_t> ids;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    const auto& blk = blocks[b];
    centers.push_back(blk.centers);
    ids.push_back(blk.layer);
    for (const auto& sample : pooled) {
      emb[b].push_back(aux_forward_pooled(sample.at(blk.layer - 1), blk.proj_weight, blk.proj_bias));
    }
  }
  return layer_scores_from(centers, emb, labels, ids);
}

void check_blocks(const BackboneModel& model, const std::vector<AuxBlock>& blocks) {
  const auto shapes = model.spec().tap_shapes();
  if (blocks.empty()) throw ContractError("no auxiliary blocks");
  std::size_t dim = blocks.front().config.embed_dim;
  for (const auto& b : blocks) {
    if (b.layer == 0 || b.layer > shapes.size()) throw ContractError("auxiliary block references a missing layer");
    if (b.channels() != shapes[b.layer - 1][0]) throw DimensionError("auxiliary block channel count differs from its tap");
    if (b.config.embed_dim != dim || b.proj_weight.dim(0) != dim) throw ContractError("auxiliary blocks disagree on d'");
    if (b.centers.dim(0) != model.spec().classes) throw ContractError("auxiliary block class count differs from backbone");
  }
}


struct Channelwise {
  std::vector<double> mean, sd;

  Tensor apply(const Tensor& x) const {
    std::vector<double> v(x.numel());
    for (std::size_t c = 0; c < v.size(); ++c) v[c] = (x[c] - mean[c]) / sd[c];
    return Tensor(x.shape(), std::move(v));
  }
  std::pair<Tensor, Tensor> to_standard(const Tensor& w, const Tensor& b) const {
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    std::vector<double> wv(rows * cols), bv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = b[r];
      for (std::size_t c = 0; c < cols; ++c) {
        wv[r * cols + c] = w[r * cols + c] * sd[c];
        acc += w[r * cols + c] * mean[c];
      }
      bv[r] = acc;
    }
    return {Tensor(w.shape(), std::move(wv), true), Tensor(b.shape(), std::move(bv), true)};
  }
  std::pair<Tensor, Tensor> from_standard(const Tensor& w, const Tensor& b) const {
    const std::size_t rows = w.dim(0), cols = w.dim(1);
    std::vector<double> wv(rows * cols), bv(rows);
    for (std::size_t r = 0; r < rows; ++r) {
      double acc = b[r];
      for (std::size_t c = 0; c < cols; ++c) {
        wv[r * cols + c] = w[r * cols + c] / sd[c];
        acc -= wv[r * cols + c] * mean[c];
      }
      bv[r] = acc;
    }
    return {Tensor(w.shape(), std::move(wv)), Tensor(b.shape(), std::move(bv))};
  }
};

Channelwise channel_stats(const std::vector<std::vector<Tensor>>& pooled, std::size_t layer) {
  const std::size_t c = pooled.front().at(layer).numel();
  Channelwise st{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  for (const auto& s : pooled) {
    for (std::size_t j = 0; j < c; ++j) st.mean[j] += s[layer][j];
  }
  for (auto& m : st.mean) m /= static_cast<double>(pooled.size());
  for (const auto& s : pooled) {
    for (std::size_t j = 0; j < c; ++j) st.sd[j] += (s[layer][j] - st.mean[j]) * (s[layer][j] - st.mean[j]);
  }
  for (auto& v : st.sd) {
    v = std::sqrt(v / static_cast<double>(pooled.size()));
    if (v < 1e-6) v = 1.0;  // dead channel
  }
  return st;
}

void copy_values(const Tensor& from, Tensor& to) {
  auto dst = to.mutable_data();
  std::copy(from.data().begin(), from.data().end(), dst.begin());
}

}  // namespace

TrainLog train_aux(const BackboneModel& model, std::vector<AuxBlock>& blocks, const LabeledDataset& data,
                   const AuxTrainOptions& options) {
  if (!model.frozen()) throw ContractError("train_aux: backbone must be frozen");
  check_blocks(model, blocks);
  if (blocks.size() != model.spec().tap_count()) throw ContractError("train_aux: need one block per tapped layer");
  if (data.empty()) throw DataError("train_aux: empty dataset");
  data.validate();
  if (options.batch_size == 0 || !(options.learning_rate > 0.0)) throw ConfigError("train_aux: bad batch size or rate");

  TrainLog log;
  if (options.epochs == 0) return log;
  const auto pooled = pooled_taps(model, data);
  std::vector<std::vector<Tensor>> val_pooled;
  if (options.validation) val_pooled = pooled_taps(model, *options.validation);

  // Optimise in per-channel standardised tap coordinates. The function class
  // is unchanged: W' = W diag(sd), b' = b + W mu, folded back after training.
  std::vector<Channelwise> stats;
  for (const auto& b : blocks) stats.push_back(channel_stats(pooled, b.layer - 1));
  std::vector<std::vector<Tensor>> std_pooled(pooled.size());
  for (std::size_t i = 0; i < pooled.size(); ++i) {
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      std_pooled[i].push_back(stats[b].apply(pooled[i][blocks[b].layer - 1]));
    }
  }
  std::vector<Tensor> params;
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    auto [w, bias] = stats[b].to_standard(blocks[b].proj_weight, blocks[b].proj_bias);
    params.push_back(w);
    params.push_back(bias);
    params.push_back(blocks[b].centers.detach(true));
  }
  auto folded = [&] {
    auto out = blocks;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      auto [w, bias] = stats[b].from_standard(params[3 * b], params[3 * b + 1]);
      out[b].proj_weight = w;
      out[b].proj_bias = bias;
      out[b].centers = params[3 * b + 2].detach(false);
    }
    return out;
  };
  SgdMomentum opt(options.learning_rate, options.momentum);
  Rng rng(derive_seed(options.seed, 0xA7A1));
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = balanced_order(data.labels, data.classes, rng);
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      auto bg = batch_gradient(params, batch, [&](std::span<const Tensor> replica, std::size_t i) {
        std::vector<Tensor> losses;
        for (std::size_t b = 0; b < blocks.size(); ++b) {
          const auto& w = replica[3 * b];
          const auto& bias = replica[3 * b + 1];
          const auto& centers = replica[3 * b + 2];
          const auto emb = aux_forward_pooled(std_pooled[i][b], w, bias);
          losses.push_back(arcface_loss(cosine_scores(centers, emb), data.labels[i], blocks[b].config));
        }
        return global_loss(losses);
      });
      loss_sum += bg.mean_loss * static_cast<double>(batch.size());
      std::vector<std::span<double>> ps;
      std::vector<std::span<const double>> gs;
      for (std::size_t k = 0; k < params.size(); ++k) {
        ps.push_back(params[k].mutable_data());
        gs.push_back(bg.grads[k]);
      }
      opt.step(ps, gs);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(rec.loss)) throw NonFiniteError("train_aux: loss diverged");
    rec.val_accuracy = std::nan("");
    rec.metric =
        options.validation ? scores_from_pooled(folded(), val_pooled, options.validation->labels).tcs : std::nan("");
    log.push_back(rec);
  }
  const auto trained = folded();
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    copy_values(trained[b].proj_weight, blocks[b].proj_weight);
    copy_values(trained[b].proj_bias, blocks[b].proj_bias);
    copy_values(trained[b].centers, blocks[b].centers);
  }
  return log;
}

LayerScoreReport layer_scores_from(std::span<const Tensor> centers, const std::vector<std::vector<Tensor>>& embeddings,
                                   const std::vector<std::size_t>& labels, std::span<const std::size_t> layer_ids) {
  if (labels.empty()) throw DataError("layer_scores: empty validation set");
  if (centers.size() != embeddings.size() || centers.empty()) throw ContractError("layer_scores: layer count mismatch");
  LayerScoreReport report;
  for (std::size_t l = 0; l < centers.size(); ++l) {
    if (embeddings[l].size() != labels.size()) throw ContractError("layer_scores: sample count mismatch");
    const std::size_t classes = centers[l].dim(0);
    double plus = 0.0, minus = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
      if (labels[i] >= classes) throw DataError("layer_scores: label out of range");
      const auto cs = cosine_scores(centers[l], embeddings[l][i]);
      double neg = 0.0;
      for (std::size_t j = 0; j < classes; ++j) {
        if (j != labels[i]) neg += cs[j];
      }
      plus += cs[labels[i]];
      minus += neg / static_cast<double>(classes - 1);
    }
    LayerScore s;
    s.layer = layer_ids.empty() ? l + 1 : layer_ids[l];
    s.cs_plus = plus / static_cast<double>(labels.size());
    s.cs_minus = minus / static_cast<double>(labels.size());
    s.cs_avg = 0.5 * (s.cs_plus - s.cs_minus);
    report.layers.push_back(s);
    report.tcs += s.cs_avg;
  }
  report.tcs /= static_cast<double>(report.layers.size());
  return report;
}

LayerScoreReport layer_scores(const BackboneModel& model, const std::vector<AuxBlock>& blocks,
                              const LabeledDataset& valset) {
  if (valset.empty()) throw DataError("layer_scores: empty validation set");
  valset.validate();
  check_blocks(model, blocks);
  return scores_from_pooled(blocks, pooled_taps(model, valset), valset.labels);
}

std::vector<std::size_t> select_layers(std::span<const LayerScore> scores, const SelectionPolicy& policy) {
  const std::size_t n = scores.size();
  if (policy.kind == SelectionPolicy::Kind::Offset) {
    if (policy.value < 1 || policy.value > n) {
      throw ContractError("select_layers: offset " + std::to_string(policy.value) + " outside [1, " + std::to_string(n) + "]");
    }
    std::vector<std::size_t> out;
    for (std::size_t i = policy.value - 1; i < n; ++i) out.push_back(scores[i].layer);
    return out;
  }
  if (policy.value < 1 || policy.value > n) {
    throw ContractError("select_layers: cannot pick " + std::to_string(policy.value) + " of " + std::to_string(n) + " layers");
  }
  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a].cs_avg != scores[b].cs_avg) return scores[a].cs_avg > scores[b].cs_avg;
    return scores[a].layer < scores[b].layer;
  });
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < policy.value; ++i) out.push_back(scores[idx[i]].layer);
  return out;
}

void append_aux(Container& c, const std::vector<AuxBlock>& blocks) {
  auto& s = c.add("aux");
  s.set("count", blocks.size());
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const auto p = "block" + std::to_string(i) + ".";
    s.set(p + "layer", b.layer);
    s.set(p + "scale", b.config.scale);
    s.set(p + "margin", b.config.margin);
    s.set(p + "embed_dim", b.config.embed_dim);
    s.set(p + "classes", b.config.classes);
    for (const auto& t : b.parameters()) s.tensors.push_back(t.detach());
  }
}

std::vector<AuxBlock> read_aux(const Container& c) {
  const auto& s = c.at("aux");
  const auto n = static_cast<std::size_t>(s.get_int("count"));
  if (s.tensors.size() != 3 * n) throw FormatError("aux section has the wrong number of tensors");
  std::vector<AuxBlock> blocks;
  for (std::size_t i = 0; i < n; ++i) {
    const auto p = "block" + std::to_string(i) + ".";
    AuxBlock b;
    b.layer = static_cast<std::size_t>(s.get_int(p + "layer"));
    b.config.scale = s.get_double(p + "scale");
    b.config.margin = s.get_double(p + "margin");
    b.config.embed_dim = static_cast<std::size_t>(s.get_int(p + "embed_dim"));
    b.config.classes = static_cast<std::size_t>(s.get_int(p + "classes"));
    b.proj_weight = s.tensor(3 * i).detach();
    b.proj_bias = s.tensor(3 * i + 1).detach();
    b.centers = s.tensor(3 * i + 2).detach();
    blocks.push_back(std::move(b));
  }
  return blocks;
}

}  // namespace ucan
