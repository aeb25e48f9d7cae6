#include "ucan/detectors.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "ucan/errors.hpp"
#include "ucan/ops.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

const char* source_name(FeatureSource s) {
  switch (s) {
    case FeatureSource::RawTaps: return "raw";
    case FeatureSource::UcanEmbedding: return "ucan";
    case FeatureSource::UcanCosine: return "ucan-cs";
  }
  return "?";
}

FeatureSource source_from(const std::string& name) {
  if (name == "raw") return FeatureSource::RawTaps;
  if (name == "ucan") return FeatureSource::UcanEmbedding;
  if (name == "ucan-cs") return FeatureSource::UcanCosine;
  throw ConfigError("unknown feature source '" + name + "'");
}

FeatureExtractor::FeatureExtractor(const BackboneModel& model, const std::vector<AuxBlock>* blocks,
                                   std::vector<std::size_t> layers, FeatureSource source)
    : model_(&model), blocks_(blocks), layers_(std::move(layers)), source_(source) {
  if (layers_.empty()) throw ContractError("feature extractor: empty layer set");
  const std::size_t n = model.spec().tap_count();
  for (auto k : layers_) {
    if (k == 0 || k > n) throw ContractError("feature extractor: layer " + std::to_string(k) + " does not exist");
    if (source_ == FeatureSource::RawTaps) continue;
    if (!blocks_) throw ContractError("feature extractor: U-CAN source needs auxiliary blocks");
    const bool found = std::any_of(blocks_->begin(), blocks_->end(), [k](const AuxBlock& b) { return b.layer == k; });
    if (!found) throw ContractError("feature extractor: no auxiliary block for layer " + std::to_string(k));
  }
}

FeatureExtractor::Traced FeatureExtractor::trace(const Tensor& x) const {
  auto out = model_->forward_with_taps(x);
  Traced t;
  t.logits = out.logits;
  for (auto k : layers_) {
    const auto& z = out.taps[k - 1];
    if (source_ == FeatureSource::RawTaps) {
      t.layers.push_back(z.reshape({z.numel()}));
      continue;
    }
    const auto& blk = *std::find_if(blocks_->begin(), blocks_->end(), [k](const AuxBlock& b) { return b.layer == k; });
    auto emb = aux_forward_pooled(ops::global_avg_pool(z), blk.proj_weight, blk.proj_bias);
    t.layers.push_back(source_ == FeatureSource::UcanCosine ? cosine_scores(blk, emb) : emb);
  }
  return t;
}

Features FeatureExtractor::extract(const Tensor& x) const {
  const auto t = trace(x);
  Features f;
  f.logits.assign(t.logits.data().begin(), t.logits.data().end());
  f.predicted = ops::argmax(f.logits);
  for (const auto& l : t.layers) f.layers.emplace_back(l.data().begin(), l.data().end());
  return f;
}

std::vector<Features> FeatureExtractor::extract_all(std::span<const Tensor> xs) const {
  std::vector<Features> out(xs.size());
  parallel_for(xs.size(), [&](std::size_t i) { out[i] = extract(xs[i]); });
  return out;
}

Verdict make_verdict(double adversarial_score, double threshold) {
  Verdict v;
  v.adversarial_score = std::clamp(adversarial_score, 0.0, 1.0);
  v.benign_score = 1.0 - v.adversarial_score;
  v.threshold = threshold;
  v.adversarial = v.adversarial_score >= threshold;
  return v;
}

// ---------------------------------------------------------------- DKNN

namespace {

void check_feature_layout(const std::vector<Features>& fs, const std::vector<std::size_t>& labels,
                          std::vector<std::size_t>& dims, const char* what) {
  if (fs.size() != labels.size()) throw DataError(std::string(what) + ": label count mismatch");
  for (const auto& f : fs) {
    if (dims.empty()) {
      for (const auto& l : f.layers) dims.push_back(l.size());
    }
    if (f.layers.size() != dims.size()) throw ContractError(std::string(what) + ": layer count mismatch");
    for (std::size_t p = 0; p < dims.size(); ++p) {
      if (f.layers[p].size() != dims[p]) throw DimensionError(std::string(what) + ": feature width mismatch");
    }
  }
}

double distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double t = a[i] - b[i];
    d += t * t;
  }
  return std::sqrt(d);
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

DknnDetector DknnDetector::build(const std::vector<Features>& train, const std::vector<std::size_t>& train_labels,
                                 const std::vector<Features>& calib, const std::vector<std::size_t>& calib_labels,
                                 std::size_t k, std::size_t classes) {
  if (train.empty()) throw DataError("dknn: empty train split");
  if (calib.empty()) throw DataError("dknn: empty calibration split");
  if (k == 0) throw ConfigError("dknn: k must be at least 1");
  DknnDetector d;
  check_feature_layout(train, train_labels, d.dims_, "dknn train");
  check_feature_layout(calib, calib_labels, d.dims_, "dknn calibration");
  std::vector<std::size_t> counts(classes, 0);
  for (auto y : train_labels) {
    if (y >= classes) throw DataError("dknn: train label out of range");
    ++counts[y];
  }
  for (auto y : calib_labels) {
    if (y >= classes) throw DataError("dknn: calibration label out of range");
  }
  if (k > *std::min_element(counts.begin(), counts.end())) {
    throw ConfigError("dknn: k=" + std::to_string(k) + " exceeds the smallest per-class train count");
  }
  d.k_ = k;
  d.classes_ = classes;
  d.labels_ = train_labels;
  d.points_.resize(d.dims_.size());
  for (std::size_t p = 0; p < d.dims_.size(); ++p) {
    d.points_[p].reserve(train.size() * d.dims_[p]);
    for (const auto& f : train) d.points_[p].insert(d.points_[p].end(), f.layers[p].begin(), f.layers[p].end());
  }

  std::vector<std::vector<DknnDetector::Scan>> scans(calib.size());
  parallel_for(calib.size(), [&](std::size_t i) {
    for (std::size_t p = 0; p < d.dims_.size(); ++p) scans[i].push_back(d.scan(p, calib[i].layers[p], calib_labels[i]));
  });
  d.scale_.assign(d.dims_.size(), 1.0);
  for (std::size_t p = 0; p < d.dims_.size(); ++p) {
    std::vector<double> ds;
    for (const auto& s : scans) ds.push_back(s[p].label_distance);
    const double m = median(ds);
    d.scale_[p] = m > 0.0 ? m : 1.0;
  }
  d.calib_.resize(calib.size());
  parallel_for(calib.size(), [&](std::size_t i) { d.calib_[i] = d.nonconformity(calib[i], calib_labels[i]); });
  std::sort(d.calib_.begin(), d.calib_.end());
  return d;
}

DknnDetector::Scan DknnDetector::scan(std::size_t pos, std::span<const double> q, std::size_t label) const {
  const std::size_t n = labels_.size();
  std::vector<std::pair<double, std::size_t>> all(n);
  for (std::size_t i = 0; i < n; ++i) all[i] = {distance(q, train_point(pos, i)), i};
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k_), all.end());
  Scan s;
  for (std::size_t j = 0; j < k_; ++j) s.disagree += labels_[all[j].second] != label ? 1 : 0;
  std::vector<double> same;
  for (const auto& [dist, i] : all) {
    if (labels_[i] == label) same.push_back(dist);
  }
  const std::size_t kk = std::min(k_, same.size());
  std::partial_sort(same.begin(), same.begin() + static_cast<std::ptrdiff_t>(kk), same.end());
  double sum = 0.0;
  for (std::size_t j = 0; j < kk; ++j) sum += same[j];
  s.label_distance = kk ? sum / static_cast<double>(kk) : std::numeric_limits<double>::infinity();
  return s;
}

double DknnDetector::nonconformity(const Features& f, std::size_t label) const {
  if (f.layers.size() != dims_.size()) throw ContractError("dknn: input covers a different layer set");
  if (label >= classes_) throw IndexError("dknn: label out of range");
  double count = 0.0, frac = 0.0;
  for (std::size_t p = 0; p < dims_.size(); ++p) {
    if (f.layers[p].size() != dims_[p]) throw DimensionError("dknn: feature width mismatch");
    const auto s = scan(p, f.layers[p], label);
    count += static_cast<double>(s.disagree);
    frac += std::isfinite(s.label_distance) ? s.label_distance / (s.label_distance + scale_[p]) : 1.0;
  }
  frac /= static_cast<double>(dims_.size());
  return count + std::min(frac, std::nextafter(1.0, 0.0));
}

double DknnDetector::p_value_of(double alpha) const {
  const auto it = std::lower_bound(calib_.begin(), calib_.end(), alpha);
  return static_cast<double>(calib_.end() - it) / static_cast<double>(calib_.size());
}

double DknnDetector::p_value(const Features& f) const { return p_value_of(nonconformity(f, f.predicted)); }

std::vector<std::size_t> DknnDetector::neighbors(std::size_t pos, std::span<const double> query) const {
  if (pos >= dims_.size() || query.size() != dims_[pos]) throw DimensionError("dknn: bad neighbour query");
  std::vector<std::pair<double, std::size_t>> all(labels_.size());
  for (std::size_t i = 0; i < labels_.size(); ++i) all[i] = {distance(query, train_point(pos, i)), i};
  std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(k_), all.end());
  std::vector<std::size_t> out;
  for (std::size_t j = 0; j < k_; ++j) out.push_back(all[j].second);
  return out;
}

void DknnDetector::append(Container& c, const std::string& section) const {
  auto& s = c.add(section);
  s.set("kind", kind());
  s.set("k", k_);
  s.set("classes", classes_);
  s.set("layers", dims_.size());
  for (std::size_t p = 0; p < dims_.size(); ++p) {
    s.tensors.emplace_back(Shape{labels_.size(), dims_[p]}, points_[p]);
  }
  std::vector<double> labels(labels_.begin(), labels_.end());
  s.tensors.emplace_back(Shape{labels.size()}, labels);
  s.tensors.emplace_back(Shape{scale_.size()}, scale_);
  s.tensors.emplace_back(Shape{calib_.size()}, calib_);
}

DknnDetector DknnDetector::read(const Section& s) {
  if (s.get("kind") != "dknn") throw FormatError("section '" + s.name + "' is not a dknn detector");
  DknnDetector d;
  d.k_ = static_cast<std::size_t>(s.get_int("k"));
  d.classes_ = static_cast<std::size_t>(s.get_int("classes"));
  const auto layers = static_cast<std::size_t>(s.get_int("layers"));
  for (std::size_t p = 0; p < layers; ++p) {
    const auto& t = s.tensor(p);
    d.dims_.push_back(t.dim(1));
    d.points_.emplace_back(t.data().begin(), t.data().end());
  }
  for (double v : s.tensor(layers).data()) d.labels_.push_back(static_cast<std::size_t>(v));
  d.scale_.assign(s.tensor(layers + 1).data().begin(), s.tensor(layers + 1).data().end());
  d.calib_.assign(s.tensor(layers + 2).data().begin(), s.tensor(layers + 2).data().end());
  return d;
}

// ---------------------------------------------------------------- DNR

namespace {

std::vector<std::size_t> stratified_cap(const std::vector<std::size_t>& labels, std::size_t classes, std::size_t cap,
                                        std::uint64_t seed) {
  Rng rng(derive_seed(seed, 0xD17));
  auto order = balanced_order(labels, classes, rng);
  if (order.size() > cap) order.resize(cap);
  std::sort(order.begin(), order.end());
  return order;
}

double sigmoid(double x) { return x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x)); }

}  // namespace

DnrDetector DnrDetector::train(const std::vector<Features>& train, const std::vector<std::size_t>& train_labels,
                               const std::vector<Features>& held_out, const std::vector<std::size_t>& held_out_labels,
                               std::size_t classes, const DnrOptions& options) {
  if (train.empty()) throw DataError("dnr: empty train split");
  std::vector<std::size_t> dims;
  check_feature_layout(train, train_labels, dims, "dnr train");
  DnrDetector d;
  const auto pick = stratified_cap(train_labels, classes, options.max_train, options.seed);
  std::vector<std::size_t> labels;
  for (auto i : pick) labels.push_back(train_labels[i]);
  for (std::size_t p = 0; p < dims.size(); ++p) {
    std::vector<std::vector<double>> X;
    for (auto i : pick) X.push_back(train[i].layers[p]);
    d.layers_.push_back(OvrSvm::fit(X, labels, classes, options.svm));
  }
  if (dims.size() > 1) {
    if (held_out.empty()) throw DataError("dnr: combiner needs held-out benign features");
    check_feature_layout(held_out, held_out_labels, dims, "dnr held-out");
    const auto hpick = stratified_cap(held_out_labels, classes, options.max_train, options.seed + 1);
    std::vector<std::vector<double>> Z(hpick.size());
    std::vector<std::size_t> hl;
    for (auto i : hpick) hl.push_back(held_out_labels[i]);
    parallel_for(hpick.size(), [&](std::size_t j) { Z[j] = d.layer_decisions(held_out[hpick[j]]); });
    d.combiner_ = OvrSvm::fit(Z, hl, classes, options.svm);
  }
  return d;
}

std::vector<double> DnrDetector::layer_decisions(const Features& f) const {
  if (f.layers.size() != layers_.size()) throw ContractError("dnr: input covers a different layer set");
  std::vector<double> out;
  for (std::size_t p = 0; p < layers_.size(); ++p) {
    const auto v = layers_[p].decision_values(f.layers[p]);
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<double> DnrDetector::combined(const Features& f) const {
  auto v = layer_decisions(f);
  return combiner_ ? combiner_->decision_values(v) : v;
}

double DnrDetector::benign_confidence(const Features& f) const {
  const auto v = combined(f);
  return *std::max_element(v.begin(), v.end());
}

double DnrDetector::adversarial_score(const Features& f) const { return sigmoid(-benign_confidence(f)); }

void DnrDetector::append(Container& c, const std::string& section) const {
  auto& s = c.add(section);
  s.set("kind", kind());
  s.set("layers", layers_.size());
  s.set("combiner", combiner_ ? 1 : 0);
  for (std::size_t p = 0; p < layers_.size(); ++p) layers_[p].append(s, "layer" + std::to_string(p) + ".");
  if (combiner_) combiner_->append(s, "combiner.");
}

DnrDetector DnrDetector::read(const Section& s) {
  if (s.get("kind") != "dnr") throw FormatError("section '" + s.name + "' is not a dnr detector");
  DnrDetector d;
  const auto layers = static_cast<std::size_t>(s.get_int("layers"));
  for (std::size_t p = 0; p < layers; ++p) d.layers_.push_back(OvrSvm::read(s, "layer" + std::to_string(p) + "."));
  if (s.get_int("combiner") != 0) d.combiner_ = OvrSvm::read(s, "combiner.");
  return d;
}

// ---------------------------------------------------------------- SAD

double sad_score(std::span<const double> logits) {
  if (logits.empty()) throw DimensionError("sad: empty logits");
  const auto p = ops::softmax(logits);
  return 1.0 - *std::max_element(p.begin(), p.end());
}

void SadDetector::append(Container& c, const std::string& section) const { c.add(section).set("kind", kind()); }

// ---------------------------------------------------------------- thresholds

Threshold calibrate_threshold(std::span<const double> scores, std::span<const char> adversarial) {
  if (scores.size() != adversarial.size()) throw DimensionError("calibrate_threshold: score/label count mismatch");
  std::size_t positives = 0;
  for (char a : adversarial) positives += a ? 1 : 0;
  if (positives == 0 || positives == scores.size()) throw DataError("calibrate_threshold: need both classes");

  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Walk thresholds upward; at each distinct value everything >= it is flagged.
  std::size_t tp = positives, fp = scores.size() - positives;
  Threshold best{std::numeric_limits<double>::infinity(), 0.0};
  std::size_t i = 0;
  bool first = true;
  while (i < idx.size()) {
    const double t = scores[idx[i]];
    const double f1 = 2.0 * static_cast<double>(tp) /
                      static_cast<double>(2 * tp + fp + (positives - tp));
    if (first || f1 > best.f1) {
      best = {t, f1};
      first = false;
    }
    while (i < idx.size() && scores[idx[i]] == t) {
      if (adversarial[idx[i]]) --tp;
      else --fp;
      ++i;
    }
  }
  return best;
}

std::unique_ptr<Detector> read_detector(const Container& c, const std::string& section) {
  const auto& s = c.at(section);
  const auto& kind = s.get("kind");
  if (kind == "dknn") return std::make_unique<DknnDetector>(DknnDetector::read(s));
  if (kind == "dnr") return std::make_unique<DnrDetector>(DnrDetector::read(s));
  if (kind == "sad") return std::make_unique<SadDetector>();
  throw FormatError("unknown detector kind '" + kind + "'");
}

}  // namespace ucan
