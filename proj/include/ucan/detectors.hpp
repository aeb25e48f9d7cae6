#pragma once

#include <memory>
#include <span>
#include <string>
#include <vector>

#include "ucan/auxiliary.hpp"
#include "ucan/backbone.hpp"
#include "ucan/container.hpp"
#include "ucan/svm.hpp"

namespace ucan {

/// Where a detector's per-layer inputs come from. Raw taps are the flattened
/// backbone feature maps; the U-CAN sources are the refined embedding p~_k and
/// its cosine scores CS_k.
enum class FeatureSource { RawTaps, UcanEmbedding, UcanCosine };

const char* source_name(FeatureSource s);
FeatureSource source_from(const std::string& name);

struct Features {
  std::vector<std::vector<double>> layers;  // one vector per selected layer
  std::vector<double> logits;
  std::size_t predicted = 0;
};

/// Maps an input to detector features over a fixed layer set.
class FeatureExtractor {
 public:
  FeatureExtractor(const BackboneModel& model, const std::vector<AuxBlock>* blocks, std::vector<std::size_t> layers,
                   FeatureSource source);

  Features extract(const Tensor& x) const;
  std::vector<Features> extract_all(std::span<const Tensor> xs) const;

  /// Same features kept on the autodiff graph (x may require grad).
  struct Traced {
    Tensor logits;
    std::vector<Tensor> layers;
  };
  Traced trace(const Tensor& x) const;

  const BackboneModel& model() const { return *model_; }
  const std::vector<std::size_t>& layers() const { return layers_; }
  FeatureSource source() const { return source_; }

 private:
  const BackboneModel* model_;
  const std::vector<AuxBlock>* blocks_;
  std::vector<std::size_t> layers_;
  FeatureSource source_;
};

struct Verdict {
  double benign_score = 1.0;
  double adversarial_score = 0.0;
  bool adversarial = false;
  double threshold = 0.0;
};

/// v = (1 - a, a); flagged when a >= threshold.
Verdict make_verdict(double adversarial_score, double threshold);

class Detector {
 public:
  virtual ~Detector() = default;
  virtual std::string kind() const = 0;
  /// In [0, 1]; larger means more likely adversarial.
  virtual double adversarial_score(const Features& f) const = 0;
  virtual void append(Container& c, const std::string& section) const = 0;

  Verdict verdict(const Features& f, double threshold) const {
    return make_verdict(adversarial_score(f), threshold);
  }
};

class DknnDetector : public Detector {
 public:
  /// Train features index the neighbours; calibration features (with their
  /// true labels) supply the reference nonconformity scores.
  static DknnDetector build(const std::vector<Features>& train, const std::vector<std::size_t>& train_labels,
                            const std::vector<Features>& calib, const std::vector<std::size_t>& calib_labels,
                            std::size_t k, std::size_t classes);

  std::string kind() const override { return "dknn"; }
  double adversarial_score(const Features& f) const override { return 1.0 - p_value(f); }
  void append(Container& c, const std::string& section) const override;
  static DknnDetector read(const Section& s);

  /// Disagreeing-neighbour count over all layers plus a distance tie-break in
  /// [0, 1): the mean over layers of d/(d + scale), d being the mean distance
  /// to the k nearest train points carrying `label`.
  double nonconformity(const Features& f, std::size_t label) const;
  /// Credibility of the backbone's predicted label.
  double p_value(const Features& f) const;
  double p_value_of(double alpha) const;

  /// Indices of the k nearest train points at layer position `pos`
  /// (ties to the lower index).
  std::vector<std::size_t> neighbors(std::size_t pos, std::span<const double> query) const;

  std::size_t k() const { return k_; }
  std::size_t classes() const { return classes_; }
  std::size_t layer_count() const { return dims_.size(); }
  std::size_t train_size() const { return labels_.size(); }
  std::size_t dim(std::size_t pos) const { return dims_[pos]; }
  const std::vector<std::size_t>& train_labels() const { return labels_; }
  std::span<const double> train_point(std::size_t pos, std::size_t i) const {
    return {points_[pos].data() + i * dims_[pos], dims_[pos]};
  }
  double layer_scale(std::size_t pos) const { return scale_[pos]; }
  /// Sorted ascending.
  const std::vector<double>& calibration_scores() const { return calib_; }

 private:
  struct Scan {
    std::size_t disagree = 0;
    double label_distance = 0.0;
  };
  Scan scan(std::size_t pos, std::span<const double> q, std::size_t label) const;

  std::size_t k_ = 5;
  std::size_t classes_ = 0;
  std::vector<std::size_t> dims_;
  std::vector<std::vector<double>> points_;
  std::vector<std::size_t> labels_;
  std::vector<double> scale_;
  std::vector<double> calib_;
};

struct DnrOptions {
  SvmOptions svm;
  /// Per-layer SVMs are fit on at most this many stratified train samples.
  std::size_t max_train = 400;
  std::uint64_t seed = 0;
};

class DnrDetector : public Detector {
 public:
  /// Per-layer one-vs-rest RBF-SVMs fit on benign train features; the
  /// combiner is a one-vs-rest RBF-SVM over the concatenated per-layer
  /// decision values of benign held-out features. With one layer the
  /// combiner is the identity.
  static DnrDetector train(const std::vector<Features>& train, const std::vector<std::size_t>& train_labels,
                           const std::vector<Features>& held_out, const std::vector<std::size_t>& held_out_labels,
                           std::size_t classes, const DnrOptions& options = {});

  std::string kind() const override { return "dnr"; }
  double adversarial_score(const Features& f) const override;
  void append(Container& c, const std::string& section) const override;
  static DnrDetector read(const Section& s);

  /// Concatenated per-layer decision values.
  std::vector<double> layer_decisions(const Features& f) const;
  /// Combiner decision values; benign confidence is their maximum.
  std::vector<double> combined(const Features& f) const;
  double benign_confidence(const Features& f) const;

  std::size_t layer_count() const { return layers_.size(); }
  const OvrSvm& layer_svm(std::size_t pos) const { return layers_[pos]; }

 private:
  std::vector<OvrSvm> layers_;
  std::optional<OvrSvm> combiner_;
};

/// Maximum-softmax baseline.
double sad_score(std::span<const double> logits);

class SadDetector : public Detector {
 public:
  std::string kind() const override { return "sad"; }
  double adversarial_score(const Features& f) const override { return sad_score(f.logits); }
  void append(Container& c, const std::string& section) const override;
};

struct Threshold {
  double threshold = 0.0;
  double f1 = 0.0;
};

/// F1-maximising cut over the observed scores plus +inf (flag when
/// score >= threshold; adversarial is the positive class). Ties go to the
/// lowest threshold.
Threshold calibrate_threshold(std::span<const double> scores, std::span<const char> adversarial);

std::unique_ptr<Detector> read_detector(const Container& c, const std::string& section);

}  // namespace ucan
