#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ucan/attacks.hpp"
#include "ucan/auxiliary.hpp"
#include "ucan/detectors.hpp"

namespace ucan {

struct PrPoint {
  double threshold = 0.0;
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
};

/// Ascending thresholds; adversarial is the positive class.
using PrCurve = std::vector<PrPoint>;

/// One point per distinct score. With higher_is_adversarial a sample is
/// flagged when score >= t, otherwise when score <= t (thresholds are then
/// listed in descending order so recall still falls along the curve).
PrCurve pr_curve(std::span<const double> scores, std::span<const char> adversarial, bool higher_is_adversarial = true);

/// Max-F1 point, ties to the earliest (lowest) threshold.
Threshold best_f1(const PrCurve& curve);

inline constexpr std::size_t kRecallGridPoints = 101;

/// Interpolated precision p(r) = max precision at recall >= r on the grid
/// r_i = i / (points - 1).
std::vector<double> interpolate_precision(const PrCurve& curve, std::size_t points = kRecallGridPoints);
/// Mean of the interpolated precisions of several curves.
std::vector<double> average_precision_curve(std::span<const PrCurve> curves, std::size_t points = kRecallGridPoints);

/// A detector over a fixed feature source.
struct DetectorEntry {
  std::string name;  // dknn, dnr, sad
  const FeatureExtractor* features = nullptr;
  const Detector* detector = nullptr;
};

struct GridOptions {
  /// Only successfully attacked samples count as adversarial positives.
  bool successful_only = true;
  std::uint64_t seed = 0;
};

struct EvalCell {
  std::string detector;
  std::string source;
  std::string attack;
  double epsilon = 0.0;
  std::uint64_t seed = 0;
  std::string status = "ok";
  std::size_t benign = 0;
  std::size_t adversarial = 0;
  double success_rate = 0.0;
  double threshold = 0.0;
  double f1 = 0.0;
  std::vector<double> scores;
  std::vector<char> labels;
  PrCurve curve;

  bool ok() const { return status == "ok"; }
};

struct AverageRow {
  std::string detector;
  std::string source;
  std::size_t cells = 0;
  double f1 = 0.0;
};

struct OverheadRow {
  std::size_t layer = 0;
  std::size_t channels = 0;
  std::size_t parameters = 0;
};

struct OverheadReport {
  std::vector<OverheadRow> layers;
  std::size_t aux_parameters = 0;
  std::size_t backbone_parameters = 0;
  double percent = 0.0;
};

struct LatencyStats {
  std::string label;
  std::size_t batch = 0;
  std::size_t iterations = 0;
  double mean_seconds = 0.0;
  double stddev_seconds = 0.0;
  std::string environment;
};

struct EvalReport {
  std::vector<EvalCell> cells;
  std::vector<AverageRow> averages;
  bool successful_only = true;
  std::size_t recall_grid = kRecallGridPoints;

  /// Mean F1 over the ok cells of (detector, source); NaN when none.
  double mean_f1(const std::string& detector, const std::string& source) const;
};

/// Scores one cell: benign originals of the kept samples against their
/// adversarial counterparts, so both pools have equal size.
EvalCell evaluate_cell(const DetectorEntry& entry, const AdvBatch& batch, const GridOptions& options);

/// Every detector against every batch; rows ordered detector-major. Null
/// detectors or extractors raise ResolutionError naming the entry.
EvalReport evaluate_grid(std::span<const DetectorEntry> detectors, std::span<const AdvBatch> batches,
                         const GridOptions& options);

/// Per (detector, source) arithmetic mean of the ok cells.
std::vector<AverageRow> average_rows(std::span<const EvalCell> cells);

/// Closed form sum_k (C_k d' + d' + CL d').
std::size_t aux_parameter_count(std::span<const std::size_t> channels, std::size_t embed_dim, std::size_t classes);
OverheadReport overhead_report(const BackboneModel& model, const std::vector<AuxBlock>& blocks);

/// Times `run` on one batch: one warm-up call, then `iterations` timed calls
/// on a single worker thread.
LatencyStats latency_bench(const std::string& label, const std::function<void()>& run, std::size_t batch,
                           std::size_t iterations = 10);
/// Feature extraction plus detector scoring for a batch of inputs.
LatencyStats detection_latency(const std::string& label, const DetectorEntry& entry, std::span<const Tensor> batch,
                               std::size_t iterations = 10);
std::string environment_descriptor();

/// Column order: detector,source,attack,epsilon,seed,status,benign,
/// adversarial,success_rate,threshold,best_f1. Average rows follow with
/// attack "average".
std::string report_csv(const EvalReport& report);
std::string report_json(const EvalReport& report);
/// threshold,precision,recall,f1
std::string pr_csv(const PrCurve& curve);
/// Averaged PR curves, one polyline per series.
std::string pr_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& series);
std::string overhead_csv(const OverheadReport& report);
std::string latency_csv(std::span<const LatencyStats> rows);

/// Writes report.csv, report.json, pr/<cell>.csv and pr_<detector>.svg.
void write_report(const EvalReport& report, const std::filesystem::path& dir);

}  // namespace ucan
