#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "ucan/config.hpp"
#include "ucan/eval.hpp"

namespace ucan {

/// Artifact layout of one seeded run under <out_dir>/seed_<n>/:
///   data.ucan          train/val/calib/test splits
///   model.ucan         frozen backbone            backbone_log.csv
///   aux.ucan           auxiliary blocks           aux_log.csv
///   layers.json        layer scores, TCS and the selected layer set
///   adv/*.ucan(.json)  adversarial batches
///   detectors.ucan     one section per detector, "<kind>/<source>"
///   eval/              report.csv, report.json, pr/*.csv, pr_*.svg
///   bench/             latency.csv, overhead.csv
struct RunPaths {
  std::filesystem::path root;

  std::filesystem::path data() const { return root / "data.ucan"; }
  std::filesystem::path model() const { return root / "model.ucan"; }
  std::filesystem::path aux() const { return root / "aux.ucan"; }
  std::filesystem::path layers() const { return root / "layers.json"; }
  std::filesystem::path adv_dir() const { return root / "adv"; }
  std::filesystem::path detectors() const { return root / "detectors.ucan"; }
  std::filesystem::path eval_dir() const { return root / "eval"; }
  std::filesystem::path bench_dir() const { return root / "bench"; }
};

RunPaths run_paths(const RunConfig& cfg, std::uint64_t seed);

/// Stage seeds are derived from the run seed so every stage is reproducible
/// on its own.
enum class Stage : std::uint64_t { Data = 1, Split, BackboneInit, BackboneTrain, AuxInit, AuxTrain, Attack, Detector };
std::uint64_t stage_seed(std::uint64_t seed, Stage stage);

struct StageContext {
  RunConfig config;
  std::uint64_t seed = 0;
  RunPaths paths;
  std::ostream* log = nullptr;
};

StageContext make_context(const RunConfig& cfg, std::uint64_t seed, std::ostream* log = nullptr);

struct LayerSelection {
  LayerScoreReport scores;
  /// TCS of the freshly initialised blocks.
  double initial_tcs = 0.0;
  std::vector<std::size_t> selected;
};

void stage_gen_data(const StageContext& ctx);
void stage_train_backbone(const StageContext& ctx);
void stage_train_aux(const StageContext& ctx);
LayerSelection stage_select_layers(const StageContext& ctx);
void stage_attack(const StageContext& ctx);
void stage_build_detectors(const StageContext& ctx);
EvalReport stage_evaluate(const StageContext& ctx);
OverheadReport stage_report(const StageContext& ctx);
std::vector<LatencyStats> stage_bench(const StageContext& ctx);

/// gen-data through report for one seed.
EvalReport run_pipeline(const StageContext& ctx);

LayerSelection read_layer_selection(const std::filesystem::path& path);
EvalReport read_report_json(const std::filesystem::path& path);

/// Mean best-F1 per (detector, source) across seeds, one row each, plus the
/// per-seed means; written to <out_dir>/summary.csv by the report command.
std::string summary_csv(const std::vector<std::pair<std::uint64_t, EvalReport>>& runs);

}  // namespace ucan
