#include "ucan/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "ucan/errors.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

namespace {

std::string num(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.10g", v);
  return buf;
}

std::string fixed(double v, int digits) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

}  // namespace

PrCurve pr_curve(std::span<const double> scores, std::span<const char> adversarial, bool higher_is_adversarial) {
  if (scores.size() != adversarial.size()) throw DimensionError("pr_curve: score/label count mismatch");
  std::size_t positives = 0;
  for (char a : adversarial) positives += a ? 1 : 0;
  if (positives == 0 || positives == scores.size()) throw DataError("pr_curve: need both classes");

  const double sign = higher_is_adversarial ? 1.0 : -1.0;
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return sign * scores[a] < sign * scores[b]; });

  PrCurve curve;
  std::size_t tp = positives, fp = scores.size() - positives;
  std::size_t i = 0;
  while (i < idx.size()) {
    const double t = scores[idx[i]];
    PrPoint p;
    p.threshold = t;
    p.precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
    p.recall = static_cast<double>(tp) / static_cast<double>(positives);
    p.f1 = 2.0 * static_cast<double>(tp) / static_cast<double>(tp + fp + positives);
    curve.push_back(p);
    while (i < idx.size() && scores[idx[i]] == t) {
      if (adversarial[idx[i]]) --tp;
      else --fp;
      ++i;
    }
  }
  return curve;
}

Threshold best_f1(const PrCurve& curve) {
  if (curve.empty()) throw ContractError("best_f1: empty curve");
  Threshold best{curve.front().threshold, curve.front().f1};
  for (const auto& p : curve) {
    if (p.f1 > best.f1) best = {p.threshold, p.f1};
  }
  return best;
}

std::vector<double> interpolate_precision(const PrCurve& curve, std::size_t points) {
  if (points < 2) throw ConfigError("interpolate_precision: need at least two grid points");
  std::vector<double> out(points, 0.0);
  for (std::size_t i = 0; i < points; ++i) {
    const double r = static_cast<double>(i) / static_cast<double>(points - 1);
    for (const auto& p : curve) {
      if (p.recall >= r - 1e-12) out[i] = std::max(out[i], p.precision);
    }
  }
  return out;
}

std::vector<double> average_precision_curve(std::span<const PrCurve> curves, std::size_t points) {
  std::vector<double> sum(points, 0.0);
  if (curves.empty()) return sum;
  for (const auto& c : curves) {
    const auto p = interpolate_precision(c, points);
    for (std::size_t i = 0; i < points; ++i) sum[i] += p[i];
  }
  for (auto& v : sum) v /= static_cast<double>(curves.size());
  return sum;
}

double EvalReport::mean_f1(const std::string& detector, const std::string& source) const {
  for (const auto& a : averages) {
    if (a.detector == detector && a.source == source) return a.f1;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

EvalCell evaluate_cell(const DetectorEntry& entry, const AdvBatch& batch, const GridOptions& options) {
  if (!entry.detector || !entry.features) throw ResolutionError("detector '" + entry.name + "' is not loaded", entry.name);
  EvalCell cell;
  cell.detector = entry.name;
  cell.source = source_name(entry.features->source());
  cell.attack = batch.attack;
  cell.epsilon = batch.config.epsilon;
  cell.seed = options.seed;
  if (batch.size() == 0) {
    cell.status = "failed: empty batch";
    return cell;
  }
  std::size_t hits = 0;
  std::vector<Tensor> benign, adv;
  for (std::size_t i = 0; i < batch.size(); ++i) {
    hits += batch.success[i] ? 1 : 0;
    if (options.successful_only && !batch.success[i]) continue;
    benign.push_back(batch.originals[i]);
    adv.push_back(batch.adversarials[i]);
  }
  cell.success_rate = static_cast<double>(hits) / static_cast<double>(batch.size());
  cell.benign = benign.size();
  cell.adversarial = adv.size();
  if (adv.empty()) {
    cell.status = "failed: no successful adversarials";
    return cell;
  }
  const auto fb = entry.features->extract_all(benign);
  const auto fa = entry.features->extract_all(adv);
  cell.scores.resize(fb.size() + fa.size());
  parallel_for(cell.scores.size(), [&](std::size_t i) {
    cell.scores[i] = entry.detector->adversarial_score(i < fb.size() ? fb[i] : fa[i - fb.size()]);
  });
  cell.labels.assign(fb.size(), 0);
  cell.labels.resize(cell.scores.size(), 1);
  cell.curve = pr_curve(cell.scores, cell.labels);
  const auto t = best_f1(cell.curve);
  cell.threshold = t.threshold;
  cell.f1 = t.f1;
  return cell;
}

EvalReport evaluate_grid(std::span<const DetectorEntry> detectors, std::span<const AdvBatch> batches,
                         const GridOptions& options) {
  for (const auto& d : detectors) {
    if (!d.detector || !d.features) throw ResolutionError("detector '" + d.name + "' is not loaded", d.name);
  }
  EvalReport r;
  r.successful_only = options.successful_only;
  for (const auto& d : detectors) {
    for (const auto& b : batches) r.cells.push_back(evaluate_cell(d, b, options));
  }
  r.averages = average_rows(r.cells);
  return r;
}

std::vector<AverageRow> average_rows(std::span<const EvalCell> cells) {
  std::vector<AverageRow> rows;
  for (const auto& c : cells) {
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const AverageRow& a) { return a.detector == c.detector && a.source == c.source; });
    if (it == rows.end()) {
      rows.push_back({c.detector, c.source, 0, 0.0});
      it = rows.end() - 1;
    }
    if (!c.ok()) continue;
    it->f1 += c.f1;
    ++it->cells;
  }
  for (auto& a : rows) a.f1 = a.cells ? a.f1 / static_cast<double>(a.cells) : std::numeric_limits<double>::quiet_NaN();
  return rows;
}

std::size_t aux_parameter_count(std::span<const std::size_t> channels, std::size_t embed_dim, std::size_t classes) {
  if (embed_dim == 0) throw ConfigError("overhead: embedding width d' must be positive");
  if (classes == 0) throw ConfigError("overhead: class count must be positive");
  std::size_t n = 0;
  for (auto c : channels) n += c * embed_dim + embed_dim + classes * embed_dim;
  return n;
}

OverheadReport overhead_report(const BackboneModel& model, const std::vector<AuxBlock>& blocks) {
  OverheadReport r;
  for (const auto& b : blocks) {
    const std::size_t c = b.channels();
    const std::size_t n = aux_parameter_count(std::span<const std::size_t>(&c, 1), b.config.embed_dim, b.config.classes);
    if (n != b.parameter_count()) throw DimensionError("overhead: block shapes disagree with its config");
    r.layers.push_back({b.layer, c, n});
    r.aux_parameters += n;
  }
  r.backbone_parameters = model.parameter_count();
  const double total = static_cast<double>(r.aux_parameters + r.backbone_parameters);
  r.percent = total > 0 ? 100.0 * static_cast<double>(r.aux_parameters) / total : 0.0;
  return r;
}

std::string environment_descriptor() {
  std::ostringstream s;
#if defined(__clang__)
  s << "clang " << __clang_major__ << "." << __clang_minor__;
#elif defined(__GNUC__)
  s << "gcc " << __GNUC__ << "." << __GNUC_MINOR__;
#endif
  s << "; threads=1; hw=" << std::thread::hardware_concurrency();
#ifdef NDEBUG
  s << "; release";
#else
  s << "; debug";
#endif
  return s.str();
}

LatencyStats latency_bench(const std::string& label, const std::function<void()>& run, std::size_t batch,
                           std::size_t iterations) {
  if (iterations == 0) throw ConfigError("latency_bench: iterations must be at least 1");
  const std::size_t threads = thread_count();
  set_thread_count(1);
  std::vector<double> t;
  try {
    run();
    for (std::size_t i = 0; i < iterations; ++i) {
      const auto a = std::chrono::steady_clock::now();
      run();
      t.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - a).count());
    }
  } catch (...) {
    set_thread_count(threads);
    throw;
  }
  set_thread_count(threads);
  LatencyStats s;
  s.label = label;
  s.batch = batch;
  s.iterations = iterations;
  s.mean_seconds = std::accumulate(t.begin(), t.end(), 0.0) / static_cast<double>(t.size());
  double var = 0.0;
  for (double v : t) var += (v - s.mean_seconds) * (v - s.mean_seconds);
  s.stddev_seconds = std::sqrt(var / static_cast<double>(t.size()));
  s.environment = environment_descriptor();
  return s;
}

LatencyStats detection_latency(const std::string& label, const DetectorEntry& entry, std::span<const Tensor> batch,
                               std::size_t iterations) {
  if (!entry.detector || !entry.features) throw ResolutionError("detector '" + entry.name + "' is not loaded", entry.name);
  volatile double sink = 0.0;
  return latency_bench(
      label,
      [&] {
        for (const auto& x : batch) sink = sink + entry.detector->adversarial_score(entry.features->extract(x));
      },
      batch.size(), iterations);
}

std::string report_csv(const EvalReport& report) {
  std::ostringstream s;
  s << "detector,source,attack,epsilon,seed,status,benign,adversarial,success_rate,threshold,best_f1\n";
  for (const auto& c : report.cells) {
    s << c.detector << ',' << c.source << ',' << c.attack << ',' << num(c.epsilon) << ',' << c.seed << ',' << c.status
      << ',' << c.benign << ',' << c.adversarial << ',' << fixed(c.success_rate, 6) << ',' << num(c.threshold) << ','
      << fixed(c.f1, 6) << '\n';
  }
  for (const auto& a : report.averages) {
    s << a.detector << ',' << a.source << ",average,,," << (a.cells ? "ok" : "failed") << ",,,,," << fixed(a.f1, 6)
      << '\n';
  }
  return s.str();
}

std::string report_json(const EvalReport& report) {
  nlohmann::json j;
  j["successful_only"] = report.successful_only;
  j["recall_grid"] = {{"points", report.recall_grid}, {"rule", "max precision at recall >= r"}};
  auto& cells = j["cells"] = nlohmann::json::array();
  for (const auto& c : report.cells) {
    nlohmann::json e;
    e["detector"] = c.detector;
    e["source"] = c.source;
    e["attack"] = c.attack;
    e["epsilon"] = c.epsilon;
    e["seed"] = c.seed;
    e["status"] = c.status;
    e["benign"] = c.benign;
    e["adversarial"] = c.adversarial;
    e["success_rate"] = c.success_rate;
    e["threshold"] = std::isfinite(c.threshold) ? nlohmann::json(c.threshold) : nlohmann::json("inf");
    e["best_f1"] = c.f1;
    e["scores"] = c.scores;
    std::vector<int> labels(c.labels.begin(), c.labels.end());
    e["labels"] = labels;
    cells.push_back(std::move(e));
  }
  auto& avg = j["averages"] = nlohmann::json::array();
  for (const auto& a : report.averages) {
    avg.push_back({{"detector", a.detector}, {"source", a.source}, {"cells", a.cells},
                   {"best_f1", a.cells ? nlohmann::json(a.f1) : nlohmann::json(nullptr)}});
  }
  return j.dump(1);
}

std::string pr_csv(const PrCurve& curve) {
  std::ostringstream s;
  s << "threshold,precision,recall,f1\n";
  for (const auto& p : curve) s << num(p.threshold) << ',' << num(p.precision) << ',' << num(p.recall) << ',' << num(p.f1) << '\n';
  return s.str();
}

std::string pr_svg(const std::string& title, const std::vector<std::pair<std::string, std::vector<double>>>& series) {
  static const char* colours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};
  const double W = 420, H = 320, L = 50, T = 30, PW = 340, PH = 240;
  std::ostringstream s;
  s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n";
  s << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  s << "<text x=\"" << L << "\" y=\"18\" font-size=\"13\">" << title << "</text>\n";
  s << "<rect x=\"" << L << "\" y=\"" << T << "\" width=\"" << PW << "\" height=\"" << PH
    << "\" fill=\"none\" stroke=\"black\"/>\n";
  s << "<text x=\"" << L + PW / 2 - 15 << "\" y=\"" << T + PH + 28 << "\" font-size=\"11\">recall</text>\n";
  s << "<text x=\"8\" y=\"" << T + PH / 2 << "\" font-size=\"11\">precision</text>\n";
  for (std::size_t k = 0; k < series.size(); ++k) {
    const auto& [name, p] = series[k];
    const char* col = colours[k % 6];
    s << "<polyline fill=\"none\" stroke=\"" << col << "\" points=\"";
    for (std::size_t i = 0; i < p.size(); ++i) {
      const double r = p.size() > 1 ? static_cast<double>(i) / static_cast<double>(p.size() - 1) : 0.0;
      s << fixed(L + r * PW, 2) << ',' << fixed(T + (1.0 - p[i]) * PH, 2) << ' ';
    }
    s << "\"/>\n";
    s << "<text x=\"" << L + 8 << "\" y=\"" << T + PH - 10 - 14 * static_cast<double>(k) << "\" font-size=\"11\" fill=\""
      << col << "\">" << name << "</text>\n";
  }
  s << "</svg>\n";
  return s.str();
}

std::string overhead_csv(const OverheadReport& report) {
  std::ostringstream s;
  s << "layer,channels,aux_parameters\n";
  for (const auto& r : report.layers) s << r.layer << ',' << r.channels << ',' << r.parameters << '\n';
  s << "total,," << report.aux_parameters << '\n';
  s << "backbone,," << report.backbone_parameters << '\n';
  s << "percent,," << fixed(report.percent, 4) << '\n';
  return s.str();
}

std::string latency_csv(std::span<const LatencyStats> rows) {
  std::ostringstream s;
  s << "pipeline,batch,iterations,mean_seconds,stddev_seconds,environment\n";
  for (const auto& r : rows) {
    s << r.label << ',' << r.batch << ',' << r.iterations << ',' << num(r.mean_seconds) << ',' << num(r.stddev_seconds)
      << ",\"" << r.environment << "\"\n";
  }
  return s.str();
}

void write_report(const EvalReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir / "pr");
  write_text(dir / "report.csv", report_csv(report));
  write_text(dir / "report.json", report_json(report));
  std::map<std::string, std::map<std::string, std::vector<PrCurve>>> by_detector;
  for (const auto& c : report.cells) {
    if (!c.ok()) continue;
    const std::string name = c.detector + "_" + c.source + "_" + c.attack + "_eps" +
                             std::to_string(static_cast<int>(std::lround(c.epsilon * 255.0))) + "_s" +
                             std::to_string(c.seed);
    write_text(dir / "pr" / (name + ".csv"), pr_csv(c.curve));
    by_detector[c.detector][c.source].push_back(c.curve);
  }
  for (const auto& [det, sources] : by_detector) {
    std::vector<std::pair<std::string, std::vector<double>>> series;
    for (const auto& [src, curves] : sources) series.emplace_back(src, average_precision_curve(curves, report.recall_grid));
    write_text(dir / ("pr_" + det + ".svg"), pr_svg(det + " average PR", series));
  }
}

}  // namespace ucan
