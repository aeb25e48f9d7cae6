// End-to-end acceptance run: one PASS/FAIL line per criterion.
//
//   acceptance [--config FILE] [--seeds 1,2,3] [--out DIR] [--only 1,5] [--expected-fail 4] [--report FILE]
//
// Exit status is non-zero when a criterion fails that is not listed in
// --expected-fail (or when an expected failure unexpectedly passes, so the
// list cannot go stale).

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <set>
#include <sstream>

#include "CLI11.hpp"
#include "gradient_suite.hpp"
#include "ucan/attacks.hpp"
#include "ucan/container.hpp"
#include "ucan/dataset.hpp"
#include "ucan/eval.hpp"
#include "ucan/pipeline.hpp"

using namespace ucan;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[256];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct SeedRun {
  std::uint64_t seed = 0;
  double aux_seconds = 0, attack_seconds = 0, total_seconds = 0;
  LayerSelection layers;
  EvalReport report;
  OverheadReport overhead;
  std::vector<LatencyStats> latency;
};

SeedRun run_seed(const RunConfig& cfg, std::uint64_t seed) {
  const auto ctx = make_context(cfg, seed, &std::cerr);
  SeedRun r;
  r.seed = seed;
  const auto t0 = Clock::now();
  stage_gen_data(ctx);
  stage_train_backbone(ctx);
  auto t = Clock::now();
  stage_train_aux(ctx);
  r.aux_seconds = seconds_since(t);
  r.layers = stage_select_layers(ctx);
  t = Clock::now();
  stage_attack(ctx);
  r.attack_seconds = seconds_since(t);
  stage_build_detectors(ctx);
  r.report = stage_evaluate(ctx);
  r.overhead = stage_report(ctx);
  r.total_seconds = seconds_since(t0);
  r.latency = stage_bench(ctx);
  return r;
}

// Mean best-F1 over the cells of one detector row matching a predicate.
double mean_f1(const std::vector<SeedRun>& runs, const std::string& det, const std::string& src,
               const std::function<bool(const EvalCell&)>& keep, std::size_t* count = nullptr) {
  double sum = 0;
  std::size_t n = 0;
  for (const auto& r : runs)
    for (const auto& c : r.report.cells)
      if (c.detector == det && c.source == src && keep(c)) {
        sum += c.status == "ok" ? c.f1 : 0.0;
        ++n;
      }
  if (count) *count = n;
  return n ? sum / static_cast<double>(n) : NAN;
}

const EvalCell* find_cell(const EvalReport& r, const std::string& det, const std::string& src, const std::string& attack,
                          double eps) {
  for (const auto& c : r.cells)
    if (c.detector == det && c.source == src && c.attack == attack && std::abs(c.epsilon - eps) < 1e-12) return &c;
  return nullptr;
}

std::string ucan_source(const RunConfig& cfg, const std::string& det) {
  return det == "dnr" && cfg.detectors.dnr_input == "cosine" ? "ucan-cs" : "ucan";
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  double worst = 0;
  std::string worst_name;
  std::size_t checked = 0;
  for (int seed = 0; seed < 20; ++seed) {
    auto all = testing::primitive_suite(seed);
    for (auto& r : testing::chain_suite(seed)) all.push_back(std::move(r));
    for (const auto& [name, g] : all) {
      checked += g.checked;
      if (g.max_rel_error >= worst) {
        worst = g.max_rel_error;
        worst_name = name;
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst < 1e-4 && secs < 120,
          fmt("max relative error %.2e (%s) over %zu components, 20 seeds, %.1f s", worst, worst_name.c_str(), checked,
              secs)};
}

Outcome criterion_tcs(const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    const auto& s = r.layers;
    ok = ok && s.scores.tcs > s.initial_tcs && s.scores.tcs >= 0.5 && r.aux_seconds < 300;
    detail += fmt("seed %llu: TCS %.3f -> %.3f in %.0f s; ", static_cast<unsigned long long>(r.seed), s.initial_tcs,
                  s.scores.tcs, r.aux_seconds);
  }
  return {ok, detail};
}

Outcome criterion_attacks(const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string detail;
  for (const auto& r : runs) {
    const auto paths = run_paths(cfg, r.seed);
    const auto model = read_backbone(Container::load(paths.model()));
    const auto pgd16 = load_adv(paths.adv_dir() / "pgd_eps16.ucan");
    const auto cw16 = load_adv(paths.adv_dir() / "cw_eps16.ucan");
    std::size_t correct = 0;
    for (std::size_t i = 0; i < pgd16.size(); ++i) correct += model.predict(pgd16.originals[i]) == pgd16.labels[i];
    const double clean = static_cast<double>(correct) / static_cast<double>(pgd16.size());
    const double adv = 1.0 - attack_success_rate(model, pgd16);
    const double cw = attack_success_rate(model, cw16);
    ok = ok && clean >= 0.95 && adv <= 0.10 && cw >= 0.80 && pgd16.config.steps == 200 && r.attack_seconds < 600;
    detail += fmt("seed %llu: acc %.3f -> %.3f under PGD, C&W success %.3f, attacks %.0f s; ",
                  static_cast<unsigned long long>(r.seed), clean, adv, cw, r.attack_seconds);
  }
  return {ok, detail};
}

Outcome criterion_ucan_gain(const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  const auto standard = [](const EvalCell& c) { return c.attack == "pgd" || c.attack == "cw"; };
  bool ok = runs.size() >= 3;
  double total = 0;
  std::string detail;
  for (const std::string det : {"dknn", "dnr"}) {
    std::size_t nr = 0, nu = 0;
    const double raw = mean_f1(runs, det, "raw", standard, &nr);
    const double uc = mean_f1(runs, det, ucan_source(cfg, det), standard, &nu);
    ok = ok && nr > 0 && nr == nu && uc - raw >= 0.02;
    detail += fmt("%s raw %.4f vs U-CAN %.4f (%+.1f points, %zu cells); ", det.c_str(), raw, uc, 100 * (uc - raw), nr);
  }
  for (const auto& r : runs) total += r.total_seconds;
  ok = ok && total < 1800;
  detail += fmt("%zu seeds, %.0f s", runs.size(), total);
  return {ok, detail};
}

double exhaustive_best_f1(const std::vector<double>& s, const std::vector<char>& adv) {
  std::vector<double> cuts = s;
  cuts.push_back(INFINITY);
  double best = 0;
  for (double t : cuts) {
    double tp = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
      const bool flag = s[i] >= t;
      tp += flag && adv[i];
      fp += flag && !adv[i];
      fn += !flag && adv[i];
    }
    if (tp > 0) best = std::max(best, 2 * tp / (2 * tp + fp + fn));
  }
  return best;
}

double ks_uniform(std::vector<double> p) {
  std::sort(p.begin(), p.end());
  const double n = static_cast<double>(p.size());
  double d = 0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double u = std::clamp(p[i], 0.0, 1.0);
    d = std::max({d, static_cast<double>(i + 1) / n - u, u - static_cast<double>(i) / n});
  }
  return d;
}

Outcome criterion_threshold_and_calibration(const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  std::mt19937_64 rng(20240601);
  double worst = 0;
  for (int t = 0; t < 100; ++t) {
    const std::size_t n = 2 + rng() % 60;
    std::vector<double> s(n);
    std::vector<char> adv(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = t % 2 ? static_cast<double>(rng() % 8) : std::uniform_real_distribution<double>(-3, 3)(rng);
      adv[i] = static_cast<char>(rng() % 2);
    }
    adv[0] = 1;
    adv[1] = 0;
    worst = std::max(worst, std::abs(best_f1(pr_curve(s, adv)).f1 - exhaustive_best_f1(s, adv)));
  }
  bool ok = worst <= 1e-12;
  std::string detail = fmt("best-F1 vs exhaustive cut on 100 sets: max diff %.1e; ", worst);

  const auto& r = runs.front();
  const auto paths = run_paths(cfg, r.seed);
  const auto data = Container::load(paths.data());
  const auto test = read_dataset(data, "test");
  const auto model = read_backbone(Container::load(paths.model()));
  const auto blocks = read_aux(Container::load(paths.aux()));
  const auto store = Container::load(paths.detectors());
  const std::size_t n = std::min<std::size_t>(200, test.size());
  for (const auto& [src, fsrc] : {std::pair{"raw", FeatureSource::RawTaps}, std::pair{"ucan", FeatureSource::UcanEmbedding}}) {
    const auto det = read_detector(store, std::string("dknn/") + src);
    const auto& dknn = dynamic_cast<const DknnDetector&>(*det);
    const FeatureExtractor fx(model, &blocks, r.layers.selected, fsrc);
    std::vector<double> p;
    for (std::size_t i = 0; i < n; ++i) p.push_back(dknn.p_value(fx.extract(test.samples[i])));
    const double d = ks_uniform(p);
    ok = ok && n >= 200 && d <= 0.15;
    detail += fmt("DKNN %s p-value KS %.3f at n=%zu; ", src, d, n);
  }
  return {ok, detail};
}

Outcome criterion_adaptive(const RunConfig& cfg, const std::vector<SeedRun>& runs) {
  bool ok = true;
  std::string detail;
  for (const std::string det : {"dknn", "dnr"}) {
    for (const std::string src : {std::string("raw"), ucan_source(cfg, det)}) {
      double diff = 0;
      std::size_t n = 0;
      for (const auto& r : runs) {
        for (double e : cfg.attacks.epsilons) {
          const auto* pg = find_cell(r.report, det, src, "pgd", e / 255.0);
          const auto* ad = find_cell(r.report, det, src, "ada-dknn", e / 255.0);
          if (!pg || !ad || pg->status != "ok" || ad->status != "ok") continue;
          diff += ad->f1 - pg->f1;
          ++n;
        }
      }
      const double mean = n ? diff / static_cast<double>(n) : NAN;
      ok = ok && n > 0 && mean < 0;
      detail += fmt("%s/%s %+.4f (%zu pairs); ", det.c_str(), src.c_str(), mean, n);
    }
  }
  return {ok, "mean F1(ADA) - F1(PGD) at equal budget: " + detail};
}

Outcome criterion_overhead(const std::vector<SeedRun>& runs) {
  const auto& r = runs.front();
  const auto lat = [&](const std::string& label) {
    for (const auto& l : r.latency)
      if (l.label == label) return l.mean_seconds;
    return static_cast<double>(NAN);
  };
  const double raw = lat("dknn/raw"), uc = lat("dknn/ucan");
  const bool ok = r.overhead.aux_parameters == 1728 && uc <= 3 * raw;
  return {ok, fmt("aux parameters %zu (%.2f%% of backbone+aux); DKNN latency raw %.4f s, U-CAN %.4f s (x%.2f)",
                  r.overhead.aux_parameters, r.overhead.percent, raw, uc, uc / raw)};
}

Outcome criterion_determinism(RunConfig cfg, const std::vector<SeedRun>& runs, const fs::path& out) {
  const auto seed = runs.front().seed;
  const auto first = run_paths(cfg, seed).eval_dir();
  cfg.out_dir = out / "rerun";
  fs::remove_all(cfg.out_dir);
  run_pipeline(make_context(cfg, seed, &std::cerr));
  const auto second = run_paths(cfg, seed).eval_dir();
  bool ok = true;
  std::string detail;
  for (const char* f : {"report.csv", "report.json"}) {
    const bool same = slurp(first / f) == slurp(second / f) && !slurp(first / f).empty();
    ok = ok && same;
    detail += fmt("%s %s; ", f, same ? "identical" : "differs");
  }
  return {ok, detail + fmt("seed %llu rerun", static_cast<unsigned long long>(seed))};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::string config;
  std::vector<std::uint64_t> seeds{1, 2, 3};
  std::string out = "acceptance_runs";
  std::vector<int> only, expected_fail;
  std::string report;
  app.add_option("--config", config, "Run configuration")->check(CLI::ExistingFile);
  app.add_option("--seeds", seeds, "Seeds for the pipeline criteria")->delimiter(',');
  app.add_option("--out", out, "Scratch directory for pipeline artifacts");
  app.add_option("--only", only, "Run only these criteria")->delimiter(',');
  app.add_option("--expected-fail", expected_fail, "Criteria known to fail")->delimiter(',');
  app.add_option("--report", report, "Also write the criterion lines to this file");
  CLI11_PARSE(app, argc, argv);

  const std::set<int> wanted = only.empty() ? std::set<int>{1, 2, 3, 4, 5, 6, 7, 8} : std::set<int>(only.begin(), only.end());
  const std::set<int> known(expected_fail.begin(), expected_fail.end());

  RunConfig cfg = config.empty() ? RunConfig{} : load_config(config);
  cfg.seeds = seeds;
  cfg.out_dir = fs::path(out);
  cfg.validate();

  std::vector<SeedRun> runs;
  if (std::any_of(wanted.begin(), wanted.end(), [](int c) { return c >= 2; })) {
    for (auto s : seeds) runs.push_back(run_seed(cfg, s));
  }

  const std::map<int, std::pair<const char*, std::function<Outcome()>>> criteria{
      {1, {"finite-difference gradients", [] { return criterion_gradients(); }}},
      {2, {"auxiliary training raises TCS", [&] { return criterion_tcs(runs); }}},
      {3, {"attack strength", [&] { return criterion_attacks(cfg, runs); }}},
      {4, {"U-CAN improves DKNN and DNR", [&] { return criterion_ucan_gain(cfg, runs); }}},
      {5, {"threshold search and p-value calibration", [&] { return criterion_threshold_and_calibration(cfg, runs); }}},
      {6, {"adaptive attack weakens feature-space detectors", [&] { return criterion_adaptive(cfg, runs); }}},
      {7, {"overhead and latency", [&] { return criterion_overhead(runs); }}},
      {8, {"byte-identical rerun", [&] { return criterion_determinism(cfg, runs, out); }}},
  };

  std::ostringstream lines;
  int unexpected = 0;
  for (const auto& [id, c] : criteria) {
    if (!wanted.count(id)) continue;
    Outcome o;
    try {
      o = c.second();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const bool expect_fail = known.count(id) > 0;
    if (o.pass == expect_fail) ++unexpected;
    while (!o.detail.empty() && (o.detail.back() == ' ' || o.detail.back() == ';')) o.detail.pop_back();
    std::ostringstream line;
    line << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << (expect_fail ? " (expected fail)" : "") << "  "
         << c.first << ": " << o.detail << "\n";
    std::cout << line.str() << std::flush;
    lines << line.str();
  }
  if (!report.empty()) std::ofstream(report) << lines.str();
  return unexpected == 0 ? 0 : 1;
}
