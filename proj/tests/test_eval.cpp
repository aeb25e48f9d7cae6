#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>

#include "doctest.h"
#include "json.hpp"
#include "ucan/errors.hpp"
#include "ucan/eval.hpp"

using namespace ucan;

namespace {

struct Scored {
  std::vector<double> scores;
  std::vector<char> labels;
};

Scored random_scores(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> size(2, 50), level(0, 12);
  Scored s;
  const int n = size(rng);
  for (int i = 0; i < n; ++i) {
    const char a = static_cast<char>(rng() % 2);
    s.labels.push_back(a);
    s.scores.push_back(level(rng) / 12.0 + (a ? 0.1 : 0.0));
  }
  s.labels[0] = 1;
  s.labels[1] = 0;
  return s;
}

struct Trained {
  DatasetSplits split;
  BackboneModel model;
};

Trained& blob_model() {
  static Trained t = [] {
    SyntheticBlobSpec bs;
    bs.per_class = 60;
    bs.seed = 8;
    bs.separation = 0.6;
    auto split = split_dataset(gen_blobs(bs), kDefaultSplit, 8);
    BackboneModel m(BackboneSpec::mlp(bs.dim, {16, 16}, 4), 8);
    BackboneTrainOptions o;
    o.epochs = 20;
    train_backbone(m, split.train, o);
    m.freeze();
    return Trained{std::move(split), std::move(m)};
  }();
  return t;
}

}  // namespace

TEST_SUITE("pr curve") {
  TEST_CASE("separable scores reach precision and recall of one") {
    const std::vector<double> s{0.1, 0.2, 0.8, 0.9};
    const std::vector<char> a{0, 0, 1, 1};
    const auto c = pr_curve(s, a);
    CHECK(c.size() == 4);
    const bool perfect = std::any_of(c.begin(), c.end(), [](const PrPoint& p) { return p.precision == 1.0 && p.recall == 1.0; });
    CHECK(perfect);
    CHECK(best_f1(c).f1 == 1.0);
  }

  TEST_CASE("every point matches the confusion matrix") {
    std::mt19937_64 rng(4);
    for (int trial = 0; trial < 30; ++trial) {
      const auto d = random_scores(rng);
      const auto c = pr_curve(d.scores, d.labels);
      for (std::size_t k = 0; k < c.size(); ++k) {
        const auto& p = c[k];
        std::size_t tp = 0, fp = 0, fn = 0;
        for (std::size_t i = 0; i < d.scores.size(); ++i) {
          const bool flag = d.scores[i] >= p.threshold;
          if (flag && d.labels[i]) ++tp;
          else if (flag) ++fp;
          else if (d.labels[i]) ++fn;
        }
        CHECK(p.precision == doctest::Approx(static_cast<double>(tp) / (tp + fp)));
        CHECK(p.recall == doctest::Approx(static_cast<double>(tp) / (tp + fn)));
        CHECK(p.f1 == doctest::Approx(2.0 * tp / (2.0 * tp + fp + fn)));
        if (k > 0) {
          CHECK(p.threshold > c[k - 1].threshold);
          CHECK(p.recall <= c[k - 1].recall);
        }
      }
    }
  }

  TEST_CASE("negated scores with the flipped comparison give the same curve") {
    std::mt19937_64 rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      const auto d = random_scores(rng);
      std::vector<double> neg(d.scores);
      for (auto& v : neg) v = -v;
      const auto a = pr_curve(d.scores, d.labels);
      const auto b = pr_curve(neg, d.labels, false);
      REQUIRE(a.size() == b.size());
      for (std::size_t k = 0; k < a.size(); ++k) {
        CHECK(a[k].threshold == -b[k].threshold);
        CHECK(a[k].precision == b[k].precision);
        CHECK(a[k].recall == b[k].recall);
      }
    }
  }

  TEST_CASE("single class is rejected") {
    const std::vector<double> s{0.1, 0.3};
    CHECK_THROWS_AS(pr_curve(s, std::vector<char>{1, 1}), DataError);
  }
}

TEST_SUITE("best f1") {
  TEST_CASE("agrees with threshold calibration on 100 random sets") {
    std::mt19937_64 rng(12);
    for (int trial = 0; trial < 100; ++trial) {
      const auto d = random_scores(rng);
      const auto a = best_f1(pr_curve(d.scores, d.labels));
      const auto b = calibrate_threshold(d.scores, d.labels);
      CHECK(a.f1 == b.f1);
      CHECK(a.threshold == b.threshold);
    }
  }

  TEST_CASE("singleton and empty curves") {
    const PrCurve one{{0.4, 0.5, 1.0, 2.0 / 3.0}};
    CHECK(best_f1(one).threshold == 0.4);
    CHECK(best_f1(one).f1 == 2.0 / 3.0);
    CHECK_THROWS_AS(best_f1(PrCurve{}), ContractError);
  }
}

TEST_SUITE("interpolation") {
  TEST_CASE("grid holds the best precision at or beyond each recall") {
    const PrCurve c{{0.1, 0.5, 1.0, 0.0}, {0.5, 0.8, 0.5, 0.0}, {0.9, 1.0, 0.25, 0.0}};
    const auto p = interpolate_precision(c, 5);
    CHECK(p == std::vector<double>{1.0, 1.0, 0.8, 0.5, 0.5});
    const auto avg = average_precision_curve(std::vector<PrCurve>{c, PrCurve{{0.0, 0.2, 1.0, 0.0}}}, 5);
    CHECK(avg[0] == doctest::Approx(0.6));
    CHECK(avg[4] == doctest::Approx(0.35));
    CHECK(interpolate_precision(c).size() == 101);
  }
}

TEST_SUITE("grid") {
  TEST_CASE("two detectors by two attacks by two budgets give eight rows") {
    auto& t = blob_model();
    FeatureExtractor fx(t.model, nullptr, {1, 2}, FeatureSource::RawTaps);
    const auto tr = fx.extract_all(t.split.train.samples);
    const auto cal = fx.extract_all(t.split.calib.samples);
    const auto dknn = DknnDetector::build(tr, t.split.train.labels, cal, t.split.calib.labels, 5, 4);
    const SadDetector sad;
    const std::vector<DetectorEntry> dets{{"dknn", &fx, &dknn}, {"sad", &fx, &sad}};

    std::vector<AdvBatch> batches;
    for (const char* name : {"pgd", "cw"}) {
      for (double eps : {8.0 / 255.0, 16.0 / 255.0}) {
        AttackConfig c;
        c.name = name;
        c.epsilon = eps;
        c.steps = 20;
        c.cw_lr = 1e-2;
        batches.push_back(std::string(name) == "pgd" ? pgd(t.model, t.split.test.samples, t.split.test.labels, c)
                                                      : cw_linf(t.model, t.split.test.samples, t.split.test.labels, c));
      }
    }
    const GridOptions opts{true, 3};
    const auto r = evaluate_grid(dets, batches, opts);
    CHECK(r.cells.size() == 8);
    CHECK(r.averages.size() == 2);

    for (const auto& c : r.cells) {
      if (!c.ok()) continue;
      CHECK(c.benign == c.adversarial);
      // Report integrity: the F1 follows from the persisted scores.
      CHECK(calibrate_threshold(c.scores, c.labels).f1 == c.f1);
    }
    for (const auto& a : r.averages) {
      double sum = 0.0;
      std::size_t n = 0;
      for (const auto& c : r.cells) {
        if (c.detector == a.detector && c.source == a.source && c.ok()) {
          sum += c.f1;
          ++n;
        }
      }
      CHECK(n == a.cells);
      CHECK(std::abs(a.f1 - sum / n) <= 1e-12);
    }

    const auto again = evaluate_grid(dets, batches, opts);
    CHECK(report_csv(again) == report_csv(r));
    CHECK(report_json(again) == report_json(r));

    const auto all = evaluate_grid(dets, batches, {false, 3});
    for (const auto& c : all.cells) CHECK(c.benign == t.split.test.size());

    const auto dir = std::filesystem::temp_directory_path() / "ucan_test_report";
    std::filesystem::remove_all(dir);
    write_report(r, dir);
    CHECK(std::filesystem::exists(dir / "report.csv"));
    CHECK(std::filesystem::exists(dir / "pr_dknn.svg"));
    std::ifstream in(dir / "report.json");
    const auto j = nlohmann::json::parse(in);
    CHECK(j["cells"].size() == 8);
    std::filesystem::remove_all(dir);
  }

  TEST_CASE("missing artifacts name the detector") {
    const std::vector<DetectorEntry> dets{{"dnr", nullptr, nullptr}};
    try {
      evaluate_grid(dets, {}, {});
      FAIL("expected ResolutionError");
    } catch (const ResolutionError& e) {
      CHECK(e.artifact() == "dnr");
    }
  }

  TEST_CASE("a batch without successes is marked failed") {
    auto& t = blob_model();
    FeatureExtractor fx(t.model, nullptr, {1}, FeatureSource::RawTaps);
    const SadDetector sad;
    AttackConfig c;
    c.epsilon = 0.0;
    c.steps = 1;
    std::vector<Tensor> xs;
    std::vector<std::size_t> ys;
    for (std::size_t i = 0; i < t.split.test.size(); ++i) {
      if (t.model.predict(t.split.test.samples[i]) == t.split.test.labels[i]) {
        xs.push_back(t.split.test.samples[i]);
        ys.push_back(t.split.test.labels[i]);
      }
    }
    const auto cell = evaluate_cell({"sad", &fx, &sad}, pgd(t.model, xs, ys, c), {});
    CHECK_FALSE(cell.ok());
    const auto avg = average_rows(std::vector<EvalCell>{cell});
    CHECK(std::isnan(avg[0].f1));
  }
}

TEST_SUITE("overhead") {
  TEST_CASE("reference configuration needs 1728 auxiliary parameters") {
    const std::vector<std::size_t> ch{8, 16, 32, 32};
    CHECK(aux_parameter_count(ch, 16, 4) == 1728);
    BackboneModel m(BackboneSpec::small_cnn({3, 16, 16}, 4), 1);
    ArcFaceConfig a;
    a.embed_dim = 16;
    a.classes = 4;
    const auto blocks = init_aux_blocks(m, a, 1);
    const auto r = overhead_report(m, blocks);
    CHECK(r.aux_parameters == 1728);
    CHECK(r.layers.size() == 4);
    CHECK(r.layers[0].parameters == 208);
    CHECK(r.layers[3].parameters == 592);
    CHECK(r.backbone_parameters == m.parameter_count());
    CHECK(r.percent == doctest::Approx(100.0 * 1728 / (1728 + m.parameter_count())));
  }

  TEST_CASE("zero width or zero classes is a config error") {
    const std::vector<std::size_t> ch{8};
    CHECK_THROWS_AS(aux_parameter_count(ch, 0, 4), ConfigError);
    CHECK_THROWS_AS(aux_parameter_count(ch, 16, 0), ConfigError);
  }

  TEST_CASE("doubling d' doubles the centre term") {
    const std::vector<std::size_t> none{};
    const std::vector<std::size_t> ch{8, 16};
    // With no projection channels only the bias and centres remain.
    const std::vector<std::size_t> zero{0};
    CHECK(aux_parameter_count(zero, 32, 4) == 2 * aux_parameter_count(zero, 16, 4));
    CHECK(aux_parameter_count(none, 16, 4) == 0);
    CHECK(aux_parameter_count(ch, 32, 4) == 2 * aux_parameter_count(ch, 16, 4));
  }
}

TEST_SUITE("latency") {
  TEST_CASE("one iteration has zero spread and the warm-up is excluded") {
    int calls = 0;
    const auto s = latency_bench("noop", [&] { ++calls; }, 8, 1);
    CHECK(s.stddev_seconds == 0.0);
    CHECK(s.iterations == 1);
    CHECK(calls == 2);
    CHECK_FALSE(s.environment.empty());
    calls = 0;
    const auto d = latency_bench("noop", [&] { ++calls; }, 8);
    CHECK(d.iterations == 10);
    CHECK(calls == 11);
    CHECK_THROWS_AS(latency_bench("noop", [] {}, 8, 0), ConfigError);
  }

  TEST_CASE("thread count is restored") {
    const auto before = thread_count();
    latency_bench("noop", [] { CHECK(thread_count() == 1); }, 1, 2);
    CHECK(thread_count() == before);
  }
}
