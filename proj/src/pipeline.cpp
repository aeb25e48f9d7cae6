#include "ucan/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include "json.hpp"
#include "ucan/errors.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

namespace {

using nlohmann::json;

std::ostream& say(const StageContext& ctx) {
  static std::ostringstream sink;
  if (!ctx.log) {
    sink.str("");
    return sink;
  }
  return *ctx.log << "[seed " << ctx.seed << "] ";
}

void require(const std::filesystem::path& p, const std::string& artifact) {
  if (!std::filesystem::exists(p)) throw ResolutionError("missing artifact " + p.string(), artifact);
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  out << text;
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

std::string log_csv(const TrainLog& log) {
  std::ostringstream s;
  s.precision(10);
  s << "epoch,loss,val_accuracy,metric\n";
  for (const auto& e : log) s << e.epoch << ',' << e.loss << ',' << e.val_accuracy << ',' << e.metric << '\n';
  return s.str();
}

DatasetSplits load_splits(const StageContext& ctx) {
  require(ctx.paths.data(), "data");
  const auto c = Container::load(ctx.paths.data());
  return {read_dataset(c, "train"), read_dataset(c, "val"), read_dataset(c, "calib"), read_dataset(c, "test")};
}

BackboneModel load_backbone(const StageContext& ctx) {
  require(ctx.paths.model(), "model");
  auto m = read_backbone(Container::load(ctx.paths.model()));
  m.freeze();
  return m;
}

std::vector<AuxBlock> load_blocks(const StageContext& ctx) {
  require(ctx.paths.aux(), "aux");
  return read_aux(Container::load(ctx.paths.aux()));
}

std::vector<std::size_t> load_layers(const StageContext& ctx) {
  require(ctx.paths.layers(), "layers");
  return read_layer_selection(ctx.paths.layers()).selected;
}

std::string eps_tag(double eps255) { return "eps" + std::to_string(static_cast<long>(std::lround(eps255))); }

std::filesystem::path adv_path(const StageContext& ctx, const std::string& attack, double eps255) {
  return ctx.paths.adv_dir() / (attack + "_" + eps_tag(eps255) + ".ucan");
}

std::filesystem::path ada_path(const StageContext& ctx, const std::string& source, double eps255) {
  return ctx.paths.adv_dir() / ("ada-dknn_" + source + "_" + eps_tag(eps255) + ".ucan");
}

/// The attacked pool: the test split, optionally truncated.
LabeledDataset attack_pool(const StageContext& ctx, const DatasetSplits& s) {
  const std::size_t cap = ctx.config.attacks.max_samples;
  if (cap == 0 || cap >= s.test.size()) return s.test;
  std::vector<std::size_t> idx(cap);
  for (std::size_t i = 0; i < cap; ++i) idx[i] = i;
  return s.test.subset(idx);
}

/// DKNN reads the refined embedding; DNR reads whichever U-CAN output the
/// config names.
FeatureSource source_for(const RunConfig& cfg, const std::string& kind, const std::string& source) {
  if (source == "raw") return FeatureSource::RawTaps;
  return kind == "dnr" && cfg.detectors.dnr_input == "cosine" ? FeatureSource::UcanCosine : FeatureSource::UcanEmbedding;
}

std::string section_for(const std::string& kind, const std::string& source) {
  return kind == "sad" ? "sad" : kind + "/" + source;
}

/// Everything evaluation needs, loaded once.
struct Loaded {
  DatasetSplits splits;
  BackboneModel model;
  std::vector<AuxBlock> blocks;
  std::vector<std::size_t> layers;
  std::map<std::string, std::unique_ptr<FeatureExtractor>> extractors;  // by FeatureSource name

  const FeatureExtractor& extractor(FeatureSource s) {
    auto& e = extractors[source_name(s)];
    if (!e) e = std::make_unique<FeatureExtractor>(model, &blocks, layers, s);
    return *e;
  }
};

Loaded load_all(const StageContext& ctx) {
  return Loaded{load_splits(ctx), load_backbone(ctx), load_blocks(ctx), load_layers(ctx), {}};
}

}  // namespace

RunPaths run_paths(const RunConfig& cfg, std::uint64_t seed) {
  return {cfg.out_dir / ("seed_" + std::to_string(seed))};
}

std::uint64_t stage_seed(std::uint64_t seed, Stage stage) { return derive_seed(seed, static_cast<std::uint64_t>(stage)); }

StageContext make_context(const RunConfig& cfg, std::uint64_t seed, std::ostream* log) {
  cfg.validate();
  if (cfg.threads > 0) set_thread_count(cfg.threads);
  return {cfg, seed, run_paths(cfg, seed), log};
}

void stage_gen_data(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  LabeledDataset ds;
  if (cfg.data.source == "cifar10") {
    require(cfg.data.cifar_path, "cifar10");
    ds = load_cifar10_binary(cfg.data.cifar_path, cfg.data.cifar_classes);
  } else {
    auto spec = cfg.data.synthetic;
    spec.seed = stage_seed(ctx.seed, Stage::Data);
    ds = gen_synthetic(spec);
  }
  const auto s = split_dataset(ds, cfg.split, stage_seed(ctx.seed, Stage::Split));
  Container c;
  append_dataset(c, "train", s.train);
  append_dataset(c, "val", s.val);
  append_dataset(c, "calib", s.calib);
  append_dataset(c, "test", s.test);
  std::filesystem::create_directories(ctx.paths.root);
  c.save(ctx.paths.data());
  say(ctx) << "data: " << s.train.size() << "/" << s.val.size() << "/" << s.calib.size() << "/" << s.test.size()
           << " train/val/calib/test\n";
}

void stage_train_backbone(const StageContext& ctx) {
  const auto s = load_splits(ctx);
  const auto& cfg = ctx.config;
  const auto spec = cfg.architecture == "mlp"
                        ? BackboneSpec::mlp(s.train.samples.front().numel(), cfg.mlp_hidden, s.train.classes)
                        : BackboneSpec::small_cnn(s.train.sample_shape, s.train.classes);
  BackboneModel m(spec, stage_seed(ctx.seed, Stage::BackboneInit));
  auto opts = cfg.backbone;
  opts.seed = stage_seed(ctx.seed, Stage::BackboneTrain);
  opts.validation = &s.val;
  const auto log = train_backbone(m, s.train, opts);
  m.freeze();
  Container c;
  append_backbone(c, m);
  c.save(ctx.paths.model());
  write_text(ctx.paths.root / "backbone_log.csv", log_csv(log));
  say(ctx) << "backbone: val accuracy " << accuracy(m, s.val) << "\n";
}

void stage_train_aux(const StageContext& ctx) {
  const auto s = load_splits(ctx);
  const auto model = load_backbone(ctx);
  auto arc = ctx.config.arcface;
  arc.classes = s.train.classes;
  auto blocks = init_aux_blocks(model, arc, stage_seed(ctx.seed, Stage::AuxInit));
  const double initial = layer_scores(model, blocks, s.val).tcs;
  auto opts = ctx.config.aux;
  opts.seed = stage_seed(ctx.seed, Stage::AuxTrain);
  opts.validation = &s.val;
  const auto log = train_aux(model, blocks, s.train, opts);
  Container c;
  append_aux(c, blocks);
  c.add("aux_meta").set("initial_tcs", initial);
  c.save(ctx.paths.aux());
  write_text(ctx.paths.root / "aux_log.csv", log_csv(log));
  say(ctx) << "aux: TCS " << initial << " -> " << (log.empty() ? initial : log.back().metric) << "\n";
}

LayerSelection stage_select_layers(const StageContext& ctx) {
  const auto s = load_splits(ctx);
  const auto model = load_backbone(ctx);
  const auto blocks = load_blocks(ctx);
  LayerSelection sel;
  sel.scores = layer_scores(model, blocks, s.val);
  const auto meta = Container::load(ctx.paths.aux());
  sel.initial_tcs = meta.has("aux_meta") ? meta.at("aux_meta").get_double("initial_tcs") : 0.0;
  sel.selected = select_layers(sel.scores.layers, ctx.config.selection);

  json j;
  j["tcs"] = sel.scores.tcs;
  j["initial_tcs"] = sel.initial_tcs;
  j["selected"] = sel.selected;
  for (const auto& l : sel.scores.layers) {
    j["layers"].push_back({{"layer", l.layer}, {"cs_plus", l.cs_plus}, {"cs_minus", l.cs_minus}, {"cs_avg", l.cs_avg}});
  }
  write_text(ctx.paths.layers(), j.dump(1));
  std::ostringstream names;
  for (auto l : sel.selected) names << ' ' << l;
  say(ctx) << "layers: TCS " << sel.scores.tcs << ", selected" << names.str() << "\n";
  return sel;
}

LayerSelection read_layer_selection(const std::filesystem::path& path) {
  const auto j = json::parse(read_text(path));
  LayerSelection sel;
  sel.scores.tcs = j.at("tcs").get<double>();
  sel.initial_tcs = j.value("initial_tcs", 0.0);
  sel.selected = j.at("selected").get<std::vector<std::size_t>>();
  for (const auto& l : j.at("layers")) {
    sel.scores.layers.push_back({l.at("layer").get<std::size_t>(), l.at("cs_plus").get<double>(),
                                 l.at("cs_minus").get<double>(), l.at("cs_avg").get<double>()});
  }
  return sel;
}

void stage_attack(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  const auto s = load_splits(ctx);
  const auto model = load_backbone(ctx);
  const auto pool = attack_pool(ctx, s);
  std::filesystem::create_directories(ctx.paths.adv_dir());
  for (const auto& name : cfg.attacks.names) {
    for (double e : cfg.attacks.epsilons) {
      auto ac = cfg.attacks.base;
      ac.name = name;
      ac.epsilon = e / 255.0;
      ac.seed = stage_seed(ctx.seed, Stage::Attack);
      const auto b = name == "cw" ? cw_linf(model, pool.samples, pool.labels, ac) : pgd(model, pool.samples, pool.labels, ac);
      save_adv(b, adv_path(ctx, name, e));
      say(ctx) << name << " eps " << e << "/255: success " << attack_success_rate(model, b) << "\n";
    }
  }
}

void stage_build_detectors(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  auto L = load_all(ctx);
  Container c;
  for (const auto& kind : cfg.detectors.kinds) {
    if (kind == "sad") {
      SadDetector().append(c, "sad");
      continue;
    }
    for (const auto& src : cfg.detectors.sources) {
      const auto& fx = L.extractor(source_for(cfg, kind, src));
      const auto tr = fx.extract_all(L.splits.train.samples);
      if (kind == "dknn") {
        const auto cal = fx.extract_all(L.splits.calib.samples);
        DknnDetector::build(tr, L.splits.train.labels, cal, L.splits.calib.labels, cfg.detectors.k, L.splits.train.classes)
            .append(c, section_for(kind, src));
      } else {
        const auto held = fx.extract_all(L.splits.val.samples);
        DnrOptions o;
        o.svm = cfg.detectors.svm;
        o.max_train = cfg.detectors.dnr_max_train;
        o.seed = stage_seed(ctx.seed, Stage::Detector);
        DnrDetector::train(tr, L.splits.train.labels, held, L.splits.val.labels, L.splits.train.classes, o)
            .append(c, section_for(kind, src));
      }
      say(ctx) << "detector " << section_for(kind, src) << " built\n";
    }
  }
  c.save(ctx.paths.detectors());

  // Adaptive batches need the DKNN detectors they target.
  if (cfg.attacks.adaptive) {
    const auto pool = attack_pool(ctx, L.splits);
    for (const auto& src : cfg.detectors.sources) {
      const auto section = section_for("dknn", src);
      if (!c.has(section)) continue;
      const auto det = DknnDetector::read(c.at(section));
      const auto& fx = L.extractor(source_for(cfg, "dknn", src));
      for (double e : cfg.attacks.epsilons) {
        auto ac = ada_defaults(e / 255.0);
        ac.steps = cfg.attacks.ada_steps;
        ac.step_size = cfg.attacks.base.step_size;
        ac.random_start = cfg.attacks.base.random_start;
        ac.ada_m = cfg.attacks.base.ada_m;
        ac.ada_lambda = cfg.attacks.base.ada_lambda;
        ac.ada_refresh = cfg.attacks.base.ada_refresh;
        ac.seed = stage_seed(ctx.seed, Stage::Attack);
        const auto b = ada_dknn(fx, det, pool.samples, pool.labels, ac);
        save_adv(b, ada_path(ctx, src, e));
        say(ctx) << "ada-dknn/" << src << " eps " << e << "/255: success " << attack_success_rate(L.model, b) << "\n";
      }
    }
  }
}

EvalReport stage_evaluate(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  auto L = load_all(ctx);
  require(ctx.paths.detectors(), "detectors");
  const auto store = Container::load(ctx.paths.detectors());
  std::vector<std::unique_ptr<Detector>> owned;
  std::vector<DetectorEntry> entries;
  std::vector<std::string> entry_source;
  for (const auto& kind : cfg.detectors.kinds) {
    const std::vector<std::string> sources = kind == "sad" ? std::vector<std::string>{"raw"} : cfg.detectors.sources;
    for (const auto& src : sources) {
      const auto section = section_for(kind, src);
      if (!store.has(section)) throw ResolutionError("detector '" + section + "' was not built", section);
      owned.push_back(read_detector(store, section));
      entries.push_back({kind, &L.extractor(source_for(cfg, kind, src)), owned.back().get()});
      entry_source.push_back(src);
    }
  }
  std::vector<AdvBatch> batches;
  for (const auto& name : cfg.attacks.names) {
    for (double e : cfg.attacks.epsilons) {
      const auto p = adv_path(ctx, name, e);
      require(p, p.filename().string());
      batches.push_back(load_adv(p));
    }
  }
  const GridOptions opts{cfg.successful_only, ctx.seed};
  auto report = evaluate_grid(entries, batches, opts);

  // Adaptive batches are scored only by the feature-space detectors of the
  // source they were crafted against.
  if (cfg.attacks.adaptive) {
    std::vector<EvalCell> extra;
    for (std::size_t d = 0; d < entries.size(); ++d) {
      if (entries[d].name == "sad") continue;
      for (double e : cfg.attacks.epsilons) {
        const auto p = ada_path(ctx, entry_source[d], e);
        require(p, p.filename().string());
        extra.push_back(evaluate_cell(entries[d], load_adv(p), opts));
      }
    }
    // Keep detector-major order.
    std::vector<EvalCell> merged;
    for (std::size_t d = 0, at = 0, ex = 0; d < entries.size(); ++d) {
      for (std::size_t b = 0; b < batches.size(); ++b) merged.push_back(std::move(report.cells[at++]));
      if (entries[d].name == "sad") continue;
      for (std::size_t k = 0; k < cfg.attacks.epsilons.size(); ++k) merged.push_back(std::move(extra[ex++]));
    }
    report.cells = std::move(merged);
    report.averages = average_rows(report.cells);
  }
  write_report(report, ctx.paths.eval_dir());
  for (const auto& a : report.averages) say(ctx) << a.detector << "/" << a.source << ": mean best F1 " << a.f1 << "\n";
  return report;
}

OverheadReport stage_report(const StageContext& ctx) {
  const auto model = load_backbone(ctx);
  const auto blocks = load_blocks(ctx);
  const auto r = overhead_report(model, blocks);
  write_text(ctx.paths.bench_dir() / "overhead.csv", overhead_csv(r));
  require(ctx.paths.eval_dir() / "report.json", "report");
  say(ctx) << "overhead: " << r.aux_parameters << " auxiliary parameters (" << r.percent << "%)\n";
  return r;
}

std::vector<LatencyStats> stage_bench(const StageContext& ctx) {
  const auto& cfg = ctx.config;
  auto L = load_all(ctx);
  require(ctx.paths.detectors(), "detectors");
  const auto store = Container::load(ctx.paths.detectors());
  const std::size_t n = std::min(cfg.bench_batch, L.splits.test.size());
  const std::vector<Tensor> batch(L.splits.test.samples.begin(), L.splits.test.samples.begin() + static_cast<std::ptrdiff_t>(n));
  std::vector<LatencyStats> rows;
  for (const auto& kind : cfg.detectors.kinds) {
    if (kind == "sad") continue;
    for (const auto& src : cfg.detectors.sources) {
      const auto section = section_for(kind, src);
      if (!store.has(section)) throw ResolutionError("detector '" + section + "' was not built", section);
      const auto det = read_detector(store, section);
      const DetectorEntry entry{kind, &L.extractor(source_for(cfg, kind, src)), det.get()};
      rows.push_back(detection_latency(section, entry, batch, cfg.bench_iterations));
      say(ctx) << "latency " << section << ": " << rows.back().mean_seconds << " s per batch of " << n << "\n";
    }
  }
  write_text(ctx.paths.bench_dir() / "latency.csv", latency_csv(rows));
  return rows;
}

EvalReport run_pipeline(const StageContext& ctx) {
  stage_gen_data(ctx);
  stage_train_backbone(ctx);
  stage_train_aux(ctx);
  stage_select_layers(ctx);
  stage_attack(ctx);
  stage_build_detectors(ctx);
  auto report = stage_evaluate(ctx);
  stage_report(ctx);
  return report;
}

EvalReport read_report_json(const std::filesystem::path& path) {
  require(path, "report");
  const auto j = json::parse(read_text(path));
  EvalReport r;
  r.successful_only = j.at("successful_only").get<bool>();
  r.recall_grid = j.at("recall_grid").at("points").get<std::size_t>();
  for (const auto& e : j.at("cells")) {
    EvalCell c;
    c.detector = e.at("detector").get<std::string>();
    c.source = e.at("source").get<std::string>();
    c.attack = e.at("attack").get<std::string>();
    c.epsilon = e.at("epsilon").get<double>();
    c.seed = e.at("seed").get<std::uint64_t>();
    c.status = e.at("status").get<std::string>();
    c.benign = e.at("benign").get<std::size_t>();
    c.adversarial = e.at("adversarial").get<std::size_t>();
    c.success_rate = e.at("success_rate").get<double>();
    c.threshold = e.at("threshold").is_string() ? INFINITY : e.at("threshold").get<double>();
    c.f1 = e.at("best_f1").get<double>();
    c.scores = e.at("scores").get<std::vector<double>>();
    for (int v : e.at("labels").get<std::vector<int>>()) c.labels.push_back(static_cast<char>(v));
    if (c.ok()) c.curve = pr_curve(c.scores, c.labels);
    r.cells.push_back(std::move(c));
  }
  r.averages = average_rows(r.cells);
  return r;
}

std::string summary_csv(const std::vector<std::pair<std::uint64_t, EvalReport>>& runs) {
  std::ostringstream s;
  s << "detector,source,seed,cells,mean_best_f1\n";
  std::vector<std::pair<std::string, std::string>> order;
  std::map<std::pair<std::string, std::string>, std::pair<double, std::size_t>> total;
  char buf[32];
  for (const auto& [seed, r] : runs) {
    for (const auto& a : r.averages) {
      std::snprintf(buf, sizeof buf, "%.6f", a.f1);
      s << a.detector << ',' << a.source << ',' << seed << ',' << a.cells << ',' << buf << '\n';
      const auto key = std::make_pair(a.detector, a.source);
      if (!total.count(key)) order.push_back(key);
      if (a.cells) {
        total[key].first += a.f1;
        ++total[key].second;
      } else {
        total[key];
      }
    }
  }
  for (const auto& key : order) {
    const auto& [sum, n] = total[key];
    std::snprintf(buf, sizeof buf, "%.6f", n ? sum / static_cast<double>(n) : NAN);
    s << key.first << ',' << key.second << ",all," << n << ',' << buf << '\n';
  }
  return s.str();
}

}  // namespace ucan
