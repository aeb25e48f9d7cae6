#include "ucan/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include "json.hpp"
#include "ucan/errors.hpp"
#include "ucan/ops.hpp"
#include "ucan/optim.hpp"
#include "ucan/parallel.hpp"

namespace ucan {

void AttackConfig::validate() const {
  if (name != "pgd" && name != "cw" && name != "ada-dknn") throw ConfigError("unknown attack '" + name + "'");
  if (!(epsilon >= 0.0) || !std::isfinite(epsilon)) throw ConfigError("attack: epsilon must be finite and >= 0");
  if (steps > 0 && step_size && !(*step_size > 0.0)) throw ConfigError("attack: step size must be positive");
  if (!(cw_c >= 0.0) || !(cw_lr > 0.0) || !(cw_kappa >= 0.0)) throw ConfigError("attack: bad C&W constants");
  if (name == "ada-dknn" && (ada_m == 0 || ada_refresh == 0)) throw ConfigError("attack: ada_m and refresh must be >= 1");
}

AttackConfig ada_defaults(double epsilon) {
  AttackConfig c;
  c.name = "ada-dknn";
  c.epsilon = epsilon;
  c.steps = 400;
  c.ada_m = 100;
  return c;
}

LogitFn logits_of(const BackboneModel& model) {
  return [&model](const Tensor& x) { return model.logits(x); };
}

namespace {

void check_inputs(std::span<const Tensor> x, std::span<const std::size_t> y) {
  if (x.size() != y.size()) throw DataError("attack: sample/label count mismatch");
  for (const auto& t : x) {
    for (double v : t.data()) {
      if (v < 0.0 || v > 1.0) throw DataError("attack: inputs must lie in [0, 1]");
    }
  }
}

/// Clamp into the l_inf ball around x0 intersected with [0, 1].
void project(std::vector<double>& v, std::span<const double> x0, double eps) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    v[i] = std::clamp(v[i], std::max(0.0, x0[i] - eps), std::min(1.0, x0[i] + eps));
  }
}

constexpr double kEdge = 1.0 - 1e-6;

double sign(double g) { return g > 0.0 ? 1.0 : (g < 0.0 ? -1.0 : 0.0); }

std::vector<double> input_gradient(const Tensor& x, const std::function<Tensor(const Tensor&)>& objective) {
  Tensor leaf(x.shape(), std::vector<double>(x.data().begin(), x.data().end()), true);
  objective(leaf).backward();
  return std::vector<double>(leaf.grad().begin(), leaf.grad().end());
}

AdvBatch start_batch(const char* name, std::span<const Tensor> x, std::span<const std::size_t> y,
                     const AttackConfig& cfg) {
  AdvBatch b;
  b.attack = name;
  b.config = cfg;
  b.config.name = name;
  b.originals.assign(x.begin(), x.end());
  b.labels.assign(y.begin(), y.end());
  b.adversarials.resize(x.size());
  b.success.resize(x.size());
  return b;
}

std::vector<double> random_start(std::span<const double> x0, double eps, Rng& rng) {
  std::uniform_real_distribution<double> u(-eps, eps);
  std::vector<double> v(x0.begin(), x0.end());
  for (auto& e : v) e += u(rng);
  project(v, x0, eps);
  return v;
}

bool misclassified(const LogitFn& f, const Tensor& x, std::size_t y) { return ops::argmax(f(x).data()) != y; }

}  // namespace

AdvBatch pgd(const LogitFn& f, std::span<const Tensor> x, std::span<const std::size_t> y, const AttackConfig& cfg) {
  cfg.validate();
  check_inputs(x, y);
  auto b = start_batch("pgd", x, y, cfg);
  const double eps = cfg.epsilon, alpha = cfg.alpha();
  parallel_for(x.size(), [&](std::size_t i) {
    const auto x0 = x[i].data();
    Rng rng(derive_seed(cfg.seed, i));
    std::vector<double> adv(x0.begin(), x0.end());
    if (cfg.random_start && eps > 0.0 && cfg.steps > 0) adv = random_start(x0, eps, rng);
    for (std::size_t t = 0; t < cfg.steps; ++t) {
      const auto g = input_gradient(Tensor(x[i].shape(), adv),
                                    [&](const Tensor& xt) { return ops::softmax_xent(f(xt), y[i]); });
      for (std::size_t j = 0; j < adv.size(); ++j) adv[j] += alpha * sign(g[j]);
      project(adv, x0, eps);
    }
    b.adversarials[i] = Tensor(x[i].shape(), std::move(adv));
    b.success[i] = misclassified(f, b.adversarials[i], y[i]);
  });
  return b;
}

AdvBatch pgd(const BackboneModel& model, std::span<const Tensor> x, std::span<const std::size_t> y,
             const AttackConfig& cfg) {
  return pgd(logits_of(model), x, y, cfg);
}

AdvBatch cw_linf(const LogitFn& f, std::span<const Tensor> x, std::span<const std::size_t> y,
                 const AttackConfig& cfg) {
  cfg.validate();
  check_inputs(x, y);
  auto b = start_batch("cw", x, y, cfg);
  const double eps = cfg.epsilon;
  auto to_w = [](double v) { return std::atanh(std::clamp(2.0 * v - 1.0, -kEdge, kEdge)); };

  parallel_for(x.size(), [&](std::size_t i) {
    const auto x0 = x[i].data();
    const std::size_t n = x0.size();
    std::vector<double> cur(x0.begin(), x0.end()), w(n);
    for (std::size_t j = 0; j < n; ++j) w[j] = to_w(cur[j]);
    Adam adam(cfg.cw_lr);
    std::vector<double> best;
    double best_l2 = std::numeric_limits<double>::infinity();
    auto consider = [&](const std::vector<double>& v, const Tensor& logits) {
      if (ops::argmax(logits.data()) == y[i]) return;
      double l2 = 0.0;
      for (std::size_t j = 0; j < n; ++j) l2 += (v[j] - x0[j]) * (v[j] - x0[j]);
      if (l2 < best_l2) {
        best_l2 = l2;
        best = v;
      }
    };
    const Tensor origin(x[i].shape(), std::vector<double>(x0.begin(), x0.end()));

    for (std::size_t t = 0; t < cfg.steps; ++t) {
      Tensor leaf(x[i].shape(), cur, true);
      const auto logits = f(leaf);
      if (t > 0) consider(cur, logits);
      const auto z = logits.data();
      std::size_t other = y[i] == 0 ? 1 : 0;
      for (std::size_t j = 0; j < z.size(); ++j) {
        if (j != y[i] && z[j] > z[other]) other = j;
      }
      Tensor loss = ops::squared_norm(ops::sub(leaf, origin));
      if (z[y[i]] - z[other] > -cfg.cw_kappa) {
        std::vector<double> e(z.size(), 0.0);
        e[y[i]] = 1.0;
        e[other] = -1.0;
        loss = ops::add(loss, ops::scale(ops::dot(logits, Tensor({z.size()}, std::move(e))), cfg.cw_c));
      }
      loss.backward();
      const auto gx = leaf.grad();
      std::vector<double> gw(n);
      for (std::size_t j = 0; j < n; ++j) {
        const double th = std::tanh(w[j]);
        gw[j] = gx[j] * 0.5 * (1.0 - th * th);
      }
      adam.step(w, gw);
      for (std::size_t j = 0; j < n; ++j) cur[j] = 0.5 * (std::tanh(w[j]) + 1.0);
      project(cur, x0, eps);
      for (std::size_t j = 0; j < n; ++j) w[j] = to_w(cur[j]);
    }
    if (cfg.steps > 0) consider(cur, f(Tensor(x[i].shape(), cur)));
    b.adversarials[i] = Tensor(x[i].shape(), best.empty() ? cur : best);
    b.success[i] = misclassified(f, b.adversarials[i], y[i]);
  });
  return b;
}

AdvBatch cw_linf(const BackboneModel& model, std::span<const Tensor> x, std::span<const std::size_t> y,
                 const AttackConfig& cfg) {
  return cw_linf(logits_of(model), x, y, cfg);
}

AdvBatch ada_dknn(const FeatureExtractor& features, const DknnDetector& detector, std::span<const Tensor> x,
                  std::span<const std::size_t> y, const AttackConfig& cfg) {
  cfg.validate();
  check_inputs(x, y);
  const std::size_t layers = detector.layer_count();
  if (features.layers().size() != layers) throw ContractError("ada-dknn: detector and extractor layer sets differ");
  auto b = start_batch("ada-dknn", x, y, cfg);
  const double eps = cfg.epsilon, alpha = cfg.alpha();
  const auto& labels = detector.train_labels();
  const LogitFn f = logits_of(features.model());

  parallel_for(x.size(), [&](std::size_t i) {
    const auto x0 = x[i].data();
    Rng rng(derive_seed(cfg.seed, i));
    std::vector<double> adv(x0.begin(), x0.end());
    if (cfg.random_start && eps > 0.0 && cfg.steps > 0) adv = random_start(x0, eps, rng);
    // Per layer: sum of the chosen neighbours, their count and squared norms.
    std::vector<Tensor> target_sum(layers);
    std::vector<double> weight(layers);

    auto refresh = [&] {
      const auto feats = features.extract(Tensor(x[i].shape(), adv));
      if (feats.layers.size() != layers) throw ContractError("ada-dknn: extractor output layer count");
      double best_cost = std::numeric_limits<double>::infinity();
      std::vector<std::vector<std::size_t>> best_sets;
      for (std::size_t c = 0; c < detector.classes(); ++c) {
        if (c == y[i]) continue;
        double cost = 0.0;
        std::vector<std::vector<std::size_t>> sets(layers);
        for (std::size_t p = 0; p < layers; ++p) {
          if (feats.layers[p].size() != detector.dim(p)) throw ContractError("ada-dknn: feature width mismatch");
          std::vector<std::pair<double, std::size_t>> d;
          for (std::size_t t = 0; t < labels.size(); ++t) {
            if (labels[t] != c) continue;
            const auto pt = detector.train_point(p, t);
            double s = 0.0;
            for (std::size_t j = 0; j < pt.size(); ++j) s += (feats.layers[p][j] - pt[j]) * (feats.layers[p][j] - pt[j]);
            d.emplace_back(s, t);
          }
          const std::size_t m = std::min(cfg.ada_m, d.size());
          std::partial_sort(d.begin(), d.begin() + static_cast<std::ptrdiff_t>(m), d.end());
          double mean = 0.0;
          for (std::size_t j = 0; j < m; ++j) {
            mean += d[j].first;
            sets[p].push_back(d[j].second);
          }
          const double sc = detector.layer_scale(p);
          cost += mean / static_cast<double>(m) / (sc * sc);
        }
        if (cost < best_cost) {
          best_cost = cost;
          best_sets = std::move(sets);
        }
      }
      for (std::size_t p = 0; p < layers; ++p) {
        std::vector<double> sum(detector.dim(p), 0.0);
        for (auto t : best_sets[p]) {
          const auto pt = detector.train_point(p, t);
          for (std::size_t j = 0; j < sum.size(); ++j) sum[j] += pt[j];
        }
        const double m = static_cast<double>(best_sets[p].size());
        const double sc = detector.layer_scale(p);
        for (auto& v : sum) v /= m;
        target_sum[p] = Tensor({detector.dim(p)}, std::move(sum));
        weight[p] = cfg.ada_lambda / (sc * sc);
      }
    };

    for (std::size_t t = 0; t < cfg.steps; ++t) {
      if (t % cfg.ada_refresh == 0) refresh();
      const auto g = input_gradient(Tensor(x[i].shape(), adv), [&](const Tensor& xt) {
        const auto tr = features.trace(xt);
        Tensor obj = ops::softmax_xent(tr.logits, y[i]);
        // Mean squared distance to the chosen neighbours equals
        // ||phi||^2 - 2 phi . mean(t) + const.
        for (std::size_t p = 0; p < layers; ++p) {
          const auto& phi = tr.layers[p];
          auto dist = ops::sub(ops::squared_norm(phi), ops::scale(ops::dot(phi, target_sum[p]), 2.0));
          obj = ops::sub(obj, ops::scale(dist, weight[p]));
        }
        return obj;
      });
      for (std::size_t j = 0; j < adv.size(); ++j) adv[j] += alpha * sign(g[j]);
      project(adv, x0, eps);
    }
    b.adversarials[i] = Tensor(x[i].shape(), std::move(adv));
    b.success[i] = misclassified(f, b.adversarials[i], y[i]);
  });
  return b;
}

double attack_success_rate(const LogitFn& f, const AdvBatch& batch) {
  if (batch.size() == 0) throw DataError("attack_success_rate: empty batch");
  std::vector<char> wrong(batch.size());
  parallel_for(batch.size(), [&](std::size_t i) {
    wrong[i] = misclassified(f, batch.adversarials[i], batch.labels[i]);
  });
  return static_cast<double>(std::count(wrong.begin(), wrong.end(), 1)) / static_cast<double>(batch.size());
}

double attack_success_rate(const BackboneModel& model, const AdvBatch& batch) {
  return attack_success_rate(logits_of(model), batch);
}

namespace {

nlohmann::json config_json(const AttackConfig& c) {
  nlohmann::json j;
  j["name"] = c.name;
  j["epsilon"] = c.epsilon;
  j["steps"] = c.steps;
  j["step_size"] = c.alpha();
  j["random_start"] = c.random_start;
  j["cw_c"] = c.cw_c;
  j["cw_kappa"] = c.cw_kappa;
  j["cw_lr"] = c.cw_lr;
  j["ada_m"] = c.ada_m;
  j["ada_lambda"] = c.ada_lambda;
  j["ada_refresh"] = c.ada_refresh;
  j["seed"] = c.seed;
  return j;
}

}  // namespace

void append_adv(Container& c, const AdvBatch& batch) {
  auto& s = c.add("adv");
  s.set("attack", batch.attack);
  s.set("config", config_json(batch.config).dump());
  s.set("count", batch.size());
  for (const auto& t : batch.originals) s.tensors.push_back(t);
  for (const auto& t : batch.adversarials) s.tensors.push_back(t);
  std::vector<double> labels(batch.labels.begin(), batch.labels.end());
  std::vector<double> success(batch.success.begin(), batch.success.end());
  s.tensors.emplace_back(Shape{labels.size()}, labels);
  s.tensors.emplace_back(Shape{success.size()}, success);
}

AdvBatch read_adv(const Container& c) {
  const auto& s = c.at("adv");
  AdvBatch b;
  b.attack = s.get("attack");
  const auto j = nlohmann::json::parse(s.get("config"));
  b.config.name = j.at("name").get<std::string>();
  b.config.epsilon = j.at("epsilon").get<double>();
  b.config.steps = j.at("steps").get<std::size_t>();
  b.config.step_size = j.at("step_size").get<double>();
  b.config.random_start = j.at("random_start").get<bool>();
  b.config.cw_c = j.at("cw_c").get<double>();
  b.config.cw_kappa = j.at("cw_kappa").get<double>();
  b.config.cw_lr = j.at("cw_lr").get<double>();
  b.config.ada_m = j.at("ada_m").get<std::size_t>();
  b.config.ada_lambda = j.at("ada_lambda").get<double>();
  b.config.ada_refresh = j.at("ada_refresh").get<std::size_t>();
  b.config.seed = j.at("seed").get<std::uint64_t>();
  const auto n = static_cast<std::size_t>(s.get_int("count"));
  for (std::size_t i = 0; i < n; ++i) b.originals.push_back(s.tensor(i));
  for (std::size_t i = 0; i < n; ++i) b.adversarials.push_back(s.tensor(n + i));
  for (double v : s.tensor(2 * n).data()) b.labels.push_back(static_cast<std::size_t>(v));
  for (double v : s.tensor(2 * n + 1).data()) b.success.push_back(v != 0.0);
  return b;
}

void save_adv(const AdvBatch& batch, const std::filesystem::path& path) {
  Container c;
  append_adv(c, batch);
  c.save(path);
  auto j = config_json(batch.config);
  j["attack"] = batch.attack;
  j["count"] = batch.size();
  std::vector<int> flags(batch.success.begin(), batch.success.end());
  j["success"] = flags;
  std::ofstream out(path.string() + ".json");
  out << j.dump(2) << "\n";
  if (!out) throw DataError("cannot write " + path.string() + ".json");
}

AdvBatch load_adv(const std::filesystem::path& path) { return read_adv(Container::load(path)); }

}  // namespace ucan
