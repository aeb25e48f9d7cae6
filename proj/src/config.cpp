#include "ucan/config.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <set>
#include <sstream>

#include "ucan/errors.hpp"

namespace ucan {

namespace {

using boost::property_tree::ptree;

std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t");
  if (a == std::string::npos) return "";
  return s.substr(a, s.find_last_not_of(" \t") - a + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

template <class T>
T parse_value(const std::string& key, const std::string& text) {
  std::istringstream in(text);
  T v{};
  in >> v;
  if (in.fail() || !(in >> std::ws).eof()) throw ConfigError("config: '" + key + "' has invalid value '" + text + "'");
  return v;
}

bool parse_bool(const std::string& key, const std::string& text) {
  if (text == "true" || text == "1" || text == "yes") return true;
  if (text == "false" || text == "0" || text == "no") return false;
  throw ConfigError("config: '" + key + "' expects true/false, got '" + text + "'");
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& text) {
  std::vector<T> out;
  for (const auto& s : split_list(text)) out.push_back(parse_value<T>(key, s));
  return out;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "," : "") << v[i];
  return s.str();
}

// Key -> setter. Keeps the schema in one place so unknown keys are rejected.
using Setter = std::function<void(RunConfig&, const std::string& key, const std::string& value)>;

std::map<std::string, Setter> schema() {
  std::map<std::string, Setter> m;
  auto sz = [](auto get) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_value<std::size_t>(k, v); };
  };
  auto dbl = [](auto get) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_value<double>(k, v); };
  };
  auto flag = [](auto get) {
    return [get](RunConfig& c, const std::string& k, const std::string& v) { get(c) = parse_bool(k, v); };
  };

  m["data.source"] = [](RunConfig& c, const std::string&, const std::string& v) { c.data.source = v; };
  m["data.classes"] = sz([](RunConfig& c) -> auto& { return c.data.synthetic.classes; });
  m["data.per_class"] = sz([](RunConfig& c) -> auto& { return c.data.synthetic.per_class; });
  m["data.image_size"] = sz([](RunConfig& c) -> auto& { return c.data.synthetic.image_size; });
  m["data.channels"] = sz([](RunConfig& c) -> auto& { return c.data.synthetic.channels; });
  m["data.separation"] = dbl([](RunConfig& c) -> auto& { return c.data.synthetic.separation; });
  m["data.noise"] = dbl([](RunConfig& c) -> auto& { return c.data.synthetic.noise; });
  m["data.nuisance"] = dbl([](RunConfig& c) -> auto& { return c.data.synthetic.nuisance; });
  m["data.cifar_path"] = [](RunConfig& c, const std::string&, const std::string& v) { c.data.cifar_path = v; };
  m["data.cifar_classes"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    c.data.cifar_classes = parse_list<std::size_t>(k, v);
  };

  m["split.train"] = dbl([](RunConfig& c) -> auto& { return c.split[0]; });
  m["split.val"] = dbl([](RunConfig& c) -> auto& { return c.split[1]; });
  m["split.calib"] = dbl([](RunConfig& c) -> auto& { return c.split[2]; });
  m["split.test"] = dbl([](RunConfig& c) -> auto& { return c.split[3]; });

  m["backbone.architecture"] = [](RunConfig& c, const std::string&, const std::string& v) { c.architecture = v; };
  m["backbone.hidden"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    c.mlp_hidden = parse_list<std::size_t>(k, v);
  };
  m["backbone.epochs"] = sz([](RunConfig& c) -> auto& { return c.backbone.epochs; });
  m["backbone.batch_size"] = sz([](RunConfig& c) -> auto& { return c.backbone.batch_size; });
  m["backbone.learning_rate"] = dbl([](RunConfig& c) -> auto& { return c.backbone.learning_rate; });
  m["backbone.momentum"] = dbl([](RunConfig& c) -> auto& { return c.backbone.momentum; });
  m["backbone.noise_augment"] = dbl([](RunConfig& c) -> auto& { return c.backbone.noise_augment; });

  m["aux.embed_dim"] = sz([](RunConfig& c) -> auto& { return c.arcface.embed_dim; });
  m["aux.scale"] = dbl([](RunConfig& c) -> auto& { return c.arcface.scale; });
  m["aux.margin"] = dbl([](RunConfig& c) -> auto& { return c.arcface.margin; });
  m["aux.epochs"] = sz([](RunConfig& c) -> auto& { return c.aux.epochs; });
  m["aux.batch_size"] = sz([](RunConfig& c) -> auto& { return c.aux.batch_size; });
  m["aux.learning_rate"] = dbl([](RunConfig& c) -> auto& { return c.aux.learning_rate; });
  m["aux.momentum"] = dbl([](RunConfig& c) -> auto& { return c.aux.momentum; });

  m["select.policy"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    if (v == "top") c.selection.kind = SelectionPolicy::Kind::TopS;
    else if (v == "offset") c.selection.kind = SelectionPolicy::Kind::Offset;
    else throw ConfigError("config: '" + k + "' must be top or offset");
  };
  m["select.value"] = sz([](RunConfig& c) -> auto& { return c.selection.value; });

  m["attack.names"] = [](RunConfig& c, const std::string&, const std::string& v) { c.attacks.names = split_list(v); };
  m["attack.epsilons"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    c.attacks.epsilons = parse_list<double>(k, v);
  };
  m["attack.steps"] = sz([](RunConfig& c) -> auto& { return c.attacks.base.steps; });
  m["attack.step_size"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    if (v.empty() || v == "auto") c.attacks.base.step_size.reset();
    else c.attacks.base.step_size = parse_value<double>(k, v);
  };
  m["attack.random_start"] = flag([](RunConfig& c) -> auto& { return c.attacks.base.random_start; });
  m["attack.cw_c"] = dbl([](RunConfig& c) -> auto& { return c.attacks.base.cw_c; });
  m["attack.cw_kappa"] = dbl([](RunConfig& c) -> auto& { return c.attacks.base.cw_kappa; });
  m["attack.cw_lr"] = dbl([](RunConfig& c) -> auto& { return c.attacks.base.cw_lr; });
  m["attack.adaptive"] = flag([](RunConfig& c) -> auto& { return c.attacks.adaptive; });
  m["attack.ada_steps"] = sz([](RunConfig& c) -> auto& { return c.attacks.ada_steps; });
  m["attack.ada_m"] = sz([](RunConfig& c) -> auto& { return c.attacks.base.ada_m; });
  m["attack.ada_lambda"] = dbl([](RunConfig& c) -> auto& { return c.attacks.base.ada_lambda; });
  m["attack.ada_refresh"] = sz([](RunConfig& c) -> auto& { return c.attacks.base.ada_refresh; });
  m["attack.max_samples"] = sz([](RunConfig& c) -> auto& { return c.attacks.max_samples; });

  m["detector.kinds"] = [](RunConfig& c, const std::string&, const std::string& v) { c.detectors.kinds = split_list(v); };
  m["detector.sources"] = [](RunConfig& c, const std::string&, const std::string& v) {
    c.detectors.sources = split_list(v);
  };
  m["detector.k"] = sz([](RunConfig& c) -> auto& { return c.detectors.k; });
  m["detector.dnr_max_train"] = sz([](RunConfig& c) -> auto& { return c.detectors.dnr_max_train; });
  m["detector.dnr_input"] = [](RunConfig& c, const std::string&, const std::string& v) { c.detectors.dnr_input = v; };
  m["detector.svm_c"] = dbl([](RunConfig& c) -> auto& { return c.detectors.svm.C; });
  m["detector.svm_gamma"] = dbl([](RunConfig& c) -> auto& { return c.detectors.svm.gamma; });
  m["detector.svm_tol"] = dbl([](RunConfig& c) -> auto& { return c.detectors.svm.tol; });
  m["detector.svm_max_iter"] = sz([](RunConfig& c) -> auto& { return c.detectors.svm.max_iter; });

  m["eval.successful_only"] = flag([](RunConfig& c) -> auto& { return c.successful_only; });
  m["bench.batch"] = sz([](RunConfig& c) -> auto& { return c.bench_batch; });
  m["bench.iterations"] = sz([](RunConfig& c) -> auto& { return c.bench_iterations; });

  m["run.seeds"] = [](RunConfig& c, const std::string& k, const std::string& v) {
    c.seeds = parse_list<std::uint64_t>(k, v);
  };
  m["run.out_dir"] = [](RunConfig& c, const std::string&, const std::string& v) { c.out_dir = v; };
  m["run.threads"] = sz([](RunConfig& c) -> auto& { return c.threads; });
  return m;
}

}  // namespace

void RunConfig::validate() const {
  double sum = 0.0;
  for (double f : split) {
    if (!(f > 0.0)) throw ConfigError("config: split fractions must be positive");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("config: split fractions sum to " + std::to_string(sum) + ", not 1");
  if (data.source != "synthetic" && data.source != "cifar10") throw ConfigError("config: unknown data source '" + data.source + "'");
  if (data.source == "cifar10" && data.cifar_path.empty()) throw ConfigError("config: cifar10 source needs data.cifar_path");
  if (data.source == "synthetic" && (data.synthetic.classes < 2 || data.synthetic.per_class < 1)) {
    throw ConfigError("config: synthetic data needs >= 2 classes and >= 1 sample per class");
  }
  if (architecture != "small_cnn" && architecture != "mlp") throw ConfigError("config: unknown architecture '" + architecture + "'");
  if (arcface.embed_dim == 0) throw ConfigError("config: aux.embed_dim must be positive");
  if (selection.value == 0) throw ConfigError("config: select.value must be positive");
  for (const auto& n : attacks.names) {
    if (n != "pgd" && n != "cw") throw ConfigError("config: unknown attack '" + n + "' (ada-dknn is enabled by attack.adaptive)");
  }
  for (double e : attacks.epsilons) {
    if (!(e >= 0.0)) throw ConfigError("config: attack budgets must be >= 0");
  }
  for (const auto& k : detectors.kinds) {
    if (k != "dknn" && k != "dnr" && k != "sad") throw ConfigError("config: unknown detector '" + k + "'");
  }
  for (const auto& s : detectors.sources) {
    if (s != "raw" && s != "ucan") throw ConfigError("config: unknown detector source '" + s + "'");
  }
  if (detectors.dnr_input != "embedding" && detectors.dnr_input != "cosine") {
    throw ConfigError("config: detector.dnr_input must be embedding or cosine");
  }
  if (detectors.k == 0) throw ConfigError("config: detector.k must be positive");
  if (seeds.empty()) throw ConfigError("config: run.seeds must list at least one seed");
  if (bench_iterations == 0) throw ConfigError("config: bench.iterations must be positive");
  AttackConfig probe = attacks.base;
  probe.validate();
}

RunConfig parse_config(const std::string& text) {
  ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  RunConfig cfg;
  const auto keys = schema();
  for (const auto& [section, body] : tree) {
    if (body.empty() && !body.data().empty()) throw ConfigError("config: key '" + section + "' outside a section");
    for (const auto& [key, value] : body) {
      const std::string full = section + "." + key;
      const auto it = keys.find(full);
      if (it == keys.end()) throw ConfigError("config: unknown key '" + full + "'");
      it->second(cfg, full, trim(value.data()));
    }
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path.string());
  std::stringstream s;
  s << in.rdbuf();
  return parse_config(s.str());
}

std::string dump_config(const RunConfig& c) {
  std::ostringstream s;
  s.precision(12);
  const auto& d = c.data.synthetic;
  s << "[data]\nsource = " << c.data.source << "\nclasses = " << d.classes << "\nper_class = " << d.per_class
    << "\nimage_size = " << d.image_size << "\nchannels = " << d.channels << "\nseparation = " << d.separation
    << "\nnoise = " << d.noise << "\nnuisance = " << d.nuisance << "\ncifar_path = " << c.data.cifar_path.string()
    << "\ncifar_classes = " << join(c.data.cifar_classes) << "\n\n";
  s << "[split]\ntrain = " << c.split[0] << "\nval = " << c.split[1] << "\ncalib = " << c.split[2]
    << "\ntest = " << c.split[3] << "\n\n";
  s << "[backbone]\narchitecture = " << c.architecture << "\nhidden = " << join(c.mlp_hidden)
    << "\nepochs = " << c.backbone.epochs << "\nbatch_size = " << c.backbone.batch_size
    << "\nlearning_rate = " << c.backbone.learning_rate << "\nmomentum = " << c.backbone.momentum
    << "\nnoise_augment = " << c.backbone.noise_augment << "\n\n";
  s << "[aux]\nembed_dim = " << c.arcface.embed_dim << "\nscale = " << c.arcface.scale << "\nmargin = " << c.arcface.margin
    << "\nepochs = " << c.aux.epochs << "\nbatch_size = " << c.aux.batch_size << "\nlearning_rate = " << c.aux.learning_rate
    << "\nmomentum = " << c.aux.momentum << "\n\n";
  s << "[select]\npolicy = " << (c.selection.kind == SelectionPolicy::Kind::TopS ? "top" : "offset")
    << "\nvalue = " << c.selection.value << "\n\n";
  const auto& a = c.attacks.base;
  s << "[attack]\nnames = " << join(c.attacks.names) << "\nepsilons = " << join(c.attacks.epsilons)
    << "\nsteps = " << a.steps << "\nstep_size = ";
  if (a.step_size) s << *a.step_size;
  else s << "auto";
  s
    << "\nrandom_start = " << (a.random_start ? "true" : "false") << "\ncw_c = " << a.cw_c << "\ncw_kappa = " << a.cw_kappa
    << "\ncw_lr = " << a.cw_lr << "\nadaptive = " << (c.attacks.adaptive ? "true" : "false")
    << "\nada_steps = " << c.attacks.ada_steps << "\nada_m = " << a.ada_m << "\nada_lambda = " << a.ada_lambda
    << "\nada_refresh = " << a.ada_refresh << "\nmax_samples = " << c.attacks.max_samples << "\n\n";
  s << "[detector]\nkinds = " << join(c.detectors.kinds) << "\nsources = " << join(c.detectors.sources)
    << "\nk = " << c.detectors.k << "\ndnr_max_train = " << c.detectors.dnr_max_train << "\ndnr_input = " << c.detectors.dnr_input << "\nsvm_c = " << c.detectors.svm.C
    << "\nsvm_gamma = " << c.detectors.svm.gamma << "\nsvm_tol = " << c.detectors.svm.tol
    << "\nsvm_max_iter = " << c.detectors.svm.max_iter << "\n\n";
  s << "[eval]\nsuccessful_only = " << (c.successful_only ? "true" : "false") << "\n\n";
  s << "[bench]\nbatch = " << c.bench_batch << "\niterations = " << c.bench_iterations << "\n\n";
  s << "[run]\nseeds = " << join(c.seeds) << "\nout_dir = " << c.out_dir.string() << "\nthreads = " << c.threads << "\n";
  return s.str();
}

}  // namespace ucan
