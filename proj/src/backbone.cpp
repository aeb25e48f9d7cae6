#include "ucan/backbone.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "ucan/ops.hpp"
#include "ucan/optim.hpp"

namespace ucan {

namespace {

const char* kind_name(StageKind k) {
  switch (k) {
    case StageKind::Conv3x3: return "conv3x3";
    case StageKind::Dense: return "dense";
    case StageKind::AvgPool2: return "avgpool2";
    case StageKind::MaxPool2: return "maxpool2";
    case StageKind::GlobalAvgPool: return "gap";
  }
  return "?";
}

StageKind kind_from(const std::string& s) {
  if (s == "conv3x3") return StageKind::Conv3x3;
  if (s == "dense") return StageKind::Dense;
  if (s == "avgpool2") return StageKind::AvgPool2;
  if (s == "maxpool2") return StageKind::MaxPool2;
  if (s == "gap") return StageKind::GlobalAvgPool;
  throw FormatError("unknown backbone stage kind '" + s + "'");
}

bool has_weights(StageKind k) { return k == StageKind::Conv3x3 || k == StageKind::Dense; }

// Output shape of each stage, starting from the input.
std::vector<Shape> stage_shapes(const BackboneSpec& spec) {
  std::vector<Shape> out;
  Shape cur = spec.input_shape;
  for (const auto& st : spec.stages) {
    switch (st.kind) {
      case StageKind::Conv3x3:
        if (cur.size() != 3) throw ConfigError("conv3x3 stage needs a C x H x W input");
        cur = {st.width, cur[1], cur[2]};
        break;
      case StageKind::Dense: cur = {st.width}; break;
      case StageKind::AvgPool2:
      case StageKind::MaxPool2:
        if (cur.size() != 3 || cur[1] < 2 || cur[2] < 2) throw ConfigError("pooling stage needs a map of at least 2x2");
        cur = {cur[0], cur[1] / 2, cur[2] / 2};
        break;
      case StageKind::GlobalAvgPool:
        if (cur.size() != 3) throw ConfigError("global pool stage needs a C x H x W input");
        cur = {cur[0]};
        break;
    }
    out.push_back(cur);
  }
  return out;
}

Shape as_map(const Shape& s) { return s.size() == 3 ? s : Shape{shape_numel(s), 1, 1}; }

}  // namespace

BackboneSpec BackboneSpec::small_cnn(Shape input_shape, std::size_t classes, bool max_pool) {
  const StageKind pool = max_pool ? StageKind::MaxPool2 : StageKind::AvgPool2;
  BackboneSpec spec;
  spec.input_shape = std::move(input_shape);
  spec.classes = classes;
  spec.stages = {
      {StageKind::Conv3x3, 8, Activation::Relu, true},
      {pool, 0, Activation::None, false},
      {StageKind::Conv3x3, 16, Activation::Relu, true},
      {pool, 0, Activation::None, false},
      {StageKind::Conv3x3, 32, Activation::Relu, true},
      {StageKind::GlobalAvgPool, 0, Activation::None, true},
      {StageKind::Dense, classes, Activation::None, false},
  };
  return spec;
}

BackboneSpec BackboneSpec::mlp(std::size_t input_dim, std::vector<std::size_t> hidden, std::size_t classes) {
  BackboneSpec spec;
  spec.input_shape = {input_dim, 1, 1};
  spec.classes = classes;
  for (auto h : hidden) spec.stages.push_back({StageKind::Dense, h, Activation::Relu, true});
  spec.stages.push_back({StageKind::Dense, classes, Activation::None, false});
  return spec;
}

void BackboneSpec::validate() const {
  if (classes < 2) throw ConfigError("backbone needs at least 2 classes");
  if (input_shape.empty() || shape_numel(input_shape) == 0) throw ConfigError("backbone input shape is empty");
  if (stages.empty() || stages.back().kind != StageKind::Dense || stages.back().width != classes ||
      stages.back().tap) {
    throw ConfigError("backbone must end in an untapped dense head with one unit per class");
  }
  for (const auto& st : stages) {
    if (has_weights(st.kind) && st.width == 0) throw ConfigError("weighted stage with zero width");
  }
  if (tap_count() < 2) throw ConfigError("backbone needs at least 2 tapped layers");
  stage_shapes(*this);
}

std::size_t BackboneSpec::tap_count() const {
  std::size_t n = 0;
  for (const auto& st : stages) n += st.tap ? 1 : 0;
  return n;
}

std::vector<Shape> BackboneSpec::tap_shapes() const {
  const auto shapes = stage_shapes(*this);
  std::vector<Shape> out;
  for (std::size_t i = 0; i < stages.size(); ++i) {
    if (stages[i].tap) out.push_back(as_map(shapes[i]));
  }
  return out;
}

std::string BackboneSpec::encode() const {
  std::ostringstream os;
  os << "input=";
  for (std::size_t i = 0; i < input_shape.size(); ++i) os << (i ? "x" : "") << input_shape[i];
  os << ";classes=" << classes << ";stages=";
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const auto& st = stages[i];
    os << (i ? "," : "") << kind_name(st.kind) << ':' << st.width << ':'
       << (st.activation == Activation::Relu ? "relu" : "none") << ':' << (st.tap ? "tap" : "-");
  }
  return os.str();
}

BackboneSpec BackboneSpec::decode(const std::string& text) {
  BackboneSpec spec;
  std::istringstream fields(text);
  try {
    for (std::string field; std::getline(fields, field, ';');) {
      const auto eq = field.find('=');
      if (eq == std::string::npos) throw FormatError("backbone spec field without '='");
      const auto key = field.substr(0, eq), value = field.substr(eq + 1);
      if (key == "input") {
        std::istringstream dims(value);
        for (std::string d; std::getline(dims, d, 'x');) spec.input_shape.push_back(std::stoul(d));
      } else if (key == "classes") {
        spec.classes = std::stoul(value);
      } else if (key == "stages") {
        std::istringstream items(value);
        for (std::string item; std::getline(items, item, ',');) {
          std::istringstream parts(item);
          std::string kind, width, act, tap;
          std::getline(parts, kind, ':');
          std::getline(parts, width, ':');
          std::getline(parts, act, ':');
          std::getline(parts, tap, ':');
          spec.stages.push_back({kind_from(kind), std::stoul(width), act == "relu" ? Activation::Relu : Activation::None,
                                 tap == "tap"});
        }
      }
    }
  } catch (const std::logic_error&) {
    throw FormatError("malformed backbone spec: " + text);
  }
  spec.validate();
  return spec;
}

BackboneModel::BackboneModel(BackboneSpec spec, std::uint64_t init_seed) : spec_(std::move(spec)) {
  spec_.validate();
  Rng rng(derive_seed(init_seed, 0xBAC0));
  Shape cur = spec_.input_shape;
  const auto shapes = stage_shapes(spec_);
  for (std::size_t i = 0; i < spec_.stages.size(); ++i) {
    const auto& st = spec_.stages[i];
    if (st.kind == StageKind::Conv3x3 || st.kind == StageKind::Dense) {
      const std::size_t fan_in = st.kind == StageKind::Conv3x3 ? cur[0] * 9 : shape_numel(cur);
      Shape wshape = st.kind == StageKind::Conv3x3 ? Shape{st.width, cur[0], 3, 3} : Shape{st.width, fan_in};
      // He-uniform for relu layers, Glorot-like bound for the linear head.
      const double bound = st.activation == Activation::Relu ? std::sqrt(6.0 / static_cast<double>(fan_in))
                                                             : std::sqrt(3.0 / static_cast<double>(fan_in));
      std::uniform_real_distribution<double> unif(-bound, bound);
      std::vector<double> w(shape_numel(wshape));
      for (auto& v : w) v = unif(rng);
      params_.emplace_back(std::move(wshape), std::move(w));
      params_.emplace_back(Shape{st.width});
    }
    cur = shapes[i];
  }
}

std::size_t BackboneModel::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.numel();
  return n;
}

std::uint32_t BackboneModel::checksum() const { return ucan::checksum(params_); }

BackboneModel::Output BackboneModel::run(const Tensor& x, std::span<const Tensor> params, bool keep_taps) const {
  if (x.shape() != spec_.input_shape) {
    throw DimensionError("backbone input " + shape_str(x.shape()) + " does not match " + shape_str(spec_.input_shape));
  }
  if (params.size() != params_.size()) throw ContractError("backbone: parameter list has the wrong length");
  Output out;
  Tensor h = x;
  std::size_t p = 0;
  for (const auto& st : spec_.stages) {
    switch (st.kind) {
      case StageKind::Conv3x3: h = ops::conv3x3(h, params[p], params[p + 1]); p += 2; break;
      case StageKind::Dense: h = ops::dense(h, params[p], params[p + 1]); p += 2; break;
      case StageKind::AvgPool2: h = ops::avg_pool2(h); break;
      case StageKind::MaxPool2: h = ops::max_pool2(h); break;
      case StageKind::GlobalAvgPool: h = ops::global_avg_pool(h); break;
    }
    if (st.activation == Activation::Relu) h = ops::relu(h);
    if (st.tap && keep_taps) out.taps.push_back(h.rank() == 3 ? h : h.reshape(as_map(h.shape())));
  }
  out.logits = h;
  return out;
}

BackboneModel::Output BackboneModel::forward_with_taps(const Tensor& x) const { return run(x, params_, true); }

Tensor BackboneModel::logits(const Tensor& x) const { return run(x, params_, false).logits; }

std::size_t BackboneModel::predict(const Tensor& x) const {
  const auto l = logits(x);
  return ops::argmax(l.data());
}

double accuracy(const BackboneModel& model, const LabeledDataset& data) {
  if (data.empty()) throw DataError("accuracy: empty dataset");
  std::vector<char> hit(data.size());
  parallel_for(data.size(), [&](std::size_t i) { hit[i] = model.predict(data.samples[i]) == data.labels[i]; });
  std::size_t correct = 0;
  for (char h : hit) correct += h ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(data.size());
}

BatchGradient batch_gradient(const std::vector<Tensor>& params, std::span<const std::size_t> batch,
                             const SampleLoss& loss) {
  constexpr std::size_t kChunk = 8;
  const std::size_t chunks = (batch.size() + kChunk - 1) / kChunk;
  std::vector<std::vector<std::vector<double>>> chunk_grads(chunks);
  std::vector<double> chunk_loss(chunks, 0.0);
  parallel_for(chunks, [&](std::size_t c) {
    std::vector<Tensor> replica;
    replica.reserve(params.size());
    for (const auto& p : params) replica.push_back(p.detach(true));
    double total = 0.0;
    for (std::size_t i = c * kChunk; i < std::min(batch.size(), (c + 1) * kChunk); ++i) {
      auto l = loss(replica, batch[i]);
      total += l.item();
      l.backward();
    }
    chunk_loss[c] = total;
    auto& g = chunk_grads[c];
    for (const auto& r : replica) g.emplace_back(r.grad().begin(), r.grad().end());
  });
  BatchGradient out;
  out.grads.resize(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) out.grads[k].assign(params[k].numel(), 0.0);
  double total = 0.0;
  for (std::size_t c = 0; c < chunks; ++c) {
    total += chunk_loss[c];
    for (std::size_t k = 0; k < params.size(); ++k) {
      for (std::size_t j = 0; j < out.grads[k].size(); ++j) out.grads[k][j] += chunk_grads[c][k][j];
    }
  }
  const double inv = batch.empty() ? 0.0 : 1.0 / static_cast<double>(batch.size());
  for (auto& g : out.grads) {
    for (auto& v : g) v *= inv;
  }
  out.mean_loss = total * inv;
  return out;
}

std::vector<std::size_t> balanced_order(const std::vector<std::size_t>& labels, std::size_t classes, Rng& rng) {
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t i = 0; i < labels.size(); ++i) by_class.at(labels[i]).push_back(i);
  for (auto& v : by_class) std::shuffle(v.begin(), v.end(), rng);
  std::vector<std::size_t> order;
  order.reserve(labels.size());
  for (std::size_t round = 0; order.size() < labels.size(); ++round) {
    for (auto& v : by_class) {
      if (round < v.size()) order.push_back(v[round]);
    }
  }
  return order;
}

TrainLog train_backbone(BackboneModel& model, const LabeledDataset& data, const BackboneTrainOptions& options) {
  if (model.frozen()) throw ContractError("train_backbone: model is frozen");
  if (data.empty()) throw DataError("train_backbone: empty dataset");
  data.validate();
  if (data.classes != model.spec().classes) throw DataError("train_backbone: dataset class count differs from model");
  if (data.sample_shape != model.spec().input_shape) throw DataError("train_backbone: sample shape differs from model input");
  if (options.batch_size == 0 || !(options.learning_rate > 0.0)) throw ConfigError("train_backbone: bad batch size or rate");

  TrainLog log;
  Rng rng(derive_seed(options.seed, 0x7EA1));
  SgdMomentum opt(options.learning_rate, options.momentum);
  auto& params = model.parameters();
  for (std::size_t epoch = 0; epoch < options.epochs; ++epoch) {
    const auto order = balanced_order(data.labels, data.classes, rng);
    // Noise draws are made up front so the result is independent of threading.
    std::vector<std::uint64_t> noise_seeds(order.size());
    for (auto& s : noise_seeds) s = rng();
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < order.size(); start += options.batch_size) {
      const std::size_t end = std::min(order.size(), start + options.batch_size);
      std::vector<std::size_t> batch(order.begin() + static_cast<std::ptrdiff_t>(start),
                                     order.begin() + static_cast<std::ptrdiff_t>(end));
      auto bg = batch_gradient(params, batch, [&](std::span<const Tensor> replica, std::size_t i) {
        Tensor x = data.samples[i];
        if (options.noise_augment > 0.0) {
          Rng nrng(noise_seeds[i % noise_seeds.size()] ^ i);
          std::normal_distribution<double> gauss(0.0, options.noise_augment);
          std::vector<double> v(x.data().begin(), x.data().end());
          for (auto& e : v) e = std::clamp(e + gauss(nrng), 0.0, 1.0);
          x = Tensor(x.shape(), std::move(v));
        }
        return ops::softmax_xent(model.run(x, replica, false).logits, data.labels[i]);
      });
      loss_sum += bg.mean_loss * static_cast<double>(batch.size());
      std::vector<std::span<double>> ps;
      std::vector<std::span<const double>> gs;
      for (std::size_t k = 0; k < params.size(); ++k) {
        ps.push_back(params[k].mutable_data());
        gs.push_back(bg.grads[k]);
      }
      opt.step(ps, gs);
    }
    EpochRecord rec;
    rec.epoch = epoch + 1;
    rec.loss = loss_sum / static_cast<double>(order.size());
    if (!std::isfinite(rec.loss)) throw NonFiniteError("train_backbone: loss diverged");
    rec.val_accuracy = options.validation ? accuracy(model, *options.validation) : std::nan("");
    log.push_back(rec);
  }
  return log;
}

void append_backbone(Container& c, const BackboneModel& model) {
  auto& s = c.add("backbone");
  s.set("spec", model.spec().encode());
  s.set("frozen", model.frozen() ? 1 : 0);
  for (const auto& p : model.parameters()) s.tensors.push_back(p.detach());
}

BackboneModel read_backbone(const Container& c) {
  const auto& s = c.at("backbone");
  BackboneModel model(BackboneSpec::decode(s.get("spec")), 0);
  auto& params = model.parameters();
  if (s.tensors.size() != params.size()) throw FormatError("backbone section has the wrong number of tensors");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (s.tensors[i].shape() != params[i].shape()) throw FormatError("backbone tensor shape mismatch");
    auto dst = params[i].mutable_data();
    std::copy(s.tensors[i].data().begin(), s.tensors[i].data().end(), dst.begin());
  }
  if (s.get_int("frozen") != 0) model.freeze();
  return model;
}

void serialize_model(const BackboneModel& model, const std::filesystem::path& path) {
  Container c;
  append_backbone(c, model);
  c.save(path);
}

BackboneModel load_model(const std::filesystem::path& path) { return read_backbone(Container::load(path)); }

}  // namespace ucan
