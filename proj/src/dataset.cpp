#include "ucan/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>

#include "ucan/parallel.hpp"

namespace ucan {

const char* split_name(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Calib: return "calib";
    case Split::Test: return "test";
    default: return "unassigned";
  }
}

void LabeledDataset::push(Tensor sample, std::size_t label, std::size_t id) {
  samples.push_back(std::move(sample));
  labels.push_back(label);
  ids.push_back(id);
}

void LabeledDataset::validate() const {
  if (classes < 2) throw DataError("dataset needs at least 2 classes");
  if (samples.size() != labels.size() || samples.size() != ids.size()) {
    throw DataError("dataset: samples, labels and ids differ in length");
  }
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (samples[i].shape() != sample_shape) {
      throw DataError("dataset: sample " + std::to_string(i) + " has shape " + shape_str(samples[i].shape()));
    }
    if (labels[i] >= classes) throw DataError("dataset: label out of range at sample " + std::to_string(i));
  }
}

std::vector<std::size_t> LabeledDataset::class_counts() const {
  std::vector<std::size_t> counts(classes, 0);
  for (auto y : labels) ++counts.at(y);
  return counts;
}

LabeledDataset LabeledDataset::subset(const std::vector<std::size_t>& indices) const {
  LabeledDataset out;
  out.sample_shape = sample_shape;
  out.classes = classes;
  out.split = split;
  for (auto i : indices) out.push(samples.at(i), labels.at(i), ids.at(i));
  return out;
}

namespace {

std::array<double, 3> class_colour(std::size_t c, std::size_t classes) {
  // Evenly spaced hues, saturation 0.8, value 0.9.
  const double h = 6.0 * static_cast<double>(c) / static_cast<double>(classes);
  const double v = 0.9, s = 0.8;
  const double chroma = v * s;
  const double x = chroma * (1.0 - std::abs(std::fmod(h, 2.0) - 1.0));
  const double m = v - chroma;
  std::array<double, 3> rgb{};
  switch (static_cast<int>(h) % 6) {
    case 0: rgb = {chroma, x, 0}; break;
    case 1: rgb = {x, chroma, 0}; break;
    case 2: rgb = {0, chroma, x}; break;
    case 3: rgb = {0, x, chroma}; break;
    case 4: rgb = {x, 0, chroma}; break;
    default: rgb = {chroma, 0, x}; break;
  }
  for (auto& ch : rgb) ch += m;
  return rgb;
}

}  // namespace

LabeledDataset gen_synthetic(const SyntheticImageSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.image_size < 4 || spec.channels < 1 ||
      !(spec.separation > 0.0) || !(spec.noise >= 0.0)) {
    throw ConfigError("gen_synthetic: need classes >= 2, per_class >= 1, image_size >= 4, channels >= 1, "
                      "separation > 0, noise >= 0");
  }
  const std::size_t s = spec.image_size, C = spec.channels;
  const double pi = std::numbers::pi;
  const double centre = (static_cast<double>(s) - 1.0) / 2.0;
  const double orbit = static_cast<double>(s) / 4.0;
  const double blob_sigma = static_cast<double>(s) / 6.0;
  const double jitter = static_cast<double>(s) / 10.0;
  const double freq = 2.0 * pi / (static_cast<double>(s) / 3.0);

  LabeledDataset ds;
  ds.sample_shape = {C, s, s};
  ds.classes = spec.classes;
  std::size_t id = 0;
  // Interleave classes so that prefixes of the dataset stay balanced.
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < spec.classes; ++c, ++id) {
      Rng rng(derive_seed(spec.seed, id));
      std::normal_distribution<double> gauss(0.0, 1.0);
      std::uniform_real_distribution<double> unif(0.0, 2.0 * pi);
      const double angle = 2.0 * pi * static_cast<double>(c) / static_cast<double>(spec.classes);
      // nuisance in [0, 1] moves the blob from its class orbit position
      // towards a uniformly random one.
      std::uniform_real_distribution<double> upos(blob_sigma, static_cast<double>(s - 1) - blob_sigma);
      const double mix = std::clamp(spec.nuisance, 0.0, 1.0);
      const double cy = (1.0 - mix) * (centre + orbit * std::sin(angle)) + mix * upos(rng) + jitter * gauss(rng);
      const double cx = (1.0 - mix) * (centre + orbit * std::cos(angle)) + mix * upos(rng) + jitter * gauss(rng);
      const double theta = pi * static_cast<double>(c) / static_cast<double>(spec.classes);
      const double phase = unif(rng);
      const auto colour = class_colour(c, spec.classes);
      // Class-independent clutter: a background tint and a distractor blob
      // in the colour of a random class at a random place.
      std::uniform_real_distribution<double> u01(0.0, 1.0);
      std::array<double, 3> background{};
      for (auto& b : background) b = spec.nuisance * 0.25 * (2.0 * u01(rng) - 1.0);
      const auto other = class_colour(static_cast<std::size_t>(u01(rng) * static_cast<double>(spec.classes)) % spec.classes,
                                      spec.classes);
      const double oy = u01(rng) * static_cast<double>(s - 1), ox = u01(rng) * static_cast<double>(s - 1);
      std::vector<double> px(C * s * s);
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double tint = C == 3 ? colour[ch] - 0.5 : 0.4;
        const double otint = C == 3 ? other[ch] - 0.5 : 0.4;
        const double bg = background[ch % 3];
        for (std::size_t y = 0; y < s; ++y) {
          for (std::size_t x = 0; x < s; ++x) {
            const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
            const double blob = std::exp(-(dx * dx + dy * dy) / (2.0 * blob_sigma * blob_sigma));
            const double ey = static_cast<double>(y) - oy, ex = static_cast<double>(x) - ox;
            const double distractor = std::exp(-(ex * ex + ey * ey) / (2.0 * blob_sigma * blob_sigma));
            const double grating =
                std::sin(freq * (static_cast<double>(x) * std::cos(theta) + static_cast<double>(y) * std::sin(theta)) +
                         phase);
            const double v = 0.5 + bg + spec.separation * (0.6 * tint * blob + 0.12 * grating) +
                             spec.nuisance * 0.5 * otint * distractor + spec.noise * gauss(rng);
            px[(ch * s + y) * s + x] = std::clamp(v, 0.0, 1.0);
          }
        }
      }
      ds.push(Tensor(ds.sample_shape, std::move(px)), c, id);
    }
  }
  return ds;
}

LabeledDataset gen_blobs(const SyntheticBlobSpec& spec) {
  if (spec.classes < 2 || spec.per_class < 1 || spec.dim < 1 || !(spec.separation > 0.0)) {
    throw ConfigError("gen_blobs: need classes >= 2, per_class >= 1, dim >= 1, separation > 0");
  }
  Rng centre_rng(derive_seed(spec.seed, 0xC0FFEE));
  std::uniform_real_distribution<double> unif(0.2, 0.8);
  std::vector<std::vector<double>> centres(spec.classes, std::vector<double>(spec.dim));
  for (auto& c : centres) {
    for (auto& v : c) v = unif(centre_rng);
  }
  const double sd = 0.08 / spec.separation;
  LabeledDataset ds;
  ds.sample_shape = {spec.dim, 1, 1};
  ds.classes = spec.classes;
  std::size_t id = 0;
  for (std::size_t i = 0; i < spec.per_class; ++i) {
    for (std::size_t c = 0; c < spec.classes; ++c, ++id) {
      Rng rng(derive_seed(spec.seed, id));
      std::normal_distribution<double> gauss(0.0, sd);
      std::vector<double> v(spec.dim);
      for (std::size_t d = 0; d < spec.dim; ++d) v[d] = std::clamp(centres[c][d] + gauss(rng), 0.0, 1.0);
      ds.push(Tensor(ds.sample_shape, std::move(v)), c, id);
    }
  }
  return ds;
}

LabeledDataset load_cifar10_binary(const std::filesystem::path& path, const std::vector<std::size_t>& class_subset) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open CIFAR-10 file " + path.string());
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (bytes.size() % kCifarRecordBytes != 0) {
    throw FormatError("CIFAR-10 file size " + std::to_string(bytes.size()) + " is not a multiple of 3073");
  }
  std::vector<long> remap(10, -1);
  if (class_subset.empty()) {
    std::iota(remap.begin(), remap.end(), 0L);
  } else {
    for (std::size_t i = 0; i < class_subset.size(); ++i) {
      if (class_subset[i] > 9) throw ConfigError("CIFAR-10 class subset entries must be in [0, 9]");
      remap[class_subset[i]] = static_cast<long>(i);
    }
  }
  LabeledDataset ds;
  ds.sample_shape = {3, 32, 32};
  ds.classes = class_subset.empty() ? 10 : class_subset.size();
  const std::size_t n = bytes.size() / kCifarRecordBytes;
  for (std::size_t r = 0; r < n; ++r) {
    const unsigned char* rec = bytes.data() + r * kCifarRecordBytes;
    if (rec[0] > 9) throw CorruptRecordError("CIFAR-10 record " + std::to_string(r) + " has label " + std::to_string(rec[0]));
    if (remap[rec[0]] < 0) continue;
    std::vector<double> px(3072);
    for (std::size_t i = 0; i < 3072; ++i) px[i] = static_cast<double>(rec[1 + i]) / 255.0;
    ds.push(Tensor(ds.sample_shape, std::move(px)), static_cast<std::size_t>(remap[rec[0]]), r);
  }
  return ds;
}

DatasetSplits split_dataset(const LabeledDataset& ds, const SplitFractions& fractions, std::uint64_t seed) {
  double total = 0.0;
  for (double f : fractions) {
    if (!(f > 0.0)) throw ConfigError("split fractions must all be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw ConfigError("split fractions must sum to 1");
  ds.validate();
  if (ds.empty()) throw DataError("cannot split an empty dataset");

  std::vector<std::vector<std::size_t>> by_class(ds.classes);
  for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

  std::array<std::vector<std::size_t>, 4> parts;
  Rng rng(derive_seed(seed, 0x5B117));
  // Per-class floors, then leftover units go to the split furthest below its
  // cumulative target so global split sizes also stay within one of exact.
  std::array<double, 4> assigned_total{};
  std::size_t seen = 0;
  for (auto& members : by_class) {
    std::shuffle(members.begin(), members.end(), rng);
    const std::size_t n = members.size();
    seen += n;
    std::array<std::size_t, 4> counts{};
    std::size_t assigned = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      counts[k] = static_cast<std::size_t>(std::floor(fractions[k] * static_cast<double>(n) + 1e-9));
      assigned += counts[k];
    }
    while (assigned < n) {
      std::size_t best = 0;
      double best_deficit = -1e300;
      for (std::size_t k = 0; k < 4; ++k) {
        const double deficit =
            fractions[k] * static_cast<double>(seen) - (assigned_total[k] + static_cast<double>(counts[k]));
        if (deficit > best_deficit + 1e-12) {
          best_deficit = deficit;
          best = k;
        }
      }
      ++counts[best];
      ++assigned;
    }
    std::size_t pos = 0;
    for (std::size_t k = 0; k < 4; ++k) {
      assigned_total[k] += static_cast<double>(counts[k]);
      for (std::size_t j = 0; j < counts[k]; ++j) parts[k].push_back(members[pos++]);
    }
  }
  for (auto& p : parts) std::sort(p.begin(), p.end());
  DatasetSplits out{ds.subset(parts[0]), ds.subset(parts[1]), ds.subset(parts[2]), ds.subset(parts[3])};
  out.train.split = Split::Train;
  out.val.split = Split::Val;
  out.calib.split = Split::Calib;
  out.test.split = Split::Test;
  return out;
}

void append_dataset(Container& c, const std::string& section, const LabeledDataset& ds) {
  auto& s = c.add(section);
  s.set("classes", ds.classes);
  s.set("count", ds.size());
  s.set("split", split_name(ds.split));
  s.set("split_code", static_cast<int>(ds.split));
  Shape all{ds.size()};
  all.insert(all.end(), ds.sample_shape.begin(), ds.sample_shape.end());
  std::vector<double> values;
  values.reserve(shape_numel(all));
  for (const auto& x : ds.samples) values.insert(values.end(), x.data().begin(), x.data().end());
  std::vector<double> labels(ds.labels.begin(), ds.labels.end());
  std::vector<double> ids(ds.ids.begin(), ds.ids.end());
  s.tensors.emplace_back(all, std::move(values));
  s.tensors.push_back(Tensor::vector(std::move(labels)));
  s.tensors.push_back(Tensor::vector(std::move(ids)));
}

LabeledDataset read_dataset(const Container& c, const std::string& section) {
  const auto& s = c.at(section);
  LabeledDataset ds;
  ds.classes = static_cast<std::size_t>(s.get_int("classes"));
  ds.split = static_cast<Split>(s.get_int("split_code"));
  const auto& all = s.tensor(0);
  const auto& labels = s.tensor(1);
  const auto& ids = s.tensor(2);
  const std::size_t n = all.dim(0);
  ds.sample_shape.assign(all.shape().begin() + 1, all.shape().end());
  const std::size_t per = shape_numel(ds.sample_shape);
  if (labels.numel() != n || ids.numel() != n) throw FormatError("dataset section '" + section + "' is inconsistent");
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> v(all.data().begin() + static_cast<std::ptrdiff_t>(i * per),
                          all.data().begin() + static_cast<std::ptrdiff_t>((i + 1) * per));
    ds.push(Tensor(ds.sample_shape, std::move(v)), static_cast<std::size_t>(labels[i]),
            static_cast<std::size_t>(ids[i]));
  }
  ds.validate();
  return ds;
}

}  // namespace ucan
