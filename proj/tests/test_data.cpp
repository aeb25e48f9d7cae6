#include <filesystem>
#include <fstream>
#include <set>

#include "doctest.h"
#include "ucan/container.hpp"
#include "ucan/dataset.hpp"

using namespace ucan;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "ucan_test_data";
  fs::create_directories(dir);
  return dir / name;
}

void write_bytes(const fs::path& p, const std::vector<unsigned char>& bytes) {
  std::ofstream out(p, std::ios::binary);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

LabeledDataset tiny(std::size_t classes, std::size_t per_class) {
  LabeledDataset ds;
  ds.sample_shape = {2, 1, 1};
  ds.classes = classes;
  for (std::size_t i = 0; i < classes * per_class; ++i) {
    ds.push(Tensor({2, 1, 1}, {double(i), double(i % classes)}), i % classes, i);
  }
  return ds;
}

}  // namespace

TEST_CASE("gen_synthetic") {
  SyntheticImageSpec spec;
  spec.per_class = 6;
  spec.seed = 17;
  auto a = gen_synthetic(spec);
  auto b = gen_synthetic(spec);
  REQUIRE(a.size() == 24);
  for (auto c : a.class_counts()) CHECK(c == 6);
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a.labels[i] == b.labels[i]);
    for (std::size_t j = 0; j < a.samples[i].numel(); ++j) CHECK(a.samples[i][j] == b.samples[i][j]);
    for (double v : a.samples[i].data()) {
      CHECK(v >= 0.0);
      CHECK(v <= 1.0);
    }
  }
  spec.seed = 18;
  auto c = gen_synthetic(spec);
  bool differs = false;
  for (std::size_t j = 0; j < c.samples[0].numel(); ++j) differs |= c.samples[0][j] != a.samples[0][j];
  CHECK(differs);

  spec.classes = 1;
  CHECK_THROWS_AS(gen_synthetic(spec), ConfigError);
  spec.classes = 4;
  spec.per_class = 0;
  CHECK_THROWS_AS(gen_synthetic(spec), ConfigError);
}

TEST_CASE("split_dataset") {
  auto ds = tiny(4, 10);
  auto s = split_dataset(ds, {0.25, 0.25, 0.25, 0.25}, 3);
  for (const auto* part : {&s.train, &s.val, &s.calib, &s.test}) {
    CHECK(part->size() == 10);
    auto counts = part->class_counts();
    CHECK(*std::max_element(counts.begin(), counts.end()) - *std::min_element(counts.begin(), counts.end()) <= 1);
  }
  std::set<std::size_t> ids;
  std::size_t total = 0;
  for (const auto* part : {&s.train, &s.val, &s.calib, &s.test}) {
    for (auto id : part->ids) ids.insert(id);
    total += part->size();
  }
  CHECK(total == 40);
  CHECK(ids.size() == 40);
  CHECK(s.train.split == Split::Train);
  CHECK(s.test.split == Split::Test);

  auto again = split_dataset(ds, {0.25, 0.25, 0.25, 0.25}, 3);
  CHECK(again.train.ids == s.train.ids);
  CHECK(again.calib.ids == s.calib.ids);

  auto def = split_dataset(tiny(4, 50), kDefaultSplit, 1);
  CHECK(def.train.size() == 120);
  CHECK(def.val.size() == 30);
  CHECK(def.calib.size() == 20);
  CHECK(def.test.size() == 30);

  CHECK_THROWS_AS(split_dataset(ds, {0.3, 0.3, 0.3, 0.3}, 0), ConfigError);
  CHECK_THROWS_AS(split_dataset(ds, {0.5, 0.5, 0.0, 0.0}, 0), ConfigError);
}

TEST_CASE("cifar10 binary") {
  std::vector<unsigned char> bytes(3 * kCifarRecordBytes, 0);
  bytes[0] = 3;
  bytes[1] = 255;
  bytes[kCifarRecordBytes] = 7;
  bytes[2 * kCifarRecordBytes] = 3;
  bytes[2 * kCifarRecordBytes + 5] = 51;
  auto path = temp_file("batch.bin");
  write_bytes(path, bytes);

  auto all = load_cifar10_binary(path);
  REQUIRE(all.size() == 3);
  CHECK(all.sample_shape == Shape{3, 32, 32});
  CHECK(all.labels[0] == 3);
  CHECK(all.samples[0][0] == 1.0);
  CHECK(all.samples[2][4] == 51.0 / 255.0);

  auto sub = load_cifar10_binary(path, {7, 3});
  REQUIRE(sub.size() == 3);
  CHECK(sub.labels[0] == 1);
  CHECK(sub.labels[1] == 0);
  auto only = load_cifar10_binary(path, {7});
  CHECK(only.size() == 1);

  bytes.pop_back();
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_cifar10_binary(path), FormatError);

  bytes.push_back(0);
  bytes[kCifarRecordBytes] = 10;
  write_bytes(path, bytes);
  CHECK_THROWS_AS(load_cifar10_binary(path), CorruptRecordError);
}

TEST_CASE("container roundtrip and failure modes") {
  Container c;
  auto& s = c.add("alpha");
  s.set("name", std::string("value"));
  s.set("pi", 3.141592653589793);
  s.set("n", std::int64_t{-42});
  s.tensors.push_back(Tensor({2, 3}, {0.5, -1.25, 2, 3, 4, 1e-3}));
  c.add("beta").tensors.push_back(Tensor({1}, std::vector<double>{7}));

  auto bytes = c.encode();
  auto d = Container::decode(bytes);
  REQUIRE(d.has("alpha"));
  CHECK(d.at("alpha").get("name") == "value");
  CHECK(d.at("alpha").get_double("pi") == 3.141592653589793);
  CHECK(d.at("alpha").get_int("n") == -42);
  const auto& t = d.at("alpha").tensor(0);
  CHECK(t.shape() == Shape{2, 3});
  CHECK(t[1] == -1.25);
  CHECK(t[5] == static_cast<double>(static_cast<float>(1e-3)));
  CHECK(Container::decode(d.encode()).encode() == bytes);

  SUBCASE("bad magic") {
    bytes[0] = 'X';
    CHECK_THROWS_AS(Container::decode(bytes), BadMagicError);
  }
  SUBCASE("version bump") {
    bytes[4] = kContainerVersion + 1;
    CHECK_THROWS_AS(Container::decode(bytes), VersionMismatchError);
  }
  SUBCASE("truncated") {
    bytes.resize(bytes.size() - 9);
    CHECK_THROWS_AS(Container::decode(bytes), TruncatedFileError);
  }
  SUBCASE("flipped payload byte") {
    bytes[bytes.size() - 10] ^= 0x40;
    CHECK_THROWS_AS(Container::decode(bytes), ChecksumError);
  }
  SUBCASE("missing file") {
    CHECK_THROWS_AS(Container::load(temp_file("does_not_exist.ucan")), ResolutionError);
  }
}

TEST_CASE("dataset persistence") {
  SyntheticImageSpec spec;
  spec.per_class = 3;
  auto ds = gen_synthetic(spec);
  Container c;
  append_dataset(c, "data", ds);
  auto path = temp_file("ds.ucan");
  c.save(path);
  auto back = read_dataset(Container::load(path), "data");
  REQUIRE(back.size() == ds.size());
  CHECK(back.labels == ds.labels);
  CHECK(back.ids == ds.ids);
  for (std::size_t j = 0; j < ds.samples[4].numel(); ++j) {
    CHECK(back.samples[4][j] == static_cast<double>(static_cast<float>(ds.samples[4][j])));
  }
}
