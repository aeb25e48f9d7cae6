#include <filesystem>
#include <thread>

#include "doctest.h"
#include "ucan/backbone.hpp"

using namespace ucan;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const std::string& name) {
  auto dir = fs::temp_directory_path() / "ucan_test_backbone";
  fs::create_directories(dir);
  return dir / name;
}

bool same_weights(const BackboneModel& a, const BackboneModel& b) {
  const auto& pa = a.parameters();
  const auto& pb = b.parameters();
  if (pa.size() != pb.size()) return false;
  for (std::size_t k = 0; k < pa.size(); ++k) {
    for (std::size_t i = 0; i < pa[k].numel(); ++i) {
      if (pa[k][i] != pb[k][i]) return false;
    }
  }
  return true;
}

LabeledDataset small_images(std::size_t per_class, std::uint64_t seed) {
  SyntheticImageSpec s;
  s.per_class = per_class;
  s.seed = seed;
  return gen_synthetic(s);
}

}  // namespace

TEST_CASE("spec structure") {
  auto spec = BackboneSpec::small_cnn({3, 16, 16}, 4);
  CHECK(spec.tap_count() == 4);
  auto shapes = spec.tap_shapes();
  CHECK(shapes[0] == Shape{8, 16, 16});
  CHECK(shapes[1] == Shape{16, 8, 8});
  CHECK(shapes[2] == Shape{32, 4, 4});
  CHECK(shapes[3] == Shape{32, 1, 1});
  CHECK(BackboneSpec::decode(spec.encode()).encode() == spec.encode());

  BackboneSpec bad = spec;
  for (auto& st : bad.stages) st.tap = false;
  bad.stages[0].tap = true;
  CHECK_THROWS_AS(bad.validate(), ConfigError);
}

TEST_CASE("forward_with_taps") {
  auto spec = BackboneSpec::small_cnn({3, 16, 16}, 4);
  BackboneModel m(spec, 5);
  auto ds = small_images(2, 1);
  const auto shapes = spec.tap_shapes();
  for (const auto& x : ds.samples) {
    auto out = m.forward_with_taps(x);
    REQUIRE(out.taps.size() == spec.tap_count());
    for (std::size_t k = 0; k < shapes.size(); ++k) CHECK(out.taps[k].shape() == shapes[k]);
    auto plain = m.logits(x);
    for (std::size_t j = 0; j < plain.numel(); ++j) CHECK(plain[j] == out.logits[j]);
  }
  CHECK_THROWS_AS(m.logits(Tensor({3, 8, 8})), DimensionError);

  SUBCASE("pure across threads") {
    const auto ref = m.logits(ds.samples[0]);
    std::vector<std::vector<double>> got(4);
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < got.size(); ++t) {
      pool.emplace_back([&, t] {
        auto l = m.logits(ds.samples[0]);
        got[t].assign(l.data().begin(), l.data().end());
      });
    }
    for (auto& th : pool) th.join();
    for (const auto& g : got) {
      for (std::size_t j = 0; j < g.size(); ++j) CHECK(g[j] == ref[j]);
    }
  }
}

TEST_CASE("training contracts") {
  auto ds = small_images(10, 2);
  auto spec = BackboneSpec::small_cnn({3, 16, 16}, 4);

  SUBCASE("epochs=0 is a no-op") {
    BackboneModel m(spec, 1), ref(spec, 1);
    BackboneTrainOptions o;
    o.epochs = 0;
    CHECK(train_backbone(m, ds, o).empty());
    CHECK(same_weights(m, ref));
  }
  SUBCASE("same seed gives identical weights") {
    BackboneModel a(spec, 1), b(spec, 1);
    BackboneTrainOptions o;
    o.epochs = 2;
    o.seed = 9;
    auto la = train_backbone(a, ds, o);
    const auto threads = thread_count();
    set_thread_count(1);
    auto lb = train_backbone(b, ds, o);
    set_thread_count(threads);
    CHECK(same_weights(a, b));
    for (const auto& e : la) CHECK(std::isfinite(e.loss));
  }
  SUBCASE("frozen model refuses training") {
    BackboneModel m(spec, 1);
    m.freeze();
    const auto before = m.checksum();
    CHECK_THROWS_AS(train_backbone(m, ds, {}), ContractError);
    CHECK(m.checksum() == before);
  }
  SUBCASE("empty and mismatched data") {
    BackboneModel m(spec, 1);
    LabeledDataset empty;
    empty.classes = 4;
    empty.sample_shape = {3, 16, 16};
    CHECK_THROWS_AS(train_backbone(m, empty, {}), DataError);
    auto wrong = ds;
    wrong.classes = 5;
    CHECK_THROWS_AS(train_backbone(m, wrong, {}), DataError);
  }
}

TEST_CASE("mlp on 4-class blobs reaches 95% validation accuracy") {
  SyntheticBlobSpec bs;
  bs.per_class = 100;
  bs.seed = 3;
  auto split = split_dataset(gen_blobs(bs), kDefaultSplit, 3);
  BackboneModel m(BackboneSpec::mlp(bs.dim, {32, 16}, 4), 3);
  BackboneTrainOptions o;
  o.epochs = 30;
  o.validation = &split.val;
  auto log = train_backbone(m, split.train, o);
  REQUIRE(log.size() == 30);
  CHECK(log.back().val_accuracy >= 0.95);
}

TEST_CASE("SmallCNN on synthetic images reaches 95% validation accuracy") {
  auto split = split_dataset(small_images(300, 1), kDefaultSplit, 1);
  BackboneModel m(BackboneSpec::small_cnn({3, 16, 16}, 4), 1);
  BackboneTrainOptions o;
  o.epochs = 30;
  o.validation = &split.val;
  auto log = train_backbone(m, split.train, o);
  for (const auto& e : log) CHECK(std::isfinite(e.loss));
  CHECK(log.back().val_accuracy >= 0.95);

  SUBCASE("roundtrip") {
    m.freeze();
    auto path = temp_file("model.ucan");
    serialize_model(m, path);
    auto back = load_model(path);
    CHECK(back.frozen());
    CHECK(back.spec().encode() == m.spec().encode());
    for (std::size_t k = 0; k < m.parameters().size(); ++k) {
      for (std::size_t i = 0; i < m.parameters()[k].numel(); ++i) {
        CHECK(back.parameters()[k][i] == static_cast<double>(static_cast<float>(m.parameters()[k][i])));
      }
    }
    auto path2 = temp_file("model2.ucan");
    serialize_model(back, path2);
    CHECK(same_weights(load_model(path2), back));
  }
}

TEST_CASE("load errors are distinct") {
  BackboneModel m(BackboneSpec::small_cnn({3, 16, 16}, 4), 1);
  Container c;
  append_backbone(c, m);
  auto bytes = c.encode();
  auto bad = bytes;
  bad[1] = 'Z';
  CHECK_THROWS_AS(read_backbone(Container::decode(bad)), BadMagicError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(read_backbone(Container::decode(bad)), VersionMismatchError);
  bad = bytes;
  bad.resize(bytes.size() / 2);
  CHECK_THROWS_AS(read_backbone(Container::decode(bad)), TruncatedFileError);
}
