#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

#include "doctest.h"
#include "grad_check.hpp"
#include "ucan/auxiliary.hpp"
#include "ucan/ops.hpp"

using namespace ucan;
using ucan::testing::check_gradients;
using ucan::testing::random_tensor;

namespace {

AuxBlock make_block(std::size_t channels, std::size_t dim, std::size_t classes, std::uint64_t seed) {
  ArcFaceConfig cfg;
  cfg.embed_dim = dim;
  cfg.classes = classes;
  Rng rng(seed);
  return AuxBlock::create(1, channels, cfg, rng);
}

double lse_loss(const std::vector<double>& z, std::size_t y) {
  const double mx = *std::max_element(z.begin(), z.end());
  long double t = 0;
  for (double v : z) t += std::exp(static_cast<long double>(v - mx));
  return static_cast<double>(std::log(t)) + mx - z[y];
}

// Direct summation of the per-layer cosine statistics.
LayerScore brute_score(const Tensor& centers, const std::vector<Tensor>& emb, const std::vector<std::size_t>& labels) {
  const std::size_t cl = centers.dim(0), d = centers.dim(1);
  double plus = 0, minus = 0;
  for (std::size_t i = 0; i < labels.size(); ++i) {
    for (std::size_t j = 0; j < cl; ++j) {
      double dot = 0, n = 0;
      for (std::size_t t = 0; t < d; ++t) {
        dot += centers[j * d + t] * emb[i][t];
        n += centers[j * d + t] * centers[j * d + t];
      }
      const double c = dot / std::sqrt(n);
      if (j == labels[i]) plus += c;
      else minus += c / double(cl - 1);
    }
  }
  LayerScore s;
  s.cs_plus = plus / double(labels.size());
  s.cs_minus = minus / double(labels.size());
  s.cs_avg = (s.cs_plus - s.cs_minus) / 2;
  return s;
}

std::vector<LayerScore> scores(std::initializer_list<double> avg) {
  std::vector<LayerScore> out;
  std::size_t k = 1;
  for (double a : avg) out.push_back({k++, a, -a, a});
  return out;
}

}  // namespace

TEST_CASE("aux_forward") {
  std::mt19937_64 rng(1);
  SUBCASE("unit norm") {
    for (int t = 0; t < 50; ++t) {
      auto blk = make_block(4, 6, 3, t);
      auto p = aux_forward(blk, random_tensor({4, 3, 3}, rng, -1, 1, false));
      double n = 0;
      for (double v : p.data()) n += v * v;
      CHECK(std::abs(std::sqrt(n) - 1) <= 1e-6);
    }
  }
  SUBCASE("identity projection of a constant map") {
    auto blk = make_block(3, 3, 2, 0);
    blk.proj_weight = Tensor({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    blk.proj_bias = Tensor({3});
    std::vector<double> v;
    for (double c : {2.0, -1.0, 0.5}) v.insert(v.end(), 4, c);
    auto p = aux_forward(blk, Tensor({3, 2, 2}, v));
    auto ref = ops::l2_normalize(Tensor::vector({2.0, -1.0, 0.5}));
    for (std::size_t j = 0; j < 3; ++j) CHECK(std::abs(p[j] - ref[j]) <= 1e-15);
  }
  SUBCASE("equals the primitive chain and the pooled fast path") {
    for (int t = 0; t < 20; ++t) {
      auto blk = make_block(5, 4, 3, 100 + t);
      blk.proj_bias = random_tensor({4}, rng, -1, 1, false);
      auto z = random_tensor({5, 4, 3}, rng, -1, 1, false);
      auto p = aux_forward(blk, z);
      auto chain = ops::l2_normalize(ops::global_avg_pool(ops::conv1x1(z, blk.proj_weight, blk.proj_bias)));
      auto fast = aux_forward_pooled(ops::global_avg_pool(z), blk.proj_weight, blk.proj_bias);
      for (std::size_t j = 0; j < 4; ++j) {
        CHECK(std::abs(p[j] - chain[j]) <= 1e-12);
        CHECK(std::abs(p[j] - fast[j]) <= 1e-12);
      }
    }
  }
  SUBCASE("channel mismatch") {
    auto blk = make_block(3, 4, 2, 0);
    CHECK_THROWS_AS(aux_forward(blk, Tensor({2, 2, 2})), DimensionError);
  }
}

TEST_CASE("cosine_scores") {
  std::mt19937_64 rng(2);
  SUBCASE("self-similarity") {
    auto centers = random_tensor({3, 5}, rng, -1, 1, false);
    auto row = ops::l2_normalize(Tensor::vector({centers[5], centers[6], centers[7], centers[8], centers[9]}));
    CHECK(cosine_scores(centers, row)[1] == doctest::Approx(1.0).epsilon(1e-14));
  }
  SUBCASE("orthonormal centres") {
    auto cs = cosine_scores(Tensor({2, 2}, {1, 0, 0, 1}), Tensor::vector({1, 0}));
    CHECK(cs[0] == 1.0);
    CHECK(cs[1] == 0.0);
  }
  SUBCASE("random against normalize-then-dot") {
    for (int t = 0; t < 20; ++t) {
      auto centers = random_tensor({4, 6}, rng, -1, 1, false);
      auto p = ops::l2_normalize(random_tensor({6}, rng, -1, 1, false));
      auto cs = cosine_scores(centers, p);
      for (std::size_t j = 0; j < 4; ++j) {
        double dot = 0, n = 0;
        for (std::size_t d = 0; d < 6; ++d) {
          dot += centers[j * 6 + d] * p[d];
          n += centers[j * 6 + d] * centers[j * 6 + d];
        }
        CHECK(std::abs(cs[j] - dot / std::sqrt(n)) <= 1e-12);
        CHECK(std::abs(cs[j]) <= 1.0);
      }
    }
  }
}

TEST_CASE("arcface_loss") {
  ArcFaceConfig cfg;
  cfg.classes = 4;
  std::mt19937_64 rng(3);

  SUBCASE("zero margin is softmax cross-entropy over scaled cosines") {
    auto c0 = cfg;
    c0.margin = 0.0;
    for (int t = 0; t < 20; ++t) {
      auto cs = random_tensor({4}, rng, -1, 1, false);
      const auto y = static_cast<std::size_t>(t % 4);
      CHECK(arcface_loss(cs, y, c0).item() == ops::softmax_xent(ops::scale(cs, c0.scale), y).item());
    }
  }
  SUBCASE("two classes, perfect target") {
    ArcFaceConfig c2;
    c2.classes = 2;
    const double oracle = std::log1p(std::exp(64.0 * (-1.0 - std::cos(0.5))));
    const double got = arcface_loss(Tensor::vector({1.0, -1.0}), 0, c2).item();
    CHECK(std::abs(got - oracle) <= 1e-10);
    CHECK(got <= 1e-10);
  }
  SUBCASE("equal cosines without margin") {
    auto c0 = cfg;
    c0.margin = 0.0;
    c0.classes = 5;
    CHECK(arcface_loss(Tensor::vector({0.3, 0.3, 0.3, 0.3, 0.3}), 2, c0).item() ==
          doctest::Approx(std::log(5.0)).epsilon(1e-13));
  }
  SUBCASE("reference log-sum-exp") {
    for (int t = 0; t < 20; ++t) {
      auto cs = random_tensor({4}, rng, -0.9, 0.9, false);
      const std::size_t y = t % 4;
      std::vector<double> z(4);
      for (std::size_t j = 0; j < 4; ++j) z[j] = 64.0 * (j == y ? std::cos(std::acos(cs[j]) + 0.5) : cs[j]);
      CHECK(std::abs(arcface_loss(cs, y, cfg).item() - lse_loss(z, y)) <= 1e-9);
    }
  }
  SUBCASE("margin never lowers the loss") {
    auto c0 = cfg;
    c0.margin = 0.0;
    std::uniform_real_distribution<double> um(0.01, std::numbers::pi / 2 - 0.01);
    for (int t = 0; t < 500; ++t) {
      auto cm = cfg;
      cm.margin = um(rng);
      auto cs = random_tensor({4}, rng, -1, 1, false);
      const std::size_t y = t % 4;
      if (std::acos(cs[y]) + cm.margin > std::numbers::pi) continue;
      CHECK(arcface_loss(cs, y, cm).item() >= arcface_loss(cs, y, c0).item());
    }
  }
  SUBCASE("saturated cosines stay finite") {
    auto l = arcface_loss(Tensor::vector({1.0, -1.0, 1.0, -1.0}, true), 1, cfg);
    CHECK(std::isfinite(l.item()));
  }
  SUBCASE("errors") {
    CHECK_THROWS_AS(arcface_loss(Tensor::vector({0.1, 0.2}), 2, cfg), IndexError);
  }
  SUBCASE("gradient against finite differences") {
    for (int t = 0; t < 20; ++t) {
      const std::size_t y = t % 4;
      auto r = check_gradients([&](const std::vector<Tensor>& in) { return arcface_loss(in[0], y, cfg); },
                               {random_tensor({4}, rng, -0.9, 0.9)});
      CHECK(r.max_rel_error < 1e-4);
    }
  }
}

TEST_CASE("scale placed on every exponential cancels") {
  // With s multiplying each exponential term, s factors out of the ratio and
  // the loss is the s=1 loss; only s inside the exponent sharpens the softmax.
  std::mt19937_64 rng(4);
  for (int t = 0; t < 50; ++t) {
    auto cs = random_tensor({5}, rng, -0.95, 0.95, false);
    const std::size_t y = t % 5;
    const double s = 1.0 + 100.0 * std::uniform_real_distribution<double>(0, 1)(rng);
    const double m = 0.5;
    const double target = std::cos(std::acos(cs[y]) + m);
    double outside_num = s * std::exp(target), outside_den = outside_num;
    double plain_num = std::exp(target), plain_den = plain_num;
    for (std::size_t j = 0; j < 5; ++j) {
      if (j == y) continue;
      outside_den += s * std::exp(cs[j]);
      plain_den += std::exp(cs[j]);
    }
    CHECK(std::abs(-std::log(outside_num / outside_den) + std::log(plain_num / plain_den)) <= 1e-12);
  }
}

TEST_CASE("global_loss") {
  std::vector<Tensor> same(3, Tensor::scalar(0.7));
  CHECK(global_loss(same).item() == doctest::Approx(0.7).epsilon(1e-15));
  std::vector<Tensor> one{Tensor::scalar(1.25)};
  CHECK(global_loss(one).item() == 1.25);
  std::mt19937_64 rng(5);
  std::vector<Tensor> many;
  double sum = 0;
  for (int i = 0; i < 7; ++i) {
    many.push_back(random_tensor({}, rng, 0, 5, false));
    sum += many.back().item();
  }
  CHECK(std::abs(global_loss(many).item() - sum / 7) <= 1e-12);
  CHECK_THROWS_AS(global_loss(std::vector<Tensor>{}), ContractError);
}

TEST_CASE("tap to loss chain against finite differences") {
  ArcFaceConfig cfg;
  cfg.embed_dim = 5;
  cfg.classes = 3;
  double worst = 0;
  for (int seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(500 + seed);
    const std::size_t y = seed % 3;
    auto r = check_gradients(
        [&](const std::vector<Tensor>& in) {
          AuxBlock b;
          b.layer = 1;
          b.config = cfg;
          b.proj_weight = in[1];
          b.proj_bias = in[2];
          b.centers = in[3];
          return arcface_loss(cosine_scores(b, aux_forward(b, in[0])), y, cfg);
        },
        {random_tensor({4, 3, 3}, rng), random_tensor({5, 4}, rng), random_tensor({5}, rng),
         random_tensor({3, 5}, rng)});
    worst = std::max(worst, r.max_rel_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("layer scores") {
  SUBCASE("perfect separation") {
    Tensor centers({2, 2}, {1, 0, -1, 0});
    std::vector<std::vector<Tensor>> emb{{Tensor::vector({1, 0}), Tensor::vector({-1, 0})}};
    auto r = layer_scores_from(std::vector<Tensor>{centers}, emb, {0, 1});
    CHECK(r.layers[0].cs_plus == 1.0);
    CHECK(r.layers[0].cs_minus == -1.0);
    CHECK(r.layers[0].cs_avg == 1.0);
    CHECK(r.tcs == 1.0);
  }
  SUBCASE("orthogonal embeddings") {
    Tensor centers({2, 3}, {1, 0, 0, 0, 1, 0});
    std::vector<std::vector<Tensor>> emb{{Tensor::vector({0, 0, 1}), Tensor::vector({0, 0, -1})}};
    auto r = layer_scores_from(std::vector<Tensor>{centers}, emb, {0, 1});
    CHECK(r.layers[0].cs_plus == 0.0);
    CHECK(r.layers[0].cs_minus == 0.0);
    CHECK(r.layers[0].cs_avg == 0.0);
  }
  SUBCASE("random against direct summation, relabel invariance") {
    std::mt19937_64 rng(6);
    for (int t = 0; t < 10; ++t) {
      std::vector<Tensor> centers;
      std::vector<std::vector<Tensor>> emb(3);
      std::vector<std::size_t> labels;
      for (int i = 0; i < 12; ++i) labels.push_back(rng() % 4);
      for (int l = 0; l < 3; ++l) {
        centers.push_back(random_tensor({4, 5}, rng, -1, 1, false));
        for (int i = 0; i < 12; ++i) emb[l].push_back(ops::l2_normalize(random_tensor({5}, rng, -1, 1, false)));
      }
      auto r = layer_scores_from(centers, emb, labels);
      double tcs = 0;
      for (int l = 0; l < 3; ++l) {
        auto b = brute_score(centers[l], emb[l], labels);
        CHECK(std::abs(r.layers[l].cs_plus - b.cs_plus) <= 1e-10);
        CHECK(std::abs(r.layers[l].cs_minus - b.cs_minus) <= 1e-10);
        CHECK(std::abs(r.layers[l].cs_avg - b.cs_avg) <= 1e-10);
        CHECK(r.layers[l].cs_avg >= -1.0);
        CHECK(r.layers[l].cs_avg <= 1.0);
        tcs += b.cs_avg / 3;
      }
      CHECK(std::abs(r.tcs - tcs) <= 1e-10);

      const std::vector<std::size_t> perm{2, 0, 3, 1};
      std::vector<Tensor> permuted;
      for (const auto& c : centers) {
        std::vector<double> v(20);
        for (std::size_t j = 0; j < 4; ++j) {
          for (std::size_t d = 0; d < 5; ++d) v[perm[j] * 5 + d] = c[j * 5 + d];
        }
        permuted.emplace_back(Shape{4, 5}, v);
      }
      std::vector<std::size_t> relabeled;
      for (auto y : labels) relabeled.push_back(perm[y]);
      CHECK(std::abs(layer_scores_from(permuted, emb, relabeled).tcs - r.tcs) <= 1e-12);
    }
  }
  SUBCASE("empty validation set") {
    std::vector<std::vector<Tensor>> emb{{}};
    CHECK_THROWS_AS(layer_scores_from(std::vector<Tensor>{Tensor({2, 2})}, emb, {}), DataError);
  }
}

TEST_CASE("select_layers") {
  auto s = scores({0.1, 0.5, 0.9});
  auto top2 = select_layers(s, SelectionPolicy::top(2));
  std::sort(top2.begin(), top2.end());
  CHECK(top2 == std::vector<std::size_t>{2, 3});
  CHECK(select_layers(s, SelectionPolicy::offset(2)) == std::vector<std::size_t>{2, 3});
  CHECK(select_layers(scores({0.5, 0.5, 0.1}), SelectionPolicy::top(1)) == std::vector<std::size_t>{1});
  CHECK(select_layers(scores({0.2, 0.7, 0.4, 0.7}), SelectionPolicy::top(4)) == std::vector<std::size_t>{2, 4, 3, 1});
  CHECK_THROWS_AS(select_layers(s, SelectionPolicy::top(4)), ContractError);
  CHECK_THROWS_AS(select_layers(s, SelectionPolicy::offset(0)), ContractError);
  CHECK_THROWS_AS(select_layers(s, SelectionPolicy::offset(4)), ContractError);

  std::mt19937_64 rng(7);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> v(6);
    for (auto& x : v) x = std::uniform_real_distribution<double>(-1, 1)(rng);
    std::sort(v.begin(), v.end());
    std::vector<LayerScore> ls;
    for (std::size_t k = 0; k < v.size(); ++k) ls.push_back({k + 1, 0, 0, v[k]});
    for (std::size_t sz = 1; sz <= 6; ++sz) {
      auto top = select_layers(ls, SelectionPolicy::top(sz));
      std::sort(top.begin(), top.end());
      CHECK(top == select_layers(ls, SelectionPolicy::offset(7 - sz)));
    }
  }
}

TEST_CASE("train_aux on a frozen SmallCNN") {
  SyntheticImageSpec s;
  s.per_class = 150;
  s.seed = 11;
  auto split = split_dataset(gen_synthetic(s), kDefaultSplit, 11);
  BackboneModel m(BackboneSpec::small_cnn({3, 16, 16}, 4), 11);
  BackboneTrainOptions bo;
  bo.epochs = 20;
  train_backbone(m, split.train, bo);

  ArcFaceConfig cfg;
  auto blocks = init_aux_blocks(m, cfg, 4);
  CHECK_THROWS_AS(train_aux(m, blocks, split.train, {}), ContractError);
  m.freeze();
  const auto checksum = m.checksum();

  AuxTrainOptions zero;
  zero.epochs = 0;
  auto untouched = blocks;
  for (auto& b : untouched) {
    b.proj_weight = b.proj_weight.detach();
    b.centers = b.centers.detach();
  }
  CHECK(train_aux(m, blocks, split.train, zero).empty());
  for (std::size_t b = 0; b < blocks.size(); ++b) {
    for (std::size_t i = 0; i < blocks[b].proj_weight.numel(); ++i) {
      CHECK(blocks[b].proj_weight[i] == untouched[b].proj_weight[i]);
    }
  }

  const double before = layer_scores(m, blocks, split.val).tcs;
  AuxTrainOptions o;
  o.epochs = 15;
  o.validation = &split.val;
  auto log = train_aux(m, blocks, split.train, o);
  REQUIRE(log.size() == 15);
  const auto after = layer_scores(m, blocks, split.val);
  CHECK(after.tcs > before);
  CHECK(std::abs(log.back().metric - after.tcs) <= 1e-12);
  CHECK(m.checksum() == checksum);

  Container c;
  append_aux(c, blocks);
  auto back = read_aux(Container::decode(c.encode()));
  REQUIRE(back.size() == blocks.size());
  CHECK(back[2].layer == blocks[2].layer);
  CHECK(back[2].config.margin == blocks[2].config.margin);
  CHECK(back[2].centers[3] == static_cast<double>(static_cast<float>(blocks[2].centers[3])));
}
